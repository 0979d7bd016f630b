//! Dataset-wide affine normalization: center at the modal value, scale by
//! the distance from the mode to the 95th percentile.

use super::Image2D;
use crate::error::{Error, Result};

pub const MODE_BINS: usize = 1024;
pub const SCALE_PERCENTILE: f64 = 0.95;
/// Pooled samples used for the percentile are subsampled to at most this.
pub const MAX_PERCENTILE_SAMPLES: usize = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationRecord {
    pub center: f64,
    pub scale: f64,
}

impl NormalizationRecord {
    pub fn new(center: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !center.is_finite() {
            return Err(Error::Data(format!("invalid normalization center={center} scale={scale}")));
        }
        Ok(Self { center, scale })
    }

    #[inline]
    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    #[inline]
    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.scale + self.center
    }

    pub fn normalize(&self, img: &Image2D) -> Result<Image2D> {
        img.map(|v| self.normalize_value(v as f64) as f32)
    }

    pub fn denormalize(&self, img: &Image2D) -> Result<Image2D> {
        img.map(|v| self.denormalize_value(v as f64) as f32)
    }
}

/// Linear-interpolation percentile of a sorted sample, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Midpoint of the fullest of `bins` equal bins over `[lo, hi]` (first bin
/// on ties).
pub fn histogram_mode<'a>(values: impl Iterator<Item = &'a f32>, lo: f64, hi: f64, bins: usize) -> f64 {
    if !(hi > lo) {
        return lo;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let k = (((v as f64 - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let best = counts
        .iter()
        .enumerate()
        .fold(0, |b, (i, &c)| if c > counts[b] { i } else { b });
    lo + (best as f64 + 0.5) * width
}

pub fn fit_normalization(dataset: &[Image2D]) -> Result<NormalizationRecord> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot fit normalization on an empty dataset".into()));
    }
    let (lo, hi) = dataset.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), img| {
        let (a, b) = img.min_max();
        (lo.min(a as f64), hi.max(b as f64))
    });
    let mode = histogram_mode(dataset.iter().flat_map(|i| i.values()), lo, hi, MODE_BINS);
    let total: usize = dataset.iter().map(Image2D::len).sum();
    let stride = total.div_ceil(MAX_PERCENTILE_SAMPLES).max(1);
    let mut pooled: Vec<f64> = dataset
        .iter()
        .flat_map(|i| i.values())
        .step_by(stride)
        .map(|&v| v as f64)
        .collect();
    pooled.sort_by(f64::total_cmp);
    let p95 = percentile_sorted(&pooled, SCALE_PERCENTILE);
    let scale = p95 - mode;
    if !(scale > 0.0) {
        return Err(Error::Data(format!(
            "degenerate normalization: 95th percentile {p95} does not exceed mode {mode}"
        )));
    }
    NormalizationRecord::new(mode, scale)
}
