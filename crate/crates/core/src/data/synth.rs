//! Synthetic noise models and Gaussian-blob phantoms.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use super::Image2D;
use crate::error::{Error, Result};

/// Signal-dependent noise generators. `x_min` is the minimum of the clean
/// ground truth over the whole dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    /// `Y = X + sigma * e`
    Gaussian { sigma: f64 },
    /// `Y = X + sqrt(alpha * (X - x_min) + eta^2) * e`
    PoissonGaussian { alpha: f64, eta: f64 },
    /// `Y = X + (X - x_min) * sigma * e`
    Speckle { sigma: f64 },
    /// `Y = X + s(X) * (E - 1)` with `E ~ Exp(1)` and
    /// `s(X) = base + slope * (X - x_min)`: centered, skewness 2.
    ShiftedExponential { base: f64, slope: f64 },
}

impl NoiseKind {
    /// Standard deviation of the noise at signal `x`.
    pub fn std_at(&self, x: f64, x_min: f64) -> f64 {
        match *self {
            NoiseKind::Gaussian { sigma } => sigma,
            NoiseKind::PoissonGaussian { alpha, eta } => (alpha * (x - x_min) + eta * eta).max(0.0).sqrt(),
            NoiseKind::Speckle { sigma } => (x - x_min).abs() * sigma,
            NoiseKind::ShiftedExponential { base, slope } => base + slope * (x - x_min),
        }
    }

    /// Pearson skewness of the noise (zero for the Gaussian models).
    pub fn skewness(&self) -> f64 {
        match self {
            NoiseKind::ShiftedExponential { .. } => 2.0,
            _ => 0.0,
        }
    }
}

/// Adds noise of the given kind to a clean image.
pub fn synth_noise(clean: &Image2D, kind: NoiseKind, rng: &mut impl Rng, x_min: f64) -> Result<Image2D> {
    let mut out = Vec::with_capacity(clean.len());
    for &x in clean.values() {
        let x = x as f64;
        if x < x_min {
            return Err(Error::Data(format!("signal {x} below dataset minimum {x_min}")));
        }
        let s = kind.std_at(x, x_min);
        let e = match kind {
            NoiseKind::ShiftedExponential { .. } => {
                let v: f64 = Exp1.sample(rng);
                v - 1.0
            }
            _ => StandardNormal.sample(rng),
        };
        out.push((x + s * e) as f32);
    }
    let mut img = Image2D::new(clean.height(), clean.width(), out)?;
    img.pair_id.clone_from(&clean.pair_id);
    Ok(img)
}

/// Minimum over a set of images.
pub fn dataset_min(images: &[Image2D]) -> f64 {
    images
        .iter()
        .map(|i| i.min_max().0 as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Parameters of [`generate_phantom`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomSpec {
    pub blob_count: usize,
    /// `(background, brightest blob peak)`.
    pub intensity_range: (f64, f64),
    /// Range of blob standard deviations (pixels) along each principal axis.
    pub blob_sigma: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            blob_count: 24,
            intensity_range: (100.0, 1100.0),
            blob_sigma: (1.0, 6.0),
        }
    }
}

/// Blobs are cut off beyond this many standard deviations, so pixels far
/// from every blob sit exactly at the background level.
const BLOB_CUTOFF: f64 = 3.5;

/// Sum of randomly placed, rotated anisotropic Gaussian blobs on a constant
/// background. Peak amplitudes are uniform over the intensity range with a
/// bias towards dim blobs, giving a heavy bright tail.
pub fn generate_phantom(height: usize, width: usize, rng: &mut impl Rng, spec: &PhantomSpec) -> Result<Image2D> {
    let (bg, peak) = spec.intensity_range;
    if !(peak >= bg) || !(spec.blob_sigma.1 >= spec.blob_sigma.0) || spec.blob_sigma.0 <= 0.0 {
        return Err(Error::Config(format!("invalid phantom spec {spec:?}")));
    }
    let mut v = vec![0.0f64; height * width];
    for _ in 0..spec.blob_count {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let su = rng.random_range(spec.blob_sigma.0..=spec.blob_sigma.1);
        let sv = rng.random_range(spec.blob_sigma.0..=spec.blob_sigma.1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let u: f64 = rng.random();
        let amp = (peak - bg) * u * u;
        let (c, s) = (theta.cos(), theta.sin());
        let reach = BLOB_CUTOFF * su.max(sv);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height - 1);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let a = (c * dx + s * dy) / su;
                let b = (-s * dx + c * dy) / sv;
                let r2 = a * a + b * b;
                if r2 <= BLOB_CUTOFF * BLOB_CUTOFF {
                    v[y * width + x] += amp * (-0.5 * r2).exp();
                }
            }
        }
    }
    Image2D::new(height, width, v.into_iter().map(|d| (bg + d) as f32).collect())
}
