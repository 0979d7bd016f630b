//! Image-quality metrics, the blur baseline and binned noise diagnostics.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::normalize::percentile_sorted;
use crate::data::Image2D;
use crate::error::{Error, Result};
use crate::inference::{noise_model_at, predict};
use crate::networks::NetworkBundle;
use crate::noise_model::{kl_bin, mixture_moments, HistogramBin, Mixture, Moments};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Bins with fewer samples are reported but excluded from summaries.
pub const CONFIDENCE_FLOOR: usize = 100;
pub const REPORT_PERCENTILE: f64 = 0.995;
/// Histogram resolution of the noise values inside one signal bin.
pub const NOISE_HIST_BINS: usize = 50;

fn gt_range(gt: &Image2D) -> f64 {
    let (lo, hi) = gt.min_max();
    hi as f64 - lo as f64
}

/// `10 log10(d^2 / MSE)` with `d` the ground-truth range; `+inf` when the
/// images are identical.
pub fn psnr(pred: &Image2D, gt: &Image2D) -> Result<f64> {
    pred.same_shape(gt)?;
    let mse = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / gt.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let d = gt_range(gt);
    Ok(10.0 * (d * d / mse).log10())
}

fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over the valid region only.
fn filter_valid(v: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * v[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM over all positions where the 11x11 Gaussian window (sigma 1.5)
/// fits, with the ground-truth range as dynamic range.
pub fn ssim(pred: &Image2D, gt: &Image2D) -> Result<f64> {
    pred.same_shape(gt)?;
    let (h, w) = gt.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let range = gt_range(gt);
    // a flat ground truth has no range; fall back to unit range
    let l = if range > 0.0 { range } else { 1.0 };
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let taps = gaussian_taps(SSIM_SIGMA, SSIM_WINDOW / 2);
    let x: Vec<f64> = pred.values().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = gt.values().iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (ux, ..) = filter_valid(&x, h, w, &taps);
    let (uy, ..) = filter_valid(&y, h, w, &taps);
    let (uxx, ..) = filter_valid(&prod(&x, &x), h, w, &taps);
    let (uyy, ..) = filter_valid(&prod(&y, &y), h, w, &taps);
    let (uxy, ..) = filter_valid(&prod(&x, &y), h, w, &taps);
    let n = ux.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (ux[i], uy[i]);
        let vx = uxx[i] - mx * mx;
        let vy = uyy[i] - my * my;
        let cxy = uxy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / n as f64)
}

/// Half-sample symmetric index (`dcba|abcd|dcba`).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Gaussian blur truncated at `4 sigma`, with symmetric borders.
pub fn gaussian_blur(img: &Image2D, sigma: f64) -> Result<Image2D> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (4.0 * sigma + 0.5) as usize;
    let taps = gaussian_taps(sigma, radius);
    let (h, w) = img.dims();
    let v = img.values();
    let r = radius as isize;
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * v[y * w + mirror(x as isize + i as isize - r, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[mirror(y as isize + i as isize - r, h) * w + x])
                .sum::<f64>() as f32;
        }
    }
    let mut res = Image2D::new(h, w, out)?;
    res.depth = img.depth;
    res.pair_id = img.pair_id.clone();
    Ok(res)
}

/// Default blur grid: 0.3 to 5.0 in steps of 0.1.
pub fn default_sigma_grid() -> Vec<f64> {
    (3..=50).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineResult {
    pub sigma: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn check_pairs(a: &[Image2D], b: &[Image2D]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Data(format!("need matching non-empty sets, got {} and {}", a.len(), b.len())));
    }
    a.iter().zip(b).try_for_each(|(x, y)| x.same_shape(y))
}

/// Mean PSNR of `pred` against `gt` over a paired set.
pub fn mean_psnr(pred: &[Image2D], gt: &[Image2D]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let v = pred.iter().zip(gt).map(|(p, g)| psnr(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn mean_ssim(pred: &[Image2D], gt: &[Image2D]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let v = pred.iter().zip(gt).map(|(p, g)| ssim(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Blur strength from `grid` that maximizes the mean PSNR; ties keep the
/// smallest sigma.
pub fn gaussian_baseline(noisy: &[Image2D], gt: &[Image2D], grid: &[f64]) -> Result<BaselineResult> {
    check_pairs(noisy, gt)?;
    if grid.is_empty() {
        return Err(Error::Config("empty sigma grid".into()));
    }
    let scores = grid
        .par_iter()
        .map(|&s| {
            let blurred = noisy.iter().map(|n| gaussian_blur(n, s)).collect::<Result<Vec<_>>>()?;
            mean_psnr(&blurred, gt)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &p) in scores.iter().enumerate() {
        if p > scores[best] {
            best = i;
        }
    }
    let sigma = grid[best];
    let blurred = noisy.iter().map(|n| gaussian_blur(n, sigma)).collect::<Result<Vec<_>>>()?;
    Ok(BaselineResult {
        sigma,
        psnr: scores[best],
        ssim: mean_ssim(&blurred, gt)?,
    })
}

/// Population mean, variance and moment-coefficient skewness.
pub fn sample_moments(values: &[f64]) -> Moments {
    let n = values.len() as f64;
    if values.is_empty() {
        return Moments {
            mean: f64::NAN,
            variance: f64::NAN,
            skewness: None,
        };
    }
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for &v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    Moments {
        mean,
        variance: m2,
        skewness: (m2 > 1e-18).then(|| m3 / m2.powf(1.5)),
    }
}

/// A noise model compared against the empirical noise.
pub enum VariantModel<'a> {
    /// Trained networks; evaluated at the mean denoised value of each bin.
    Bundle(&'a NetworkBundle<f32>),
    /// Closed-form model of the reference signal; evaluated at the mean
    /// reference value of each bin.
    Fixed(Box<dyn Fn(f64) -> Mixture + Sync + 'a>),
}

pub struct ModelVariant<'a> {
    pub name: String,
    pub model: VariantModel<'a>,
}

impl<'a> ModelVariant<'a> {
    pub fn bundle(name: impl Into<String>, bundle: &'a NetworkBundle<f32>) -> Self {
        Self {
            name: name.into(),
            model: VariantModel::Bundle(bundle),
        }
    }

    pub fn fixed(name: impl Into<String>, f: impl Fn(f64) -> Mixture + Sync + 'a) -> Self {
        Self {
            name: name.into(),
            model: VariantModel::Fixed(Box::new(f)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinPrediction {
    /// Signal value the model was evaluated at.
    pub signal: f64,
    pub moments: Moments,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// At least [`CONFIDENCE_FLOOR`] samples.
    pub confident: bool,
    pub reference_mean: f64,
    pub empirical: Moments,
    /// One entry per model variant, in variant order (empty bins have none).
    pub predictions: Vec<BinPrediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinnedNoiseReport {
    pub min: f64,
    /// Upper signal cutoff (99.5th percentile of the reference).
    pub cutoff: f64,
    pub included: usize,
    pub variants: Vec<String>,
    pub bins: Vec<NoiseBin>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

impl BinnedNoiseReport {
    pub fn confident_bins(&self) -> impl Iterator<Item = &NoiseBin> {
        self.bins.iter().filter(|b| b.confident)
    }

    pub fn variant_index(&self, name: &str) -> Option<usize> {
        self.variants.iter().position(|v| v == name)
    }

    /// Median per-bin KL of a variant over the confident bins.
    pub fn median_kl(&self, variant: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .confident_bins()
            .filter_map(|b| b.predictions.get(variant).map(|p| p.kl))
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    /// Tab-separated table with a header row, one row per bin.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin_lo\tbin_hi\tcount\tconfident\treference_mean\tnoise_mean\tnoise_std\tnoise_skewness");
        for v in &self.variants {
            let _ = write!(s, "\t{v}_signal\t{v}_std\t{v}_skewness\t{v}_kl");
        }
        s.push('\n');
        for b in &self.bins {
            let _ = write!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                b.lo,
                b.hi,
                b.count,
                b.confident as u8,
                b.reference_mean,
                b.empirical.mean,
                b.empirical.std(),
                fmt_opt(b.empirical.skewness)
            );
            for i in 0..self.variants.len() {
                match b.predictions.get(i) {
                    Some(p) => {
                        let _ = write!(
                            s,
                            "\t{}\t{}\t{}\t{}",
                            p.signal,
                            p.moments.std(),
                            fmt_opt(p.moments.skewness),
                            p.kl
                        );
                    }
                    None => s.push_str("\tnan\tnan\tnan\tnan"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Bins pixels by reference value over `[min, p99.5]` and compares the
/// empirical noise `noisy - reference` with each model variant.
pub fn noise_report(
    noisy: &[Image2D],
    reference: &[Image2D],
    variants: &[ModelVariant<'_>],
    bins: usize,
) -> Result<BinnedNoiseReport> {
    check_pairs(noisy, reference)?;
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    let mut sorted: Vec<f64> = reference.iter().flat_map(|r| r.values()).map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let min = sorted[0];
    let cutoff = percentile_sorted(&sorted, REPORT_PERCENTILE);
    if !(cutoff > min) {
        return Err(Error::Data("reference signal has no spread below its 99.5th percentile".into()));
    }
    let width = (cutoff - min) / bins as f64;
    let bin_of = |x: f64| -> Option<usize> {
        (x <= cutoff).then(|| (((x - min) / width) as usize).min(bins - 1))
    };

    // denoised estimates per network variant, used for the evaluation point
    let denoised: Vec<Option<Vec<Image2D>>> = variants
        .iter()
        .map(|v| match &v.model {
            VariantModel::Bundle(b) => noisy
                .iter()
                .map(|n| predict(*b, n).map(|p| p.denoised))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            VariantModel::Fixed(_) => Ok(None),
        })
        .collect::<Result<_>>()?;

    let mut noise: Vec<Vec<f64>> = vec![Vec::new(); bins];
    let mut ref_sum = vec![0.0f64; bins];
    let mut den_sum = vec![vec![0.0f64; bins]; variants.len()];
    for (i, (n, r)) in noisy.iter().zip(reference).enumerate() {
        for (p, (&y, &x)) in n.values().iter().zip(r.values()).enumerate() {
            let Some(k) = bin_of(x as f64) else { continue };
            noise[k].push(y as f64 - x as f64);
            ref_sum[k] += x as f64;
            for (vi, d) in denoised.iter().enumerate() {
                if let Some(d) = d {
                    den_sum[vi][k] += d[i].values()[p] as f64;
                }
            }
        }
    }

    let mut out_bins = Vec::with_capacity(bins);
    for k in 0..bins {
        let count = noise[k].len();
        let lo = min + k as f64 * width;
        let hi = if k + 1 == bins { cutoff } else { lo + width };
        let reference_mean = if count > 0 { ref_sum[k] / count as f64 } else { f64::NAN };
        let mut predictions = Vec::new();
        if count > 0 {
            let (nlo, nhi) = noise[k]
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let hist = (nhi > nlo)
                .then(|| HistogramBin::from_values((lo, hi), &noise[k], nlo, nhi, NOISE_HIST_BINS))
                .transpose()?;
            for (vi, v) in variants.iter().enumerate() {
                let (signal, mixture) = match &v.model {
                    VariantModel::Bundle(b) => {
                        let s = den_sum[vi][k] / count as f64;
                        (s, noise_model_at(*b, &[s])?.remove(0))
                    }
                    VariantModel::Fixed(f) => (reference_mean, f(reference_mean)),
                };
                let kl = match &hist {
                    Some(h) => kl_bin(h, &mixture)?,
                    None => f64::NAN,
                };
                predictions.push(BinPrediction {
                    signal,
                    moments: mixture_moments(&mixture),
                    kl,
                });
            }
        }
        out_bins.push(NoiseBin {
            lo,
            hi,
            count,
            confident: count >= CONFIDENCE_FLOOR,
            reference_mean,
            empirical: sample_moments(&noise[k]),
            predictions,
        });
    }
    Ok(BinnedNoiseReport {
        min,
        cutoff,
        included: noise.iter().map(Vec::len).sum(),
        variants: variants.iter().map(|v| v.name.clone()).collect(),
        bins: out_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_noise, Dihedral, NoiseKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let step = |s: u64| s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut s = step(seed);
        (0..n)
            .map(|_| {
                s = step(s);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    fn img(h: usize, w: usize, v: Vec<f32>) -> Image2D {
        Image2D::new(h, w, v).unwrap()
    }

    #[test]
    fn psnr_hand_cases() {
        let gt = img(1, 4, vec![0.0, 100.0, 50.0, 50.0]);
        assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
        // every pixel off by 1: MSE 1, range 100
        let pred = img(1, 4, vec![1.0, 99.0, 51.0, 49.0]);
        assert!((psnr(&pred, &gt).unwrap() - 40.0).abs() < 1e-9);
        let shift = |i: &Image2D| i.map(|v| v + 1000.0).unwrap();
        assert!((psnr(&shift(&pred), &shift(&gt)).unwrap() - 40.0).abs() < 1e-9);
        let pred2 = img(1, 4, vec![2.0, 100.0, 50.0, 50.0]);
        // MSE = 4/4 = 1
        assert!((psnr(&pred2, &gt).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&gt, &img(2, 2, vec![0.0; 4])).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let v: Vec<f32> = lcg(9, 400).iter().map(|&u| (u * 500.0) as f32).collect();
        let a = img(20, 20, v);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = Image2D::filled(12, 12, 5.0);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Image2D::filled(10, 20, 1.0), &Image2D::filled(10, 20, 1.0)).is_err());
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // frozen values from skimage.metrics.structural_similarity with
        // gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        // data_range = gt range, on the same LCG-generated images
        let cases = [
            (11, 11, 1, 0.2, 0.980365368423568),
            (16, 16, 2, 0.05, 0.9987809306198125),
            (24, 31, 3, 0.5, 0.8829373921230161),
            (40, 20, 4, 1.0, 0.6254021760414344),
            (33, 47, 5, 0.1, 0.9949778732246305),
        ];
        for (h, w, seed, amp, expect) in cases {
            let u = lcg(seed, h * w);
            let v = lcg(seed + 100, h * w);
            let gt = img(h, w, u.iter().map(|&a| (1000.0 * a) as f32).collect());
            let pred = img(
                h,
                w,
                u.iter().zip(&v).map(|(&a, &b)| (1000.0 * a + 1000.0 * amp * (b - 0.5)) as f32).collect(),
            );
            let s = ssim(&pred, &gt).unwrap();
            assert!((s - expect).abs() < 1e-4, "{h}x{w}: {s} vs {expect}");
        }
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Image2D::from_fn(32, 32, |y, x| 100.0 + 50.0 * ((x as f32) / 4.0).sin() * ((y as f32) / 6.0).cos()).unwrap();
        let noisy = |amp: f32, rng: &mut ChaCha8Rng| {
            let v = gt.values().iter().map(|&g| g + amp * rng.random_range(-1.0f32..1.0)).collect();
            img(32, 32, v)
        };
        let mild = noisy(5.0, &mut rng);
        let heavy = noisy(80.0, &mut rng);
        assert!(ssim(&heavy, &gt).unwrap() < ssim(&mild, &gt).unwrap());
    }

    #[test]
    fn metrics_invariant_under_symmetries() {
        let u = lcg(7, 24 * 30);
        let v = lcg(8, 24 * 30);
        let gt = img(24, 30, u.iter().map(|&a| (a * 300.0) as f32).collect());
        let pred = img(24, 30, u.iter().zip(&v).map(|(&a, &b)| (a * 300.0 + b * 40.0) as f32).collect());
        let (p0, s0) = (psnr(&pred, &gt).unwrap(), ssim(&pred, &gt).unwrap());
        for g in Dihedral::ALL {
            assert!((psnr(&g.apply(&pred), &g.apply(&gt)).unwrap() - p0).abs() < 1e-9);
            assert!((ssim(&g.apply(&pred), &g.apply(&gt)).unwrap() - s0).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let c = Image2D::filled(9, 13, 7.0);
        let b = gaussian_blur(&c, 5.0).unwrap();
        assert!(b.values().iter().all(|&v| (v - 7.0).abs() < 1e-5));
        let taps = gaussian_taps(1.3, 5);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(mirror(-1, 4), 0);
        assert_eq!(mirror(4, 4), 3);
        assert_eq!(mirror(-9, 4), 0);
    }

    #[test]
    fn baseline_on_clean_pairs_picks_smallest_sigma() {
        let gt: Vec<Image2D> = (0..2)
            .map(|s| img(24, 24, lcg(s, 576).iter().map(|&u| (u * 100.0) as f32).collect()))
            .collect();
        let r = gaussian_baseline(&gt, &gt, &default_sigma_grid()).unwrap();
        assert_eq!(r.sigma, 0.3);
        assert_eq!(r, gaussian_baseline(&gt, &gt, &default_sigma_grid()).unwrap());
        assert!(gaussian_baseline(&[], &[], &[1.0]).is_err());
    }

    #[test]
    fn baseline_beats_noisy_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<Image2D> = (0..2)
            .map(|_| Image2D::from_fn(48, 48, |y, x| 200.0 + 100.0 * ((x as f32) / 7.0).sin() * ((y as f32) / 9.0).cos()).unwrap())
            .collect();
        let noisy: Vec<Image2D> = gt
            .iter()
            .map(|g| synth_noise(g, NoiseKind::Gaussian { sigma: 20.0 }, &mut rng, 0.0).unwrap())
            .collect();
        let r = gaussian_baseline(&noisy, &gt, &default_sigma_grid()).unwrap();
        assert!(r.psnr > mean_psnr(&noisy, &gt).unwrap());
        assert!(r.sigma > 0.3);
    }

    #[test]
    fn moments_of_known_samples() {
        let m = sample_moments(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert_eq!(m.variance, 1.25);
        assert_eq!(m.skewness, Some(0.0));
        assert_eq!(sample_moments(&[2.0, 2.0]).skewness, None);
    }

    fn gaussian_set(n: usize, sigma: f64, seed: u64) -> (Vec<Image2D>, Vec<Image2D>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<Image2D> = (0..n)
            .map(|_| {
                let v = (0..64 * 64).map(|_| rng.random_range(100.0f32..1100.0)).collect();
                img(64, 64, v)
            })
            .collect();
        let noisy = gt
            .iter()
            .map(|g| synth_noise(g, NoiseKind::Gaussian { sigma }, &mut rng, 0.0).unwrap())
            .collect();
        (noisy, gt)
    }

    #[test]
    fn report_recovers_gaussian_std() {
        let (noisy, gt) = gaussian_set(64, 20.0, 5);
        let variants = [
            ModelVariant::fixed("true", |_| Mixture::gaussian(20.0)),
            ModelVariant::fixed("wide", |_| Mixture::gaussian(30.0)),
        ];
        let r = noise_report(&noisy, &gt, &variants, 64).unwrap();
        assert_eq!(r.bins.len(), 64);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), r.included);
        let mut confident = 0;
        for b in r.confident_bins() {
            confident += 1;
            let se = 20.0 / (2.0 * (b.count as f64 - 1.0)).sqrt();
            assert!((b.empirical.std() - 20.0).abs() < 4.0 * se, "{} vs 20", b.empirical.std());
            let skew_se = (6.0 / b.count as f64).sqrt();
            assert!(b.empirical.skewness.unwrap().abs() < 4.0 * skew_se);
            assert!(b.predictions.iter().all(|p| p.kl >= 0.0));
        }
        assert!(confident > 50);
        let (t, w) = (r.variant_index("true").unwrap(), r.variant_index("wide").unwrap());
        assert!(r.median_kl(t).unwrap() < r.median_kl(w).unwrap());
        let tsv = r.to_tsv();
        let header = tsv.lines().next().unwrap();
        assert!(header.contains("true_kl") && header.contains("wide_std"));
        assert_eq!(tsv.lines().count(), 65);
        assert!(tsv.lines().all(|l| l.split('\t').count() == 16));
    }

    #[test]
    fn report_tracks_poisson_gaussian_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt: Vec<Image2D> = (0..64)
            .map(|_| img(64, 64, (0..4096).map(|_| rng.random_range(100.0f32..1100.0)).collect()))
            .collect();
        let kind = NoiseKind::PoissonGaussian { alpha: 5.0, eta: 12.0 };
        let xmin = crate::data::synth::dataset_min(&gt);
        let noisy: Vec<Image2D> = gt.iter().map(|g| synth_noise(g, kind, &mut rng, xmin).unwrap()).collect();
        let r = noise_report(&noisy, &gt, &[], 64).unwrap();
        for b in r.confident_bins() {
            let expect = kind.std_at(b.reference_mean, xmin);
            let se = expect / (2.0 * (b.count as f64 - 1.0)).sqrt();
            // within-bin spread of the true std adds a little on top of sampling error
            assert!((b.empirical.std() - expect).abs() < 4.0 * se + 0.01 * expect, "{} vs {expect}", b.empirical.std());
        }
    }

    #[test]
    fn report_ignores_pixel_order() {
        let (noisy, gt) = gaussian_set(2, 10.0, 7);
        let a = noise_report(&noisy, &gt, &[], 16).unwrap();
        let g = Dihedral::ALL[5];
        let nt: Vec<Image2D> = noisy.iter().map(|i| g.apply(i)).collect();
        let gtt: Vec<Image2D> = gt.iter().map(|i| g.apply(i)).collect();
        let b = noise_report(&nt, &gtt, &[], 16).unwrap();
        for (x, y) in a.bins.iter().zip(&b.bins) {
            assert_eq!(x.count, y.count);
            assert!((x.empirical.variance - y.empirical.variance).abs() < 1e-9 * x.empirical.variance.max(1.0));
        }
    }

    #[test]
    fn report_flags_sparse_bins() {
        let gt = img(10, 10, (0..100).map(|i| i as f32).collect());
        let noisy = gt.map(|v| v + 1.0).unwrap();
        let r = noise_report(&[noisy], &[gt], &[], 4).unwrap();
        assert!(r.bins.iter().all(|b| !b.confident));
        assert_eq!(r.confident_bins().count(), 0);
    }
}
