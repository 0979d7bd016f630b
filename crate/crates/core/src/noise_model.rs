//! Centered Gaussian-mixture noise distributions.
//!
//! The noise at a pixel is `eps ~ sum_i a_i N(m_i, s_i^2)` with
//! `sum_i a_i m_i = 0`. All negative log-likelihoods drop the `log(2 pi)`
//! constant so that a single component reduces exactly to
//! `log(s^2) + ((y - mu) / s)^2`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use libm::erfc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest supported mixture size.
pub const MAX_COMPONENTS: usize = 3;

/// Floor applied to the last weight when solving for the centered mean.
pub const MIN_LAST_WEIGHT: f64 = 1e-12;

/// Floor applied to per-bin model probabilities in [`kl_bin`].
pub const KL_MASS_FLOOR: f64 = 1e-12;

/// Mean of the last component that makes the mixture mean zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenteredMean<T> {
    pub value: T,
    /// The last weight fell below [`MIN_LAST_WEIGHT`] and was clamped.
    pub clamped: bool,
}

/// `mu_N = -(1 / a_N) * sum_{i<N} a_i mu_i`.
///
/// `free_means` holds the first `N-1` means (empty for a single component,
/// which yields zero).
pub fn center_mixture<T: Scalar>(weights: &[T], free_means: &[T]) -> CenteredMean<T> {
    assert_eq!(weights.len(), free_means.len() + 1, "need N weights and N-1 means");
    let n = weights.len();
    let last = weights[n - 1];
    let floor = T::c(MIN_LAST_WEIGHT);
    let clamped = !(last >= floor);
    let denom = if clamped { floor } else { last };
    let mut s = T::zero();
    for (&a, &m) in weights.iter().zip(free_means) {
        s += a * m;
    }
    CenteredMean {
        value: -s / denom,
        clamped,
    }
}

/// `log(s^2) + ((y - mu) / s)^2`.
pub fn gaussian_nll<T: Scalar>(y: T, mu: T, sigma: T) -> T {
    let r = (y - mu) / sigma;
    T::c(2.0) * sigma.ln() + r * r
}

/// Per-component log terms `log a_i - log s_i - r_i^2 / (2 s_i^2)`.
fn component_logs<T: Scalar>(residual: T, weights: &[T], means: &[T], stds: &[T], out: &mut [T]) {
    let half = T::c(0.5);
    for i in 0..weights.len() {
        let r = (residual - means[i]) / stds[i];
        out[i] = weights[i].ln() - stds[i].ln() - half * r * r;
    }
}

fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + v.iter().map(|&a| (a - m).exp()).sum::<T>().ln()
}

/// `-2 log sum_i a_i phi(y; mu + m_i, s_i) - log(2 pi)`, evaluated with
/// log-sum-exp. `means` are the full (centered) component means.
pub fn gmm_nll<T: Scalar>(y: T, mu: T, weights: &[T], means: &[T], stds: &[T]) -> T {
    let n = weights.len();
    assert!((1..=MAX_COMPONENTS).contains(&n) && means.len() == n && stds.len() == n);
    let mut logs = [T::zero(); MAX_COMPONENTS];
    component_logs(y - mu, weights, means, stds, &mut logs[..n]);
    T::c(-2.0) * log_sum_exp(&logs[..n])
}

/// Loss and gradient of [`gmm_nll`] with the last mean given by
/// [`center_mixture`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllGrad<T> {
    pub loss: T,
    pub d_mu: T,
    pub d_weights: [T; MAX_COMPONENTS],
    pub d_free_means: [T; MAX_COMPONENTS],
    pub d_stds: [T; MAX_COMPONENTS],
    pub clamped: bool,
}

/// Evaluates the centered mixture NLL and its gradient with respect to the
/// predicted mean `mu`, every weight (treated as independent inputs), the
/// free means and the standard deviations.
pub fn gmm_nll_grad<T: Scalar>(y: T, mu: T, weights: &[T], free_means: &[T], stds: &[T]) -> NllGrad<T> {
    let n = weights.len();
    assert!((1..=MAX_COMPONENTS).contains(&n) && stds.len() == n && free_means.len() + 1 == n);
    let centered = center_mixture(weights, free_means);
    let mut means = [T::zero(); MAX_COMPONENTS];
    means[..n - 1].copy_from_slice(free_means);
    means[n - 1] = centered.value;

    let residual = y - mu;
    let mut logs = [T::zero(); MAX_COMPONENTS];
    component_logs(residual, weights, &means[..n], stds, &mut logs[..n]);
    let lse = log_sum_exp(&logs[..n]);
    let loss = T::c(-2.0) * lse;

    let mut out = NllGrad {
        loss,
        d_mu: T::zero(),
        d_weights: [T::zero(); MAX_COMPONENTS],
        d_free_means: [T::zero(); MAX_COMPONENTS],
        d_stds: [T::zero(); MAX_COMPONENTS],
        clamped: centered.clamped,
    };
    // dL/dlog_i = -2 * responsibility_i
    let mut d_means = [T::zero(); MAX_COMPONENTS];
    for i in 0..n {
        let resp = (logs[i] - lse).exp();
        let dl = T::c(-2.0) * resp;
        let s = stds[i];
        let r = residual - means[i];
        let r_s2 = r / (s * s);
        out.d_mu += dl * r_s2;
        d_means[i] = dl * r_s2;
        out.d_weights[i] = dl / weights[i];
        out.d_stds[i] = dl * (r * r_s2 / s - T::one() / s);
    }
    // chain through mu_N = -(sum_{i<N} a_i m_i) / a_N
    let last_w = if centered.clamped {
        T::c(MIN_LAST_WEIGHT)
    } else {
        weights[n - 1]
    };
    let g_last = d_means[n - 1];
    for i in 0..n - 1 {
        out.d_free_means[i] = d_means[i] - g_last * weights[i] / last_w;
        out.d_weights[i] -= g_last * free_means[i] / last_w;
    }
    if n > 1 && !centered.clamped {
        out.d_weights[n - 1] -= g_last * centered.value / last_w;
    }
    out
}

/// One pixel's mixture in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Mixture {
    pub fn gaussian(std: f64) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![0.0],
            stds: vec![std],
        }
    }

    /// Builds a centered mixture from weights, the first `N-1` means and stds.
    pub fn centered(weights: &[f64], free_means: &[f64], stds: &[f64]) -> Self {
        let mut means = free_means.to_vec();
        means.push(center_mixture(weights, free_means).value);
        Self {
            weights: weights.to_vec(),
            means,
            stds: stds.to_vec(),
        }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Affine change of units: noise `eps` becomes `scale * eps`.
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m * scale).collect(),
            stds: self.stds.iter().map(|s| s * scale.abs()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if n == 0 || self.means.len() != n || self.stds.len() != n {
            return Err(Error::Numerical("mixture arrays have inconsistent lengths".into()));
        }
        if self.stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Numerical("mixture std must be positive".into()));
        }
        let wsum: f64 = self.weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-6 || self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Numerical(format!("mixture weights sum to {wsum}")));
        }
        Ok(())
    }

    /// Mass of the mixture on `[lo, hi)`.
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&a, &m), &s)| a * normal_mass((lo - m) / s, (hi - m) / s))
            .sum()
    }
}

/// `Phi(b) - Phi(a)` for a standard normal, accurate in both tails.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let m = if a >= 0.0 {
        0.5 * (erfc(a * r) - erfc(b * r))
    } else if b <= 0.0 {
        0.5 * (erfc(-b * r) - erfc(-a * r))
    } else {
        1.0 - 0.5 * erfc(-a * r) - 0.5 * erfc(b * r)
    };
    m.max(0.0)
}

/// Mean, variance and Pearson skewness of a mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    /// `None` when the variance is below `1e-18`.
    pub skewness: Option<f64>,
}

impl Moments {
    pub fn std(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

pub fn mixture_moments(m: &Mixture) -> Moments {
    let mean: f64 = m.weights.iter().zip(&m.means).map(|(a, mu)| a * mu).sum();
    let mut var = 0.0;
    let mut third = 0.0;
    for i in 0..m.components() {
        let d = m.means[i] - mean;
        let s2 = m.stds[i] * m.stds[i];
        var += m.weights[i] * (s2 + d * d);
        third += m.weights[i] * (d * d * d + 3.0 * d * s2);
    }
    let skewness = if var < 1e-18 { None } else { Some(third / var.powf(1.5)) };
    Moments {
        mean,
        variance: var,
        skewness,
    }
}

/// Draws a component by weight, then a Gaussian value from it.
pub fn sample_noise(m: &Mixture, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = m.components() - 1;
    for (i, &w) in m.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    let z: f64 = StandardNormal.sample(rng);
    m.means[k] + m.stds[k] * z
}

/// Histogram of noise values for the pixels whose signal falls in one bin.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub signal_lo: f64,
    pub signal_hi: f64,
    /// Strictly increasing, `counts.len() + 1` entries.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl HistogramBin {
    /// Histogram of `values` on `bins` equal-width bins over `[lo, hi]`;
    /// values outside the range are dropped.
    pub fn from_values(signal: (f64, f64), values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || bins == 0 {
            return Err(Error::Data(format!("invalid histogram range [{lo}, {hi}] with {bins} bins")));
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            if v >= lo && v <= hi {
                let k = (((v - lo) / width) as usize).min(bins - 1);
                counts[k] += 1;
            }
        }
        Ok(Self {
            signal_lo: signal.0,
            signal_hi: signal.1,
            edges,
            counts,
        })
    }

    pub fn sample_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.len() != self.counts.len() + 1 || self.edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("histogram edges must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Discrete KL divergence `sum_k p_k log(p_k / q_k)` between the normalized
/// histogram and the mixture mass integrated over each histogram bin.
pub fn kl_bin(hist: &HistogramBin, model: &Mixture) -> Result<f64> {
    hist.validate()?;
    let total = hist.sample_count();
    if total == 0 {
        return Err(Error::Data("histogram is empty".into()));
    }
    let mut kl = 0.0;
    for (k, &c) in hist.counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let p = c as f64 / total as f64;
        let q = model.mass(hist.edges[k], hist.edges[k + 1]).max(KL_MASS_FLOOR);
        kl += p * (p / q).ln();
    }
    // Gibbs: the true value is >= 0; clamp rounding noise below zero
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centering_examples() {
        assert_eq!(center_mixture(&[0.5, 0.5], &[1.0]).value, -1.0);
        let m3 = center_mixture(&[0.2f64, 0.3, 0.5], &[1.0, -2.0]).value;
        assert!((m3 - 0.8).abs() < 1e-15);
        assert_eq!(center_mixture::<f64>(&[1.0], &[]).value, 0.0);
        let c = center_mixture(&[1.0f64, 0.0], &[0.5]);
        assert!(c.clamped && c.value.is_finite());
    }

    #[test]
    fn gaussian_nll_examples() {
        assert_eq!(gaussian_nll(1.0, 1.0, 1.0), 0.0);
        assert_eq!(gaussian_nll(2.0, 1.0, 1.0), 1.0);
        let v = gaussian_nll(0.0f64, 1.0, 0.5);
        assert!((v - (0.25f64.ln() + 4.0)).abs() < 1e-12);
        assert!((v - 2.6137).abs() < 1e-4);
    }

    #[test]
    fn gaussian_nll_minimum_at_abs_residual() {
        let r: f64 = 0.7;
        let mut prev = f64::INFINITY;
        let mut s = 0.05;
        while s < r {
            let v = gaussian_nll(r, 0.0, s);
            assert!(v < prev);
            prev = v;
            s += 0.01;
        }
        let mut prev = gaussian_nll(r, 0.0, r);
        let mut s = r + 0.01;
        while s < 3.0 {
            let v = gaussian_nll(r, 0.0, s);
            assert!(v > prev);
            prev = v;
            s += 0.01;
        }
    }

    #[test]
    fn single_component_reduces_to_gaussian() {
        for &(y, mu, s) in &[(1.0f64, 0.3, 0.2), (-4.0, 2.0, 1.5), (0.0, 0.0, 3.0)] {
            let a = gmm_nll(y, mu, &[1.0], &[0.0], &[s]);
            assert!((a - gaussian_nll(y, mu, s)).abs() < 1e-12);
            let g = gmm_nll_grad(y, mu, &[1.0], &[], &[s]);
            assert!((g.loss - a).abs() < 1e-12);
        }
    }

    fn phi(x: f64, m: f64, s: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn two_component_matches_direct_density() {
        let mu = 0.4;
        let direct = -2.0 * (0.5 * phi(mu, mu + 1.0, 1.0) + 0.5 * phi(mu, mu - 1.0, 1.0)).ln()
            - (2.0 * std::f64::consts::PI).ln();
        let v = gmm_nll(mu, mu, &[0.5, 0.5], &[1.0, -1.0], &[1.0, 1.0]);
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn nll_is_translation_invariant_and_never_infinite() {
        let w = [0.2f64, 0.3, 0.5];
        let m = [1.0, -2.0, 0.8];
        let s = [0.5, 1.0, 2.0];
        let a = gmm_nll(1.3, 0.2, &w, &m, &s);
        let b = gmm_nll(101.3, 100.2, &w, &m, &s);
        assert!((a - b).abs() < 1e-9);
        // every density underflows in f64 here
        let far = gmm_nll(1e6, 0.0, &w, &m, &[1e-3, 1e-3, 1e-3]);
        assert!(far.is_finite() && far > 1e10);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        // x = [y, mu, logits.., free means.., stds..]; weights via softmax
        for n in 1..=3usize {
            let f = |x: &[f64]| -> f64 {
                let (mu, lg) = (x[1], &x[2..2 + n]);
                let mx = lg.iter().copied().fold(f64::MIN, f64::max);
                let e: Vec<f64> = lg.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let w: Vec<f64> = e.iter().map(|v| v / z).collect();
                let fm = &x[2 + n..2 + n + n - 1];
                let st = &x[2 + n + n - 1..];
                gmm_nll_grad(x[0], mu, &w, fm, st).loss
            };
            let mut x = vec![0.7, 0.1];
            x.extend([0.3, -0.4, 0.2].iter().take(n));
            x.extend([0.5, -0.3].iter().take(n - 1));
            x.extend([0.8, 1.3, 0.6].iter().take(n));
            let lg = &x[2..2 + n];
            let mx = lg.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = lg.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|v| v / z).collect();
            let g = gmm_nll_grad(x[0], x[1], &w, &x[2 + n..2 * n + 1], &x[2 * n + 1..]);
            let mut analytic = vec![-g.d_mu, g.d_mu];
            // softmax backward for weights -> logits
            let dot: f64 = (0..n).map(|i| g.d_weights[i] * w[i]).sum();
            analytic.extend((0..n).map(|i| w[i] * (g.d_weights[i] - dot)));
            analytic.extend(&g.d_free_means[..n - 1]);
            analytic.extend(&g.d_stds[..n]);
            let coords: Vec<usize> = (0..x.len()).collect();
            let err = grad_check(f, &x, &analytic, 1e-6, &coords);
            assert!(err < 1e-4, "n={n} err={err}");
        }
    }

    #[test]
    fn moments_closed_form() {
        let g = mixture_moments(&Mixture::gaussian(2.0));
        assert_eq!(g.mean, 0.0);
        assert_eq!(g.variance, 4.0);
        assert_eq!(g.skewness, Some(0.0));
        let m = Mixture::centered(&[0.2, 0.3, 0.5], &[1.0, -2.0], &[0.5, 1.0, 2.0]);
        assert!(mixture_moments(&m).mean.abs() < 1e-12);
        let deg = Mixture::gaussian(1e-10);
        assert_eq!(mixture_moments(&deg).skewness, None);
    }

    /// Monte-Carlo oracle for the moments of a skewed two-component mixture.
    #[test]
    fn moments_match_monte_carlo() {
        let m = Mixture::centered(&[0.9, 0.1], &[-0.3], &[0.5, 1.5]);
        let mm = mixture_moments(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batches = 100;
        let per = 100_000;
        let mut skews = Vec::with_capacity(batches);
        let mut vars = Vec::with_capacity(batches);
        let mut means = Vec::with_capacity(batches);
        for _ in 0..batches {
            let xs: Vec<f64> = (0..per).map(|_| sample_noise(&m, &mut rng)).collect();
            let mean = xs.iter().sum::<f64>() / per as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / per as f64;
            let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / per as f64;
            means.push(mean);
            vars.push(var);
            skews.push(m3 / var.powf(1.5));
        }
        let stats = |v: &[f64]| {
            let k = v.len() as f64;
            let mu = v.iter().sum::<f64>() / k;
            let sd = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
            (mu, sd / k.sqrt())
        };
        let (mean, se) = stats(&means);
        assert!((mean - mm.mean).abs() < 3.0 * se, "mean {mean} vs {} (se {se})", mm.mean);
        let (var, se) = stats(&vars);
        assert!((var - mm.variance).abs() < 3.0 * se, "var {var} vs {}", mm.variance);
        let (sk, se) = stats(&skews);
        let want = mm.skewness.unwrap();
        assert!(want > 0.5, "mixture should be clearly skewed: {want}");
        assert!((sk - want).abs() < 3.0 * se, "skew {sk} vs {want} (se {se})");
    }

    #[test]
    fn samples_are_centered_with_unit_variance() {
        let m = Mixture::gaussian(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_noise(&m, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / 1e3);
        assert!((var - 1.0).abs() < 4.0 * (2.0f64 / n as f64).sqrt());
    }

    #[test]
    fn kl_of_self_samples_is_small() {
        let m = Mixture::centered(&[0.7, 0.3], &[-0.4], &[0.6, 1.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..1_000_000).map(|_| sample_noise(&m, &mut rng)).collect();
        let h = HistogramBin::from_values((0.0, 1.0), &xs, -5.0, 5.0, 64).unwrap();
        let kl = kl_bin(&h, &m).unwrap();
        assert!((0.0..0.01).contains(&kl), "{kl}");
    }

    #[test]
    fn kl_point_mass_is_negative_log_mass() {
        let h = HistogramBin {
            signal_lo: 0.0,
            signal_hi: 1.0,
            edges: vec![-1.0, 0.0, 0.5, 1.0],
            counts: vec![0, 42, 0],
        };
        let wide = Mixture::gaussian(10.0);
        let q = normal_mass(0.0, 0.05);
        let kl = kl_bin(&h, &wide).unwrap();
        assert!((kl + q.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_prefers_true_sigma_over_misspecified() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = Mixture::gaussian(1.0);
        let xs: Vec<f64> = (0..200_000).map(|_| sample_noise(&truth, &mut rng)).collect();
        let h = HistogramBin::from_values((0.0, 1.0), &xs, -5.0, 5.0, 64).unwrap();
        let good = kl_bin(&h, &truth).unwrap();
        for s in [0.5, 0.8, 1.3, 2.0] {
            assert!(good < kl_bin(&h, &Mixture::gaussian(s)).unwrap());
        }
    }

    #[test]
    fn normal_mass_tails() {
        assert!((normal_mass(f64::NEG_INFINITY, f64::INFINITY) - 1.0).abs() < 1e-15);
        assert!((normal_mass(-1.0, 1.0) - 0.682_689_492_137_085_9).abs() < 1e-14);
        assert!(normal_mass(30.0, 31.0) > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn centering_zeroes_mixture_mean(
                logits in proptest::collection::vec(-4.0f64..4.0, 2..=3),
                free in proptest::collection::vec(-3.0f64..3.0, 2),
            ) {
                let n = logits.len();
                let mx = logits.iter().copied().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let w: Vec<f64> = e.iter().map(|v| v / z).collect();
                let m = Mixture::centered(&w, &free[..n - 1], &vec![1.0; n]);
                let mean: f64 = m.weights.iter().zip(&m.means).map(|(a, b)| a * b).sum();
                prop_assert!(mean.abs() < 1e-6);
            }

            #[test]
            fn kl_is_nonnegative(
                counts in proptest::collection::vec(0u64..50, 8),
                s in 0.1f64..5.0,
            ) {
                prop_assume!(counts.iter().sum::<u64>() > 0);
                let edges: Vec<f64> = (0..=8).map(|k| -2.0 + 0.5 * k as f64).collect();
                let h = HistogramBin { signal_lo: 0.0, signal_hi: 1.0, edges, counts };
                prop_assert!(kl_bin(&h, &Mixture::gaussian(s)).unwrap() >= 0.0);
            }
        }
    }
}
