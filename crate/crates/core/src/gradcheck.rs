//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::Rng;

/// Largest relative error between an analytic gradient and central
/// differences of `f`, over the coordinates in `coords`.
///
/// The error at coordinate `i` is `|g_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], epsilon: f64, coords: &[usize]) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let x0 = probe[i];
        probe[i] = x0 + epsilon;
        let fp = f(&probe);
        probe[i] = x0 - epsilon;
        let fm = f(&probe);
        probe[i] = x0;
        let fd = (fp - fm) / (2.0 * epsilon);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// `count` distinct coordinates out of `n` (all of them when `n <= count`).
pub fn sample_coords(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= count {
        return (0..n).collect();
    }
    let mut v = sample(rng, n, count).into_vec();
    v.sort_unstable();
    v
}
