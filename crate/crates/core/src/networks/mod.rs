//! The denoiser (D-net), the noise network (N-net) and their checkpointable
//! bundle.

pub mod checkpoint;
pub mod dnet;
pub mod graph;
pub mod nnet;

use rand::Rng;

pub use dnet::{DNet, DNetConfig};
pub use nnet::{NNet, NNetConfig, NoiseParams};

use crate::data::NormalizationRecord;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform He initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform(rng: &mut impl Rng, fan_in: usize) -> f64 {
    let bound = (6.0 / fan_in as f64).sqrt();
    rng.random_range(-bound..bound)
}

/// Where a bundle came from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
    /// Trained with the full dihedral augmentation group.
    pub allow_transpose: bool,
}

/// Both networks plus everything needed to run them on raw images.
#[derive(Clone, Debug)]
pub struct NetworkBundle<T> {
    pub dnet: DNet<T>,
    pub nnet: NNet<T>,
    pub normalization: Option<NormalizationRecord>,
    pub provenance: Provenance,
}

impl<T: Scalar> NetworkBundle<T> {
    pub fn build(dnet: DNetConfig, nnet: NNetConfig, seed: u64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            dnet: DNet::build(dnet, rng)?,
            nnet: NNet::build(nnet, rng)?,
            normalization: None,
            provenance: Provenance {
                seed,
                epochs: 0,
                allow_transpose: true,
            },
        })
    }

    /// Measured receptive-field window `2R + 1` of the D-net.
    pub fn receptive_field(&self) -> usize {
        2 * self.dnet.config.receptive_radius() + 1
    }

    pub fn normalization(&self) -> Result<NormalizationRecord> {
        self.normalization
            .ok_or_else(|| Error::Config("bundle has no normalization record".into()))
    }

    pub fn cast<U: Scalar>(&self) -> NetworkBundle<U> {
        NetworkBundle {
            dnet: self.dnet.cast(),
            nnet: self.nnet.cast(),
            normalization: self.normalization,
            provenance: self.provenance.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_biases<T: Scalar>(params: &mut crate::params::ParamSet<T>, rng: &mut impl Rng) {
        for p in params.iter_mut() {
            if p.name.ends_with(".b") {
                for v in p.value.data_mut() {
                    *v = T::c(rng.random_range(0.05..0.2));
                }
            }
        }
    }

    #[test]
    fn dnet_preserves_shape_and_is_finite_on_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DNet::<f32>::build(DNetConfig::with_filters(8), &mut rng).unwrap();
        for (h, w) in [(8, 8), (96, 96), (12, 20)] {
            let y = d.forward(&Tensor4::zeros([1, 1, h, w])).unwrap();
            assert_eq!(y.shape(), [1, 1, h, w]);
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
        assert!(matches!(d.forward(&Tensor4::zeros([1, 1, 10, 8])), Err(Error::Shape(_))));
        assert!(d.forward(&Tensor4::zeros([1, 2, 8, 8])).is_err());
    }

    #[test]
    fn default_receptive_field_is_35() {
        assert_eq!(DNetConfig::default().receptive_radius(), 17);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = NetworkBundle::<f32>::build(DNetConfig::default(), NNetConfig::default(), 0, &mut rng).unwrap();
        assert_eq!(b.receptive_field(), 35);
    }

    #[test]
    fn perturbation_probe_matches_analytic_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = DNet::<f64>::build(DNetConfig::with_filters(4), &mut rng).unwrap();
        random_biases(&mut d.params, &mut rng);
        let r = d.config.receptive_radius() as isize;
        let n = 96usize;
        let base: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let x0 = Tensor4::from_plane(n, n, &base).unwrap();
        let y0 = d.forward(&x0).unwrap();
        // widest influence over the four pooling-grid phases
        let mut reach = vec![false; 2 * r as usize + 4];
        for phase in 0..4isize {
            let (cy, cx) = (48 + phase, 48 + phase);
            let at = |t: &Tensor4<f64>| t.data()[cy as usize * n + cx as usize];
            for dist in 0..reach.len() as isize {
                // perturb the whole ring at Chebyshev distance `dist`
                let mut x = base.clone();
                for yy in (cy - dist)..=(cy + dist) {
                    for xx in (cx - dist)..=(cx + dist) {
                        if (yy - cy).abs().max((xx - cx).abs()) == dist {
                            x[yy as usize * n + xx as usize] += 5.0;
                        }
                    }
                }
                let y = d.forward(&Tensor4::from_plane(n, n, &x).unwrap()).unwrap();
                reach[dist as usize] |= at(&y) != at(&y0);
            }
        }
        assert!(reach[..=r as usize].iter().all(|&b| b), "{reach:?}");
        assert!(reach[r as usize + 1..].iter().all(|&b| !b), "{reach:?}");
    }

    #[test]
    fn nnet_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::from_vec([1, 1, 3, 4], (0..12).map(|i| i as f32 * 0.3 - 1.5).collect()).unwrap();

        let n1 = NNet::<f32>::build(NNetConfig::with_components(1), &mut rng).unwrap();
        let p = n1.forward(&x).unwrap();
        assert_eq!((p.components, p.pixels), (1, 12));
        assert!(p.stds.iter().all(|&s| s > 0.0));
        assert!(p.means.iter().all(|&m| m == 0.0));

        let n2 = NNet::<f32>::build_with_head_scale(NNetConfig::with_components(2), &mut rng, 3.0).unwrap();
        let p = n2.forward(&x).unwrap();
        for px in 0..12 {
            let a = p.weight(0, px);
            assert!(a > 0.0 && a < 1.0);
            assert!((a + p.weight(1, px) - 1.0).abs() < 1e-6);
        }

        let zero = NNet::<f64>::build_with_head_scale(NNetConfig::with_components(3), &mut rng, 0.0).unwrap();
        let p = zero.forward(&x.cast()).unwrap();
        assert!(p.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));

        let n3 = NNet::<f64>::build_with_head_scale(NNetConfig::with_components(3), &mut rng, 2.0).unwrap();
        let p = n3.forward(&x.cast()).unwrap();
        for px in 0..12 {
            let s: f64 = (0..3).map(|k| p.weight(k, px)).sum();
            assert!((s - 1.0).abs() < 1e-6);
            let c: f64 = (0..3).map(|k| p.weight(k, px) * p.mean(k, px)).sum();
            assert!(c.abs() < 1e-9);
        }
    }

    #[test]
    fn nnet_is_a_per_pixel_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = NNet::<f32>::build_with_head_scale(NNetConfig::with_components(3), &mut rng, 1.0).unwrap();
        let vals = [0.5f32, -1.0, 0.5, 2.0, 0.1, -1.0];
        let p = n.forward(&Tensor4::from_vec([1, 1, 1, 6], vals.to_vec()).unwrap()).unwrap();
        assert_eq!(p.mixture(0), p.mixture(2));
        assert_eq!(p.mixture(1), p.mixture(5));
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pv: Vec<f32> = perm.iter().map(|&i| vals[i]).collect();
        let q = n.forward(&Tensor4::from_vec([1, 1, 2, 3], pv).unwrap()).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(q.mixture(j), p.mixture(i));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(NNetConfig::with_components(4).validate().is_err());
        assert!(NNetConfig::with_components(0).validate().is_err());
        assert!(DNetConfig { levels: 0, ..DNetConfig::default() }.validate().is_err());
    }

    #[test]
    fn bundle_cast_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = NetworkBundle::<f32>::build(DNetConfig::with_filters(4), NNetConfig::with_components(2), 5, &mut rng).unwrap();
        let back: NetworkBundle<f32> = b.cast::<f64>().cast();
        assert_eq!(back.dnet.params.flat_values(), b.dnet.params.flat_values());
        assert_eq!(back.nnet.params.flat_values(), b.nnet.params.flat_values());
    }
}
