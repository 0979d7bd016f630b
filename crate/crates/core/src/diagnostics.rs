//! Numerical self-checks shared by the `selftest` command and the test
//! suites: finite-difference gradient checks, masking density and mixture
//! centering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Image2D;
use crate::error::Result;
use crate::gradcheck::{grad_check, sample_coords};
use crate::masking::{sample_grid, ReplacementMode};
use crate::networks::{DNetConfig, NNet, NNetConfig, NetworkBundle};
use crate::noise_model::{center_mixture, gmm_nll_grad, MAX_COMPONENTS};
use crate::ops::{self, Activation, Padding};
use crate::tensor::Tensor4;
use crate::trainer::{masked_loss, masked_loss_grad, MaskedTile, TrainConfig};

const FD_EPS: f64 = 1e-6;

fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor4<f64> {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_flat(shape: [usize; 4], v: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(shape, v.to_vec()).expect("shape")
}

fn check_all(f: impl Fn(&[f64]) -> f64, x: &[f64], g: &[f64]) -> f64 {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check(f, x, g, FD_EPS, &coords)
}

/// Conv check: returns the worst relative error over input, weight and bias.
fn conv_error(k: usize, pad: Padding, rng: &mut impl Rng) -> Result<f64> {
    let xs = [2, 2, 5, 6];
    let ws = [3, 2, k, k];
    let x = random_tensor(xs, rng);
    let w = random_tensor(ws, rng);
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = ops::conv2d(&x, &w, &b, pad)?;
    let probe = random_tensor(y.shape(), rng);
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; 3];
    let mut gx = Tensor4::zeros(xs);
    ops::conv2d_backward(&x, &w, &probe, pad, &mut gw, &mut gb, Some(&mut gx))?;
    let ex = check_all(
        |v| dot(&ops::conv2d(&with_flat(xs, v), &w, &b, pad).expect("conv"), &probe),
        x.data(),
        gx.data(),
    );
    let ew = check_all(
        |v| dot(&ops::conv2d(&x, &with_flat(ws, v), &b, pad).expect("conv"), &probe),
        w.data(),
        &gw,
    );
    let eb = check_all(|v| dot(&ops::conv2d(&x, &w, v, pad).expect("conv"), &probe), &b, &gb);
    Ok(ex.max(ew).max(eb))
}

/// Relative finite-difference errors of every primitive, by name.
pub fn primitive_grad_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.push(("conv3x3".into(), conv_error(3, Padding::same(3), &mut rng)?));
    out.push(("conv2x2".into(), conv_error(2, Padding::same(2), &mut rng)?));
    out.push(("conv1x1".into(), conv_error(1, Padding::same(1), &mut rng)?));

    let xs = [1, 2, 4, 6];
    let x = random_tensor(xs, &mut rng);
    let (y, arg) = ops::pool2(&x)?;
    let probe = random_tensor(y.shape(), &mut rng);
    let mut gx = Tensor4::zeros(xs);
    ops::pool2_backward(&probe, &arg, &mut gx);
    let e = check_all(|v| dot(&ops::pool2(&with_flat(xs, v)).expect("pool").0, &probe), x.data(), gx.data());
    out.push(("maxpool2".into(), e));

    let y = ops::upsample_nearest(&x, 2)?;
    let probe = random_tensor(y.shape(), &mut rng);
    let mut gx = Tensor4::zeros(xs);
    ops::upsample_nearest_backward(&probe, &mut gx);
    let e = check_all(
        |v| dot(&ops::upsample_nearest(&with_flat(xs, v), 2).expect("upsample"), &probe),
        x.data(),
        gx.data(),
    );
    out.push(("upsample2".into(), e));

    let bs = [1, 3, 4, 6];
    let b = random_tensor(bs, &mut rng);
    let y = ops::concat_channels(&x, &b)?;
    let probe = random_tensor(y.shape(), &mut rng);
    let (mut ga, mut gb) = (Tensor4::zeros(xs), Tensor4::zeros(bs));
    ops::concat_channels_backward(&probe, &mut ga, &mut gb);
    let ea = check_all(
        |v| dot(&ops::concat_channels(&with_flat(xs, v), &b).expect("concat"), &probe),
        x.data(),
        ga.data(),
    );
    let eb = check_all(
        |v| dot(&ops::concat_channels(&x, &with_flat(bs, v)).expect("concat"), &probe),
        b.data(),
        gb.data(),
    );
    out.push(("concat".into(), ea.max(eb)));

    for act in [
        Activation::Linear,
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Tanh,
        Activation::Exp,
        Activation::Sigmoid,
        Activation::SoftmaxChannels,
    ] {
        let shape = [2, 3, 2, 3];
        // keep inputs off the ReLU corner
        let x = random_tensor(shape, &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let y = ops::apply_activation(&x, act)?;
        let probe = random_tensor(shape, &mut rng);
        let mut g = probe.clone();
        act.backward_in_place(&y, &mut g);
        let e = check_all(
            |v| dot(&ops::apply_activation(&with_flat(shape, v), act).expect("activation"), &probe),
            x.data(),
            g.data(),
        );
        out.push((format!("activation:{}", act.name()), e));
    }

    // mixture NLL for N = 1..3, all inputs at once
    for n in 1..=MAX_COMPONENTS {
        let w: Vec<f64> = {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        };
        let free: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-0.5..0.5)).collect();
        let stds: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let (y, mu) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let g = gmm_nll_grad(y, mu, &w, &free, &stds);
        let mut x = vec![mu];
        x.extend(&w);
        x.extend(&free);
        x.extend(&stds);
        let mut an = vec![g.d_mu];
        an.extend(&g.d_weights[..n]);
        an.extend(&g.d_free_means[..n - 1]);
        an.extend(&g.d_stds[..n]);
        let e = check_all(
            |v| gmm_nll_grad(y, v[0], &v[1..=n], &v[n + 1..2 * n], &v[2 * n..]).loss,
            &x,
            &an,
        );
        out.push((format!("gmm_nll:N={n}"), e));
    }
    Ok(out)
}

/// Relative error of the full denoiser + noise network + loss gradient at
/// `coords` random parameters (half drawn from each network), in `f64`.
pub fn composition_grad_error(components: usize, coords: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = NetworkBundle::<f64>::build(
        DNetConfig::with_filters(4),
        NNetConfig {
            hidden_filters: 6,
            ..NNetConfig::with_components(components)
        },
        seed,
        &mut rng,
    )?;
    b.nnet = NNet::build_with_head_scale(b.nnet.config.clone(), &mut rng, 1.0)?;
    // nonzero biases keep activations off the ReLU corners
    for p in b.dnet.params.iter_mut().chain(b.nnet.params.iter_mut()) {
        if p.name.ends_with(".b") {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let cfg = TrainConfig {
        tile_size: 16,
        ..TrainConfig::default()
    };
    let tiles: Vec<MaskedTile> = (0..2)
        .map(|_| {
            let img = Image2D::new(16, 16, (0..256).map(|_| rng.random_range(-1.0f32..2.0)).collect())?;
            MaskedTile::draw(&img, &cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    masked_loss_grad(&mut b.dnet, &mut b.nnet, &tiles, false)?;
    let nd = b.dnet.params.num_scalars();
    let mut x = b.dnet.params.flat_values();
    x.extend(b.nnet.params.flat_values());
    let mut g = b.dnet.params.flat_grads();
    g.extend(b.nnet.params.flat_grads());
    let mut picks = sample_coords(nd, coords / 2, &mut rng);
    picks.extend(
        sample_coords(x.len() - nd, coords - coords / 2, &mut rng)
            .into_iter()
            .map(|c| c + nd),
    );
    let (d0, n0) = (b.dnet.clone(), b.nnet.clone());
    Ok(grad_check(
        |v| {
            let (mut d, mut n) = (d0.clone(), n0.clone());
            d.params.set_flat_values(&v[..nd]);
            n.params.set_flat_values(&v[nd..]);
            masked_loss(&d, &n, &tiles).expect("loss")
        },
        &x,
        &g,
        FD_EPS,
        &picks,
    ))
}

/// Mean masked fraction over `grids` random grids on a `size x size` image.
pub fn mean_masked_fraction(size: usize, grids: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..grids {
        total += sample_grid(size, size, 3, 5, ReplacementMode::Gaussian8, &mut rng)?.masked_fraction();
    }
    Ok(total / grids as f64)
}

/// Largest `|sum_i a_i m_i|` over `samples` random softmax/sigmoid head
/// outputs with `n` components.
pub fn max_centering_error(n: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mx = logits.iter().copied().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / z).collect();
        let free: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-3.0..3.0)).collect();
        let last = center_mixture(&w, &free).value;
        let s: f64 = w[..n - 1].iter().zip(&free).map(|(a, m)| a * m).sum::<f64>() + w[n - 1] * last;
        worst = worst.max(s.abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for (name, e) in primitive_grad_errors(1).unwrap() {
            assert!(e < 1e-4, "{name}: {e}");
        }
    }

    #[test]
    fn composition_passes() {
        for n in 1..=3 {
            let e = composition_grad_error(n, 20, 7 + n as u64).unwrap();
            assert!(e < 1e-3, "N={n}: {e}");
        }
    }

    #[test]
    fn masking_and_centering() {
        let f = mean_masked_fraction(256, 200, 3).unwrap();
        assert!((f - 0.068).abs() < 0.003, "{f}");
        assert!(max_centering_error(3, 1000, 4) < 1e-6);
        assert!(max_centering_error(2, 1000, 5) < 1e-6);
    }
}
