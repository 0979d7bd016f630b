//! Full-image prediction without masking.

use crate::data::{Dihedral, Image2D};
use crate::error::{Error, Result};
use crate::networks::{NetworkBundle, NoiseParams};
use crate::noise_model::Mixture;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Denoised image and per-pixel noise parameters, both in raw intensity
/// units.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub denoised: Image2D,
    /// Component-major over the image's pixels (row-major).
    pub noise: NoiseParams<f64>,
}

/// Mirror index for reflect padding (edge sample not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads bottom/right so both dims are multiples of `d`.
fn pad_to_multiple(values: &[f64], h: usize, w: usize, d: usize) -> (Vec<f64>, usize, usize) {
    let (hp, wp) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    let mut out = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        let sy = reflect(y, h);
        for x in 0..wp {
            out.push(values[sy * w + reflect(x, w)]);
        }
    }
    (out, hp, wp)
}

fn check_dims(img: &Image2D) -> Result<()> {
    if img.height() < 8 || img.width() < 8 {
        return Err(Error::Shape(format!(
            "image {}x{} is below the 8x8 minimum",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// D-net output on normalized values, same dims as the input.
fn denoise_normalized<T: Scalar>(bundle: &NetworkBundle<T>, values: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let (padded, hp, wp) = pad_to_multiple(values, h, w, bundle.dnet.config.divisor());
    let x: Vec<T> = padded.iter().map(|&v| T::c(v)).collect();
    let out = bundle.dnet.forward(&Tensor4::from_plane(hp, wp, &x)?)?;
    let data = out.data();
    let mut res = Vec::with_capacity(h * w);
    for y in 0..h {
        res.extend(data[y * wp..y * wp + w].iter().map(|v| v.f64()));
    }
    if res.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("denoiser produced non-finite output".into()));
    }
    Ok(res)
}

fn normalized_values(bundle_norm: &crate::data::NormalizationRecord, img: &Image2D) -> Vec<f64> {
    img.values().iter().map(|&v| bundle_norm.normalize_value(v as f64)).collect()
}

fn to_image(values: Vec<f64>, h: usize, w: usize, like: &Image2D) -> Result<Image2D> {
    let mut out = Image2D::new(h, w, values.into_iter().map(|v| v as f32).collect())?;
    out.depth = like.depth;
    out.pair_id = like.pair_id.clone();
    Ok(out)
}

/// Noise parameters at normalized signal values, rescaled to raw units.
fn noise_at_normalized<T: Scalar>(bundle: &NetworkBundle<T>, values: &[f64], scale: f64) -> Result<NoiseParams<f64>> {
    let v: Vec<T> = values.iter().map(|&x| T::c(x)).collect();
    let np = bundle.nnet.forward(&Tensor4::from_vec([1, 1, 1, v.len()], v)?)?;
    Ok(NoiseParams {
        components: np.components,
        pixels: np.pixels,
        weights: np.weights.iter().map(|w| w.f64()).collect(),
        means: np.means.iter().map(|m| m.f64() * scale).collect(),
        stds: np.stds.iter().map(|s| s.f64() * scale).collect(),
        degenerate: np.degenerate,
    })
}

/// Single-pass prediction: the D-net sees the raw (unmasked) image, the
/// N-net the denoised one.
pub fn predict<T: Scalar>(bundle: &NetworkBundle<T>, image: &Image2D) -> Result<Prediction> {
    let norm = bundle.normalization()?;
    check_dims(image)?;
    let (h, w) = image.dims();
    let mu = denoise_normalized(bundle, &normalized_values(&norm, image), h, w)?;
    let noise = noise_at_normalized(bundle, &mu, norm.scale)?;
    let denoised = mu.into_iter().map(|v| norm.denormalize_value(v)).collect();
    Ok(Prediction {
        denoised: to_image(denoised, h, w, image)?,
        noise,
    })
}

/// Symmetry group used for test-time averaging of `bundle`.
pub fn ensemble_group<T>(bundle: &NetworkBundle<T>) -> &'static [Dihedral] {
    Dihedral::group(bundle.provenance.allow_transpose)
}

/// Average of `g^-1(D(g(x)))` over the bundle's symmetry group.
///
/// The per-pixel sum is accumulated in `f64` from `f32`-rounded terms, which
/// makes it exact and therefore independent of the order of the group
/// elements; the result commutes with every group element bit for bit.
pub fn predict_dihedral<T: Scalar>(bundle: &NetworkBundle<T>, image: &Image2D) -> Result<Image2D> {
    predict_over(bundle, image, ensemble_group(bundle))
}

/// Group-averaged prediction over an explicit set of transforms.
pub fn predict_over<T: Scalar>(bundle: &NetworkBundle<T>, image: &Image2D, group: &[Dihedral]) -> Result<Image2D> {
    let norm = bundle.normalization()?;
    check_dims(image)?;
    if group.is_empty() {
        return Err(Error::Config("empty transform group".into()));
    }
    let (h, w) = image.dims();
    let x = normalized_values(&norm, image);
    let mut acc = vec![0.0f64; h * w];
    for &g in group {
        let (gh, gw) = g.output_dims(h, w);
        let gx = g.apply_slice(h, w, &x);
        let y = denoise_normalized(bundle, &gx, gh, gw)?;
        let y32: Vec<f32> = y.iter().map(|&v| v as f32).collect();
        let back = g.inverse().apply_slice(gh, gw, &y32);
        for (a, v) in acc.iter_mut().zip(back) {
            *a += v as f64;
        }
    }
    let n = group.len() as f64;
    let out = acc.into_iter().map(|s| norm.denormalize_value(s / n)).collect();
    to_image(out, h, w, image)
}

/// Predicted noise mixtures, in raw units, at raw signal values `signal`.
pub fn noise_model_at<T: Scalar>(bundle: &NetworkBundle<T>, signal: &[f64]) -> Result<Vec<Mixture>> {
    let norm = bundle.normalization()?;
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let xs: Vec<f64> = signal.iter().map(|&v| norm.normalize_value(v)).collect();
    let np = noise_at_normalized(bundle, &xs, norm.scale)?;
    Ok((0..np.pixels).map(|p| np.mixture(p)).collect())
}
