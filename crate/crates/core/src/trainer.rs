//! Joint training of the denoiser and the noise network on masked tiles.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{augment, fit_normalization, make_tiles, Image2D};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, sample_grid, CorrelationAxis, ReplacementMode};
use crate::networks::nnet::HeadGrads;
use crate::networks::{checkpoint, DNet, DNetConfig, NNet, NNetConfig, NetworkBundle};
use crate::noise_model::{gmm_nll_grad, MAX_COMPONENTS};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NONFINITE_STEPS: usize = 50;
/// Relative decrease of the epoch loss that counts as an improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub tiles_per_step: usize,
    pub tile_size: usize,
    pub lr_initial: f64,
    pub lr_floor: f64,
    pub plateau_patience: usize,
    pub spacing_min: usize,
    pub spacing_max: usize,
    pub replacement: ReplacementMode,
    pub components: usize,
    pub allow_transpose: bool,
    pub seed: u64,
    /// Detach the noise network's input from the denoiser output.
    pub stop_nnet_gradient: bool,
    pub base_filters: usize,
    pub hidden_filters: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            steps_per_epoch: 200,
            tiles_per_step: 100,
            tile_size: 96,
            lr_initial: 4e-4,
            lr_floor: 1e-6,
            plateau_patience: 30,
            spacing_min: 3,
            spacing_max: 5,
            replacement: ReplacementMode::Gaussian8,
            components: 1,
            allow_transpose: true,
            seed: 0,
            stop_nnet_gradient: false,
            base_filters: 64,
            hidden_filters: 64,
            checkpoint_every: 0,
        }
    }
}

fn replacement_name(mode: ReplacementMode) -> String {
    match mode {
        ReplacementMode::Gaussian8 => "gaussian8".into(),
        ReplacementMode::Uniform8 => "uniform8".into(),
        ReplacementMode::Axial { axis, extent } => {
            let a = match axis {
                CorrelationAxis::Horizontal => "horizontal",
                CorrelationAxis::Vertical => "vertical",
            };
            if extent == 3 {
                format!("axial-{a}")
            } else {
                format!("axial-{a}:{extent}")
            }
        }
    }
}

fn parse_replacement(s: &str) -> Result<ReplacementMode> {
    let bad = || Error::Config(format!("unknown replacement mode `{s}`"));
    match s {
        "gaussian8" => return Ok(ReplacementMode::Gaussian8),
        "uniform8" => return Ok(ReplacementMode::Uniform8),
        _ => {}
    }
    let rest = s.strip_prefix("axial-").ok_or_else(bad)?;
    let (axis, extent) = match rest.split_once(':') {
        Some((a, e)) => (a, e.parse::<usize>().map_err(|_| bad())?),
        None => (rest, 3),
    };
    let axis = match axis {
        "horizontal" => CorrelationAxis::Horizontal,
        "vertical" => CorrelationAxis::Vertical,
        _ => return Err(bad()),
    };
    Ok(ReplacementMode::Axial { axis, extent })
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("tiles_per_step", self.tiles_per_step),
            ("tile_size", self.tile_size),
            ("plateau_patience", self.plateau_patience),
            ("spacing_min", self.spacing_min),
            ("base_filters", self.base_filters),
            ("hidden_filters", self.hidden_filters),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor < self.lr_initial && self.lr_initial.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_floor < lr_initial, got {} and {}",
                self.lr_floor, self.lr_initial
            )));
        }
        if self.spacing_min > self.spacing_max || self.spacing_max > self.tile_size {
            return Err(Error::Config(format!(
                "invalid spacing range {}..={} for tile size {}",
                self.spacing_min, self.spacing_max, self.tile_size
            )));
        }
        if !(1..=MAX_COMPONENTS).contains(&self.components) {
            return Err(Error::Config(format!("components must be in 1..={MAX_COMPONENTS}")));
        }
        let d = self.dnet_config().divisor();
        if !self.tile_size.is_multiple_of(d) {
            return Err(Error::Config(format!("tile_size must be a multiple of {d}")));
        }
        Ok(())
    }

    pub fn dnet_config(&self) -> DNetConfig {
        DNetConfig::with_filters(self.base_filters)
    }

    pub fn nnet_config(&self) -> NNetConfig {
        NNetConfig {
            hidden_filters: self.hidden_filters,
            ..NNetConfig::with_components(self.components)
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected, missing ones keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "epochs" => c.epochs = parse_value(k, v)?,
                "steps_per_epoch" => c.steps_per_epoch = parse_value(k, v)?,
                "tiles_per_step" => c.tiles_per_step = parse_value(k, v)?,
                "tile_size" => c.tile_size = parse_value(k, v)?,
                "lr_initial" => c.lr_initial = parse_value(k, v)?,
                "lr_floor" => c.lr_floor = parse_value(k, v)?,
                "plateau_patience" => c.plateau_patience = parse_value(k, v)?,
                "spacing_min" => c.spacing_min = parse_value(k, v)?,
                "spacing_max" => c.spacing_max = parse_value(k, v)?,
                "replacement" => c.replacement = parse_replacement(v)?,
                "components" => c.components = parse_value(k, v)?,
                "allow_transpose" => c.allow_transpose = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                "stop_nnet_gradient" => c.stop_nnet_gradient = parse_value(k, v)?,
                "base_filters" => c.base_filters = parse_value(k, v)?,
                "hidden_filters" => c.hidden_filters = parse_value(k, v)?,
                "checkpoint_every" => c.checkpoint_every = parse_value(k, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{k}`", no + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "steps_per_epoch = {}", self.steps_per_epoch);
        let _ = writeln!(s, "tiles_per_step = {}", self.tiles_per_step);
        let _ = writeln!(s, "tile_size = {}", self.tile_size);
        let _ = writeln!(s, "lr_initial = {:e}", self.lr_initial);
        let _ = writeln!(s, "lr_floor = {:e}", self.lr_floor);
        let _ = writeln!(s, "plateau_patience = {}", self.plateau_patience);
        let _ = writeln!(s, "spacing_min = {}", self.spacing_min);
        let _ = writeln!(s, "spacing_max = {}", self.spacing_max);
        let _ = writeln!(s, "replacement = {}", replacement_name(self.replacement));
        let _ = writeln!(s, "components = {}", self.components);
        let _ = writeln!(s, "allow_transpose = {}", self.allow_transpose);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "stop_nnet_gradient = {}", self.stop_nnet_gradient);
        let _ = writeln!(s, "base_filters = {}", self.base_filters);
        let _ = writeln!(s, "hidden_filters = {}", self.hidden_filters);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// A masked training tile: network input, unmasked targets and the loss
/// positions (row-major indices).
#[derive(Clone, Debug)]
pub struct MaskedTile {
    pub input: Image2D,
    pub target: Image2D,
    pub pixels: Vec<usize>,
}

impl MaskedTile {
    /// Masks `tile` according to a freshly drawn grid.
    pub fn draw(tile: &Image2D, config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let plan = sample_grid(
            tile.height(),
            tile.width(),
            config.spacing_min,
            config.spacing_max,
            config.replacement,
            rng,
        )?;
        let (input, mask) = apply_mask(tile, &plan)?;
        let pixels = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m != 0).then_some(i))
            .collect();
        Ok(Self {
            input,
            target: tile.clone(),
            pixels,
        })
    }
}

/// Sum of the per-pixel losses of one tile, plus its parameter gradients
/// (already scaled by the caller's weight) when requested.
struct TileEval<T> {
    loss_sum: f64,
    degenerate: usize,
    grads: Option<(ParamSet<T>, ParamSet<T>)>,
}

fn eval_tile<T: Scalar>(
    dnet: &DNet<T>,
    nnet: &NNet<T>,
    tile: &MaskedTile,
    weight: T,
    stop_nnet_gradient: bool,
    with_grads: bool,
) -> Result<TileEval<T>> {
    let (h, w) = tile.input.dims();
    let to_t = |v: &[f32]| v.iter().map(|&x| T::c(x as f64)).collect::<Vec<T>>();
    let x = Tensor4::from_plane(h, w, &to_t(tile.input.values()))?;
    let trace_d = dnet.forward_trace(x)?;
    let out = dnet.output(&trace_d).data();
    let m = tile.pixels.len();
    let mus: Vec<T> = tile.pixels.iter().map(|&i| out[i]).collect();
    let trace_n = nnet.forward_trace(Tensor4::from_vec([1, 1, 1, m], mus.clone())?)?;
    let np = nnet.params_from_trace(&trace_n);
    let n = np.components;

    let mut head = with_grads.then(|| nnet.zero_head_grads(&trace_n));
    let mut d_mu = vec![T::zero(); m];
    let mut loss_sum = 0.0;
    let mut wk = [T::zero(); MAX_COMPONENTS];
    let mut fk = [T::zero(); MAX_COMPONENTS];
    let mut sk = [T::zero(); MAX_COMPONENTS];
    for (p, &idx) in tile.pixels.iter().enumerate() {
        for k in 0..n {
            wk[k] = np.weight(k, p);
            sk[k] = np.std(k, p);
        }
        for k in 0..n - 1 {
            fk[k] = np.mean(k, p);
        }
        let y = T::c(tile.target.values()[idx] as f64);
        let g = gmm_nll_grad(y, mus[p], &wk[..n], &fk[..n - 1], &sk[..n]);
        loss_sum += g.loss.f64();
        if let Some(hg) = head.as_mut() {
            d_mu[p] = weight * g.d_mu;
            write_head_grads(hg, &g.d_stds, &g.d_weights, &g.d_free_means, n, m, p, weight);
        }
    }
    let degenerate = np.degenerate;
    let Some(hg) = head else {
        return Ok(TileEval {
            loss_sum,
            degenerate,
            grads: None,
        });
    };
    if !loss_sum.is_finite() {
        return Ok(TileEval {
            loss_sum,
            degenerate,
            grads: None,
        });
    }

    let mut nloc = nnet.clone();
    nloc.params.zero_grad();
    let through = nloc.backward(&trace_n, hg, !stop_nnet_gradient)?;
    if let Some(t) = through {
        for (d, &g) in d_mu.iter_mut().zip(t.data()) {
            *d += g;
        }
    }
    let mut grad_out = Tensor4::zeros([1, 1, h, w]);
    for (&idx, &g) in tile.pixels.iter().zip(&d_mu) {
        grad_out.data_mut()[idx] = g;
    }
    let mut dloc = dnet.clone();
    dloc.params.zero_grad();
    dloc.backward(&trace_d, grad_out, false)?;
    Ok(TileEval {
        loss_sum,
        degenerate,
        grads: Some((dloc.params, nloc.params)),
    })
}

#[allow(clippy::too_many_arguments)]
fn write_head_grads<T: Scalar>(
    hg: &mut HeadGrads<T>,
    d_stds: &[T],
    d_weights: &[T],
    d_free_means: &[T],
    n: usize,
    m: usize,
    p: usize,
    weight: T,
) {
    // head tensors are [1, channels, 1, m]
    for k in 0..n {
        hg.stds.data_mut()[k * m + p] = weight * d_stds[k];
    }
    if let Some(wt) = hg.weights.as_mut() {
        if n == 2 {
            // sigmoid head s gives weights (s, 1 - s)
            wt.data_mut()[p] = weight * (d_weights[0] - d_weights[1]);
        } else {
            for k in 0..n {
                wt.data_mut()[k * m + p] = weight * d_weights[k];
            }
        }
    }
    if let Some(mt) = hg.means.as_mut() {
        for k in 0..n - 1 {
            mt.data_mut()[k * m + p] = weight * d_free_means[k];
        }
    }
}

/// Outcome of [`masked_loss_grad`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEval {
    /// Mean NLL over all loss positions of all tiles.
    pub loss: f64,
    pub positions: usize,
    /// Pixels where the last mixture weight hit its floor.
    pub degenerate: usize,
}

fn total_positions(tiles: &[MaskedTile]) -> Result<usize> {
    let total: usize = tiles.iter().map(|t| t.pixels.len()).sum();
    if total == 0 {
        return Err(Error::Data("no masked positions in batch".into()));
    }
    Ok(total)
}

/// Mean masked loss without gradients.
pub fn masked_loss<T: Scalar>(dnet: &DNet<T>, nnet: &NNet<T>, tiles: &[MaskedTile]) -> Result<f64> {
    let total = total_positions(tiles)?;
    let mut sum = 0.0;
    for t in tiles {
        sum += eval_tile(dnet, nnet, t, T::one(), true, false)?.loss_sum;
    }
    Ok(sum / total as f64)
}

/// Mean masked loss; gradients are accumulated into both parameter sets.
///
/// Tiles are evaluated in parallel and reduced in tile order, so the result
/// does not depend on the thread count.
pub fn masked_loss_grad<T: Scalar>(
    dnet: &mut DNet<T>,
    nnet: &mut NNet<T>,
    tiles: &[MaskedTile],
    stop_nnet_gradient: bool,
) -> Result<LossEval> {
    let total = total_positions(tiles)?;
    let weight = T::c(1.0 / total as f64);
    let (d, n) = (&*dnet, &*nnet);
    let evals: Vec<TileEval<T>> = tiles
        .par_iter()
        .map(|t| eval_tile(d, n, t, weight, stop_nnet_gradient, true))
        .collect::<Result<_>>()?;
    let mut loss_sum = 0.0;
    let mut degenerate = 0;
    for e in &evals {
        loss_sum += e.loss_sum;
        degenerate += e.degenerate;
    }
    if loss_sum.is_finite() {
        for e in &evals {
            let (gd, gn) = e.grads.as_ref().expect("finite tiles carry gradients");
            dnet.params.accumulate_grads(gd);
            nnet.params.accumulate_grads(gn);
        }
    }
    Ok(LossEval {
        loss: loss_sum / total as f64,
        positions: total,
        degenerate,
    })
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub best_loss: f64,
    pub epochs_since_improvement: usize,
    pub lr: f64,
    pub rng: ChaCha8Rng,
    pub adam_dnet: AdamState<T>,
    pub adam_nnet: AdamState<T>,
    pub consecutive_nonfinite: usize,
    pub skipped_steps: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(bundle: &NetworkBundle<T>, config: &TrainConfig, rng: ChaCha8Rng) -> Self {
        Self {
            epoch: 0,
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            lr: config.lr_initial,
            rng,
            adam_dnet: AdamState::new(&bundle.dnet.params, config.lr_initial),
            adam_nnet: AdamState::new(&bundle.nnet.params, config.lr_initial),
            consecutive_nonfinite: 0,
            skipped_steps: 0,
        }
    }
}

/// Plateau schedule: after `patience` epochs without a relative improvement
/// of [`PLATEAU_THRESHOLD`], the learning rate is halved. Halving never
/// crosses `lr_floor`; once another halving would, the rate stays put.
pub fn lr_schedule_update<T>(state: &mut TrainState<T>, epoch_mean_loss: f64, config: &TrainConfig) {
    let improved = !state.best_loss.is_finite()
        || epoch_mean_loss < state.best_loss - PLATEAU_THRESHOLD * state.best_loss.abs();
    if improved {
        state.best_loss = epoch_mean_loss;
        state.epochs_since_improvement = 0;
    } else {
        state.epochs_since_improvement += 1;
        if state.epochs_since_improvement >= config.plateau_patience {
            if state.lr / 2.0 >= config.lr_floor {
                state.lr /= 2.0;
            }
            state.epochs_since_improvement = 0;
        }
    }
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// The update was skipped because the loss or a gradient was non-finite.
    pub skipped: bool,
}

/// Draws, augments and masks the tiles of one step.
pub fn draw_batch(images: &[Image2D], config: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<MaskedTile>> {
    if images.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let img = &images[rng.random_range(0..images.len())];
    let batch = make_tiles(img, config.tile_size, config.tiles_per_step, rng)?;
    batch
        .tiles
        .iter()
        .map(|t| {
            let (aug, _) = augment(&t.image, rng, config.allow_transpose);
            MaskedTile::draw(&aug, config, rng)
        })
        .collect()
}

/// One training step on normalized `images`.
pub fn train_step<T: Scalar>(
    bundle: &mut NetworkBundle<T>,
    images: &[Image2D],
    config: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<StepOutcome> {
    let tiles = draw_batch(images, config, &mut state.rng)?;
    let eval = masked_loss_grad(&mut bundle.dnet, &mut bundle.nnet, &tiles, config.stop_nnet_gradient)?;
    state.adam_dnet.lr = state.lr;
    state.adam_nnet.lr = state.lr;
    let mut skipped = !eval.loss.is_finite();
    if !skipped {
        // both sets are checked before either is touched
        let finite = |p: &ParamSet<T>| p.iter().all(|q| q.grad.all_finite());
        skipped = !(finite(&bundle.dnet.params) && finite(&bundle.nnet.params));
    }
    if skipped {
        bundle.dnet.params.zero_grad();
        bundle.nnet.params.zero_grad();
        state.skipped_steps += 1;
        state.consecutive_nonfinite += 1;
        log::warn!("non-finite loss or gradient, skipping update ({} in a row)", state.consecutive_nonfinite);
        if state.consecutive_nonfinite >= MAX_NONFINITE_STEPS {
            return Err(Error::Numerical(format!(
                "{MAX_NONFINITE_STEPS} consecutive non-finite training steps"
            )));
        }
    } else {
        adam_step(&mut bundle.dnet.params, &mut state.adam_dnet)?;
        adam_step(&mut bundle.nnet.params, &mut state.adam_nnet)?;
        state.consecutive_nonfinite = 0;
    }
    Ok(StepOutcome {
        loss: eval.loss,
        skipped,
    })
}

/// Files written while training.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    /// Loss log, one `epoch<TAB>mean_loss<TAB>lr` line per epoch.
    pub log: Option<PathBuf>,
}

/// Per-epoch summary handed to the progress callback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Fits the normalization, trains for the configured number of epochs and
/// returns the last-epoch weights.
pub fn train(config: &TrainConfig, dataset: &[Image2D], outputs: &TrainOutputs) -> Result<NetworkBundle<f32>> {
    train_with_progress(config, dataset, outputs, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    dataset: &[Image2D],
    outputs: &TrainOutputs,
    mut progress: impl FnMut(&EpochSummary),
) -> Result<NetworkBundle<f32>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if let Some(img) = dataset
        .iter()
        .find(|i| i.height() < config.tile_size || i.width() < config.tile_size)
    {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than tile size {}",
            img.height(),
            img.width(),
            config.tile_size
        )));
    }
    let norm = fit_normalization(dataset)?;
    let images = dataset.iter().map(|i| norm.normalize(i)).collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut bundle = NetworkBundle::<f32>::build(config.dnet_config(), config.nnet_config(), config.seed, &mut rng)?;
    bundle.normalization = Some(norm);
    bundle.provenance.allow_transpose = config.allow_transpose;
    let mut state = TrainState::new(&bundle, config, rng);

    let mut log_file = match &outputs.log {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let mut sum = 0.0;
        let mut counted = 0usize;
        for _ in 0..config.steps_per_epoch {
            let out = train_step(&mut bundle, &images, config, &mut state)?;
            if !out.skipped {
                sum += out.loss;
                counted += 1;
            }
        }
        let mean_loss = if counted > 0 { sum / counted as f64 } else { f64::NAN };
        let lr_used = state.lr;
        if mean_loss.is_finite() {
            lr_schedule_update(&mut state, mean_loss, config);
        }
        let summary = EpochSummary {
            epoch: epoch + 1,
            mean_loss,
            lr: lr_used,
        };
        log::info!("epoch {} loss {:.6} lr {:e}", summary.epoch, mean_loss, lr_used);
        if let (Some(f), Some(p)) = (log_file.as_mut(), &outputs.log) {
            writeln!(f, "{}\t{}\t{:e}", summary.epoch, mean_loss, lr_used).map_err(|e| Error::io(p, e))?;
        }
        progress(&summary);
        bundle.provenance.epochs = epoch + 1;
        if let Some(p) = &outputs.checkpoint {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 < config.epochs {
                checkpoint::save(p, &bundle)?;
            }
        }
    }
    if let Some(p) = &outputs.checkpoint {
        checkpoint::save(p, &bundle)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, sample_coords};

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            steps_per_epoch: 3,
            tiles_per_step: 2,
            tile_size: 16,
            base_filters: 4,
            hidden_filters: 6,
            ..TrainConfig::default()
        }
    }

    fn noisy_image(h: usize, w: usize, seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = Image2D::from_fn(h, w, |y, x| 100.0 + 50.0 * ((y as f32 / 5.0).sin() + (x as f32 / 7.0).cos())).unwrap();
        let vals = clean.values().iter().map(|v| v + rng.random_range(-10.0f32..10.0)).collect();
        Image2D::new(h, w, vals).unwrap()
    }

    fn tiny_bundle(components: usize, seed: u64) -> NetworkBundle<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = NetworkBundle::<f64>::build(
            DNetConfig::with_filters(3),
            NNetConfig {
                hidden_filters: 4,
                ..NNetConfig::with_components(components)
            },
            seed,
            &mut rng,
        )
        .unwrap();
        // larger head weights so every head receives a visible gradient
        b.nnet = NNet::build_with_head_scale(b.nnet.config.clone(), &mut rng, 1.0).unwrap();
        // nonzero biases keep activations off the ReLU corners
        for p in b.dnet.params.iter_mut().chain(b.nnet.params.iter_mut()) {
            if p.name.ends_with(".b") {
                for v in p.value.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        b
    }

    fn tiles(seed: u64, count: usize, config: &TrainConfig) -> Vec<MaskedTile> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = noisy_image(32, 32, seed).map(|v| (v - 100.0) / 50.0).unwrap();
        let batch = make_tiles(&img, config.tile_size, count, &mut rng).unwrap();
        batch
            .tiles
            .iter()
            .map(|t| MaskedTile::draw(&t.image, config, &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn config_round_trip_and_rejection() {
        let mut c = TrainConfig::default();
        c.replacement = ReplacementMode::axial(CorrelationAxis::Vertical);
        c.components = 3;
        c.lr_initial = 1.5e-3;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert!(TrainConfig::parse("epochs = 3\nbogus = 1\n").is_err());
        assert!(TrainConfig::parse("epochs = -1").is_err());
        assert!(TrainConfig::parse("lr_floor = 1\n").is_err());
        assert!(TrainConfig::parse("tile_size = 30").is_err());
        let p = TrainConfig::parse("# comment\n\nepochs = 7 # trailing\n").unwrap();
        assert_eq!(p.epochs, 7);
        assert_eq!(p.steps_per_epoch, 200);
    }

    #[test]
    fn schedule_halves_after_patience() {
        let cfg = TrainConfig::default();
        let b = tiny_bundle(1, 0);
        let mut s = TrainState::new(&b, &cfg, ChaCha8Rng::seed_from_u64(0));
        lr_schedule_update(&mut s, 1.0, &cfg);
        for _ in 0..29 {
            lr_schedule_update(&mut s, 1.0, &cfg);
        }
        assert_eq!(s.lr, 4e-4);
        lr_schedule_update(&mut s, 1.0, &cfg);
        assert_eq!(s.lr, 2e-4);
        // improvement at the 29th plateau epoch resets patience
        for _ in 0..28 {
            lr_schedule_update(&mut s, 1.0, &cfg);
        }
        lr_schedule_update(&mut s, 0.5, &cfg);
        assert_eq!(s.epochs_since_improvement, 0);
        for _ in 0..29 {
            lr_schedule_update(&mut s, 0.5, &cfg);
        }
        assert_eq!(s.lr, 2e-4);
        // a tiny relative improvement does not count
        lr_schedule_update(&mut s, 0.5 * (1.0 - 1e-7), &cfg);
        assert_eq!(s.lr, 1e-4);
    }

    #[test]
    fn schedule_respects_floor_with_exact_halving() {
        let cfg = TrainConfig::default();
        let b = tiny_bundle(1, 0);
        let mut s = TrainState::new(&b, &cfg, ChaCha8Rng::seed_from_u64(0));
        let mut seen = vec![s.lr];
        for _ in 0..30 * 20 {
            lr_schedule_update(&mut s, 1.0, &cfg);
            if *seen.last().unwrap() != s.lr {
                seen.push(s.lr);
            }
        }
        assert!(seen.windows(2).all(|w| w[1] == w[0] / 2.0));
        assert!(s.lr >= cfg.lr_floor && s.lr / 2.0 < cfg.lr_floor);
        s.lr = 1e-6;
        for _ in 0..60 {
            lr_schedule_update(&mut s, 1.0, &cfg);
        }
        assert_eq!(s.lr, 1e-6);
    }

    #[test]
    fn full_composition_gradient() {
        let cfg = TrainConfig {
            tile_size: 16,
            ..TrainConfig::default()
        };
        for (components, stop) in [(1, false), (2, false), (3, false), (1, true)] {
            let mut b = tiny_bundle(components, 11 + components as u64);
            let ts = tiles(3, 2, &cfg);
            masked_loss_grad(&mut b.dnet, &mut b.nnet, &ts, stop).unwrap();
            let nd = b.dnet.params.num_scalars();
            let mut x = b.dnet.params.flat_values();
            x.extend(b.nnet.params.flat_values());
            let mut g = b.dnet.params.flat_grads();
            g.extend(b.nnet.params.flat_grads());
            let loss = |v: &[f64]| {
                let mut d = b.dnet.clone();
                let mut n = b.nnet.clone();
                d.params.set_flat_values(&v[..nd]);
                n.params.set_flat_values(&v[nd..]);
                if stop {
                    // detached: the noise net sees the unperturbed denoiser output
                    let mut total = 0.0;
                    let mut count = 0;
                    for t in &ts {
                        let (h, w) = t.input.dims();
                        let xin = Tensor4::from_plane(h, w, &t.input.values().iter().map(|&p| p as f64).collect::<Vec<_>>()).unwrap();
                        let mu_live = d.forward(&xin).unwrap();
                        let mu_frozen = b.dnet.forward(&xin).unwrap();
                        let m: Vec<f64> = t.pixels.iter().map(|&i| mu_frozen.data()[i]).collect();
                        let np = n.forward(&Tensor4::from_vec([1, 1, 1, m.len()], m).unwrap()).unwrap();
                        for (p, &i) in t.pixels.iter().enumerate() {
                            let c = np.components;
                            let ws: Vec<f64> = (0..c).map(|k| np.weight(k, p)).collect();
                            let ms: Vec<f64> = (0..c).map(|k| np.mean(k, p)).collect();
                            let ss: Vec<f64> = (0..c).map(|k| np.std(k, p)).collect();
                            total += crate::noise_model::gmm_nll(t.target.values()[i] as f64, mu_live.data()[i], &ws, &ms, &ss);
                            count += 1;
                        }
                    }
                    total / count as f64
                } else {
                    masked_loss(&d, &n, &ts).unwrap()
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut coords = sample_coords(nd, 12, &mut rng);
            coords.extend(sample_coords(x.len() - nd, 12, &mut rng).into_iter().map(|c| c + nd));
            let err = grad_check(loss, &x, &g, 1e-6, &coords);
            assert!(err < 1e-3, "N={components} stop={stop}: {err}");
        }
    }

    #[test]
    fn unmasked_targets_do_not_matter() {
        let cfg = TrainConfig {
            tile_size: 16,
            ..TrainConfig::default()
        };
        let mut b = tiny_bundle(2, 4);
        let ts = tiles(9, 2, &cfg);
        let base = masked_loss_grad(&mut b.dnet, &mut b.nnet, &ts, false).unwrap().loss;
        let g0 = b.dnet.params.flat_grads();
        b.dnet.params.zero_grad();
        b.nnet.params.zero_grad();
        let mut pert = ts.clone();
        for t in &mut pert {
            let masked: std::collections::HashSet<usize> = t.pixels.iter().copied().collect();
            let vals: Vec<f32> = t
                .target
                .values()
                .iter()
                .enumerate()
                .map(|(i, &v)| if masked.contains(&i) { v } else { v + 37.0 })
                .collect();
            t.target = Image2D::new(16, 16, vals).unwrap();
        }
        let again = masked_loss_grad(&mut b.dnet, &mut b.nnet, &pert, false).unwrap().loss;
        assert_eq!(base, again);
        assert_eq!(g0, b.dnet.params.flat_grads());
    }

    #[test]
    fn sigma_path_reaches_dnet() {
        let cfg = TrainConfig {
            tile_size: 16,
            ..TrainConfig::default()
        };
        let ts = tiles(2, 1, &cfg);
        let mut a = tiny_bundle(1, 8);
        let mut b = a.clone();
        masked_loss_grad(&mut a.dnet, &mut a.nnet, &ts, false).unwrap();
        masked_loss_grad(&mut b.dnet, &mut b.nnet, &ts, true).unwrap();
        let diff = a
            .dnet
            .params
            .flat_grads()
            .iter()
            .zip(b.dnet.params.flat_grads())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-10, "{diff}");
        assert_eq!(a.nnet.params.flat_grads(), b.nnet.params.flat_grads());
    }

    #[test]
    fn toy_training_is_deterministic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<Image2D> = (0..3).map(|s| noisy_image(32, 32, s)).collect();
        let cfg = small_config();
        let run = |name: &str| {
            let out = TrainOutputs {
                checkpoint: Some(dir.path().join(format!("{name}.ckpt"))),
                log: Some(dir.path().join(format!("{name}.log"))),
            };
            train(&cfg, &data, &out).unwrap();
            out
        };
        let a = run("a");
        let b = run("b");
        let ba = std::fs::read(a.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ba, std::fs::read(b.checkpoint.as_ref().unwrap()).unwrap());
        let loaded = checkpoint::load(a.checkpoint.as_ref().unwrap()).unwrap();
        assert!(loaded.normalization.is_some());
        assert_eq!(loaded.provenance.epochs, 2);
        let log = std::fs::read_to_string(a.log.as_ref().unwrap()).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.lines().all(|l| l.split('\t').count() == 3));
    }

    #[test]
    fn training_rejects_small_images_before_starting() {
        let cfg = small_config();
        let err = train(&cfg, &[noisy_image(8, 8, 0)], &TrainOutputs::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(train(&cfg, &[], &TrainOutputs::default()).is_err());
    }
}
