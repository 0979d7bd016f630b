//! Per-pixel noise network built from 1x1 convolutions.

use rand::Rng;

use super::dnet::check_layout;
use super::graph::{Graph, Trace};
use super::he_uniform;
use crate::error::{Error, Result};
use crate::noise_model::{center_mixture, MAX_COMPONENTS};
use crate::ops::Activation;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NNetConfig {
    pub components: usize,
    pub hidden_filters: usize,
    pub blocks: usize,
}

impl Default for NNetConfig {
    fn default() -> Self {
        Self {
            components: 1,
            hidden_filters: 64,
            blocks: 3,
        }
    }
}

impl NNetConfig {
    pub fn with_components(components: usize) -> Self {
        Self {
            components,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_COMPONENTS).contains(&self.components) {
            return Err(Error::Config(format!(
                "mixture components must be in 1..={MAX_COMPONENTS}, got {}",
                self.components
            )));
        }
        if self.blocks < 1 || self.hidden_filters < 1 {
            return Err(Error::Config("nnet needs at least one block and one filter".into()));
        }
        Ok(())
    }
}

/// Graph nodes holding the head activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    /// `N` channels after `exp`.
    pub stds: usize,
    /// `N` channels after softmax, or one sigmoid channel when `N = 2`.
    pub weights: Option<usize>,
    /// `N - 1` linear channels.
    pub means: Option<usize>,
}

/// Per-pixel mixture parameters in component-major layout
/// (`weights[k * pixels + p]`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseParams<T> {
    pub components: usize,
    pub pixels: usize,
    pub weights: Vec<T>,
    pub means: Vec<T>,
    pub stds: Vec<T>,
    /// Pixels where the last weight had to be clamped for centering.
    pub degenerate: usize,
}

impl<T: Scalar> NoiseParams<T> {
    pub fn weight(&self, k: usize, p: usize) -> T {
        self.weights[k * self.pixels + p]
    }
    pub fn mean(&self, k: usize, p: usize) -> T {
        self.means[k * self.pixels + p]
    }
    pub fn std(&self, k: usize, p: usize) -> T {
        self.stds[k * self.pixels + p]
    }

    /// Mixture at pixel `p` in `f64`.
    pub fn mixture(&self, p: usize) -> crate::noise_model::Mixture {
        let n = self.components;
        crate::noise_model::Mixture {
            weights: (0..n).map(|k| self.weight(k, p).f64()).collect(),
            means: (0..n).map(|k| self.mean(k, p).f64()).collect(),
            stds: (0..n).map(|k| self.std(k, p).f64()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.means)
            .chain(&self.stds)
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct NNet<T> {
    pub config: NNetConfig,
    pub params: ParamSet<T>,
    graph: Graph,
    heads: Heads,
}

fn hidden_act(layer: usize) -> Activation {
    if layer.is_multiple_of(2) {
        Activation::Tanh
    } else {
        Activation::LeakyRelu
    }
}

fn build_graph<T: Scalar>(
    config: &NNetConfig,
    init: &mut impl FnMut(usize) -> T,
    head_init: &mut impl FnMut(usize) -> T,
) -> Result<(Graph, ParamSet<T>, Heads)> {
    config.validate()?;
    let h = config.hidden_filters;
    let mut g = Graph::new();
    let mut p = ParamSet::new();
    let mut block = |g: &mut Graph, p: &mut ParamSet<T>, name: &str, src: usize, c_in: usize| -> Result<usize> {
        let a = g.conv(p, &format!("{name}.0"), src, c_in, h, 1, hidden_act(0), init)?;
        g.conv(p, &format!("{name}.1"), a, h, h, 1, hidden_act(1), init)
    };
    let n = config.components;
    let heads = if n == 1 {
        let mut x = 0;
        let mut c = 1;
        for b in 0..config.blocks {
            x = block(&mut g, &mut p, &format!("block{b}"), x, c)?;
            c = h;
        }
        let stds = g.conv(&mut p, "head.std", x, h, 1, 1, Activation::Exp, head_init)?;
        Heads {
            stds,
            weights: None,
            means: None,
        }
    } else {
        // shared trunk of `blocks - 1`, then one final block per head
        let mut x = 0;
        let mut c = 1;
        for b in 0..config.blocks - 1 {
            x = block(&mut g, &mut p, &format!("block{b}"), x, c)?;
            c = h;
        }
        let bs = block(&mut g, &mut p, "std_block", x, c)?;
        let bw = block(&mut g, &mut p, "weight_block", x, c)?;
        let bm = block(&mut g, &mut p, "mean_block", x, c)?;
        let stds = g.conv(&mut p, "head.std", bs, h, n, 1, Activation::Exp, head_init)?;
        let weights = if n == 2 {
            g.conv(&mut p, "head.weight", bw, h, 1, 1, Activation::Sigmoid, head_init)?
        } else {
            g.conv(&mut p, "head.weight", bw, h, n, 1, Activation::SoftmaxChannels, head_init)?
        };
        let means = g.conv(&mut p, "head.mean", bm, h, n - 1, 1, Activation::Linear, head_init)?;
        Heads {
            stds,
            weights: Some(weights),
            means: Some(means),
        }
    };
    Ok((g, p, heads))
}

/// Head-output gradients for one forward trace, laid out like the heads.
pub struct HeadGrads<T> {
    pub stds: Tensor4<T>,
    pub weights: Option<Tensor4<T>>,
    pub means: Option<Tensor4<T>>,
}

impl<T: Scalar> NNet<T> {
    pub fn build(config: NNetConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build_with_head_scale(config, rng, 0.1)
    }

    /// Builds with head weights scaled by `head_scale` relative to He init
    /// (0 gives all-zero heads).
    pub fn build_with_head_scale(config: NNetConfig, rng: &mut impl Rng, head_scale: f64) -> Result<Self> {
        let (graph, mut params, heads) = build_graph::<T>(&config, &mut |_| T::zero(), &mut |_| T::zero())?;
        for prm in params.iter_mut() {
            if prm.name.ends_with(".w") {
                let head = prm.name.starts_with("head.");
                let fan_in = prm.value.shape()[1];
                for v in prm.value.data_mut() {
                    let w = he_uniform(rng, fan_in);
                    *v = T::c(if head { w * head_scale } else { w });
                }
            }
        }
        Ok(Self {
            config,
            params,
            graph,
            heads,
        })
    }

    pub fn from_params(config: NNetConfig, params: ParamSet<T>) -> Result<Self> {
        let (graph, template, heads) = build_graph::<T>(&config, &mut |_| T::zero(), &mut |_| T::zero())?;
        check_layout(&template, &params)?;
        Ok(Self {
            config,
            params,
            graph,
            heads,
        })
    }

    pub fn cast<U: Scalar>(&self) -> NNet<U> {
        NNet {
            config: self.config.clone(),
            params: self.params.cast(),
            graph: self.graph.clone(),
            heads: self.heads,
        }
    }

    pub fn heads(&self) -> Heads {
        self.heads
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != 1 {
            return Err(Error::Shape(format!("nnet input must have one channel, got {:?}", x.shape())));
        }
        Ok(())
    }

    pub fn forward_trace(&self, x: Tensor4<T>) -> Result<Trace<T>> {
        self.check_input(&x)?;
        self.graph.forward(&self.params, x)
    }

    /// Noise parameters for every pixel of `denoised`.
    pub fn forward(&self, denoised: &Tensor4<T>) -> Result<NoiseParams<T>> {
        self.check_input(denoised)?;
        let mut outs = vec![self.heads.stds];
        outs.extend(self.heads.weights);
        outs.extend(self.heads.means);
        let vals = self.graph.forward_outputs(&self.params, denoised.clone(), &outs)?;
        let mut it = vals.into_iter();
        let stds = it.next().expect("std head");
        let weights = self.heads.weights.map(|_| it.next().expect("weight head"));
        let means = self.heads.means.map(|_| it.next().expect("mean head"));
        let np = self.assemble(&stds, weights.as_ref(), means.as_ref());
        if !np.all_finite() {
            return Err(Error::Numerical("noise network produced non-finite parameters".into()));
        }
        Ok(np)
    }

    /// Converts a trace into [`NoiseParams`].
    pub fn params_from_trace(&self, trace: &Trace<T>) -> NoiseParams<T> {
        let stds = trace.value(self.heads.stds);
        let weights = self.heads.weights.map(|n| trace.value(n));
        let means = self.heads.means.map(|n| trace.value(n));
        self.assemble(stds, weights, means)
    }

    fn assemble(&self, stds: &Tensor4<T>, weights: Option<&Tensor4<T>>, means: Option<&Tensor4<T>>) -> NoiseParams<T> {
        let n = self.config.components;
        let pixels = stds.len() / n;
        let layout = |t: &Tensor4<T>| -> Vec<T> {
            // (batch, ch, h, w) -> component-major over all batch pixels
            let ch = t.channels();
            let plane = t.plane_len();
            let mut out = vec![T::zero(); t.len()];
            let total = t.batch() * plane;
            for b in 0..t.batch() {
                for c in 0..ch {
                    out[c * total + b * plane..c * total + (b + 1) * plane].copy_from_slice(t.plane(b, c));
                }
            }
            out
        };
        let std_v = layout(stds);
        let mut w = vec![T::one(); n * pixels];
        if let Some(wt) = weights {
            let raw = layout(wt);
            if n == 2 {
                for p in 0..pixels {
                    w[p] = raw[p];
                    w[pixels + p] = T::one() - raw[p];
                }
            } else {
                w = raw;
            }
        }
        let mut m = vec![T::zero(); n * pixels];
        let mut degenerate = 0;
        if let Some(mt) = means {
            let free = layout(mt);
            m[..(n - 1) * pixels].copy_from_slice(&free);
            let mut wk = [T::zero(); MAX_COMPONENTS];
            let mut fk = [T::zero(); MAX_COMPONENTS];
            for p in 0..pixels {
                for k in 0..n {
                    wk[k] = w[k * pixels + p];
                }
                for k in 0..n - 1 {
                    fk[k] = free[k * pixels + p];
                }
                let c = center_mixture(&wk[..n], &fk[..n - 1]);
                degenerate += c.clamped as usize;
                m[(n - 1) * pixels + p] = c.value;
            }
        }
        NoiseParams {
            components: n,
            pixels,
            weights: w,
            means: m,
            stds: std_v,
            degenerate,
        }
    }

    /// Allocates zero gradients shaped like the head outputs of `trace`.
    pub fn zero_head_grads(&self, trace: &Trace<T>) -> HeadGrads<T> {
        HeadGrads {
            stds: Tensor4::zeros(trace.value(self.heads.stds).shape()),
            weights: self.heads.weights.map(|n| Tensor4::zeros(trace.value(n).shape())),
            means: self.heads.means.map(|n| Tensor4::zeros(trace.value(n).shape())),
        }
    }

    /// Backpropagates head gradients, returning `dL/dinput` when asked.
    pub fn backward(&mut self, trace: &Trace<T>, grads: HeadGrads<T>, want_input_grad: bool) -> Result<Option<Tensor4<T>>> {
        let mut seeds = vec![(self.heads.stds, grads.stds)];
        if let (Some(n), Some(g)) = (self.heads.weights, grads.weights) {
            seeds.push((n, g));
        }
        if let (Some(n), Some(g)) = (self.heads.means, grads.means) {
            seeds.push((n, g));
        }
        self.graph.backward(&mut self.params, trace, seeds, want_input_grad)
    }
}
