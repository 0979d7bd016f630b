//! U-net shaped denoiser.

use rand::Rng;

use super::graph::{Graph, Trace};
use super::he_uniform;
use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Architecture of the denoiser.
///
/// The defaults give a measured receptive field of 35x35 pixels: one 3x3
/// stem convolution, one 3x3 convolution per encoder and decoder block, one
/// bottleneck convolution, and expansions made of nearest-neighbour
/// upsampling followed by a 2x2 convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DNetConfig {
    pub base_filters: usize,
    pub levels: usize,
    /// Full-resolution 3x3 convolutions applied to the input image.
    pub stem_convs: usize,
    pub convs_per_block: usize,
    pub bottleneck_convs: usize,
    pub tail_1x1_layers: usize,
    /// Width of the 1x1 tail layers.
    pub tail_filters: usize,
}

impl Default for DNetConfig {
    fn default() -> Self {
        Self {
            base_filters: 64,
            levels: 2,
            stem_convs: 1,
            convs_per_block: 1,
            bottleneck_convs: 1,
            tail_1x1_layers: 2,
            tail_filters: 64,
        }
    }
}

impl DNetConfig {
    pub fn with_filters(filters: usize) -> Self {
        Self {
            base_filters: filters,
            tail_filters: filters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_filters < 1 || self.tail_filters < 1 {
            return Err(Error::Config("dnet needs levels >= 1 and positive filter counts".into()));
        }
        if self.stem_convs + self.convs_per_block == 0 {
            return Err(Error::Config("dnet needs at least one full-resolution convolution".into()));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    /// Analytic receptive-field radius: the largest Chebyshev distance at
    /// which an input pixel can influence an output pixel. Obtained by
    /// propagating dependency intervals through one image row.
    pub fn receptive_radius(&self) -> usize {
        let width = 64 * self.divisor() + 128;
        // each entry: (min, max) input index the feature depends on
        type Span = Vec<(isize, isize)>;
        let conv = |m: &Span, k: usize| -> Span {
            let before = ((k - 1) / 2) as isize;
            (0..m.len() as isize)
                .map(|i| {
                    let lo = (i - before).max(0) as usize;
                    let hi = ((i - before + k as isize - 1).min(m.len() as isize - 1)) as usize;
                    (m[lo].0, m[hi].1)
                })
                .collect()
        };
        let pool = |m: &Span| -> Span { (0..m.len() / 2).map(|i| (m[2 * i].0, m[2 * i + 1].1)).collect() };
        let up = |m: &Span| -> Span { (0..2 * m.len()).map(|j| m[j / 2]).collect() };
        let cat = |a: &Span, b: &Span| -> Span { a.iter().zip(b).map(|(x, y)| (x.0.min(y.0), x.1.max(y.1))).collect() };

        let mut x: Span = (0..width as isize).map(|i| (i, i)).collect();
        for _ in 0..self.stem_convs {
            x = conv(&x, 3);
        }
        let mut skips = Vec::new();
        for _ in 0..self.levels {
            for _ in 0..self.convs_per_block {
                x = conv(&x, 3);
            }
            skips.push(x.clone());
            x = pool(&x);
        }
        for _ in 0..self.bottleneck_convs {
            x = conv(&x, 3);
        }
        for skip in skips.iter().rev() {
            x = conv(&up(&x), 2);
            x = cat(&x, skip);
            for _ in 0..self.convs_per_block {
                x = conv(&x, 3);
            }
        }
        // interior pixels only, away from zero-padding truncation
        let margin = width / 4;
        (margin..width - margin)
            .map(|i| {
                let (lo, hi) = x[i];
                (i as isize - lo).max(hi - i as isize) as usize
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct DNet<T> {
    pub config: DNetConfig,
    pub params: ParamSet<T>,
    graph: Graph,
}

/// Builds the graph, drawing weights with `init(fan_in)`.
fn build_graph<T: Scalar>(config: &DNetConfig, init: &mut impl FnMut(usize) -> T) -> Result<(Graph, ParamSet<T>)> {
    config.validate()?;
    let relu = Activation::Relu;
    let f = config.base_filters;
    let mut g = Graph::new();
    let mut p = ParamSet::new();
    let mut x = 0usize;
    let mut ch = 1usize;
    for i in 0..config.stem_convs {
        x = g.conv(&mut p, &format!("stem{i}"), x, ch, f, 3, relu, init)?;
        ch = f;
    }
    let mut skips = Vec::new();
    for level in 0..config.levels {
        let width = f << level;
        for i in 0..config.convs_per_block {
            x = g.conv(&mut p, &format!("enc{level}.{i}"), x, ch, width, 3, relu, init)?;
            ch = width;
        }
        skips.push((x, ch));
        x = g.pool(x);
    }
    let width = f << config.levels;
    for i in 0..config.bottleneck_convs {
        x = g.conv(&mut p, &format!("bottleneck.{i}"), x, ch, width, 3, relu, init)?;
        ch = width;
    }
    for level in (0..config.levels).rev() {
        let (skip, skip_ch) = skips[level];
        let width = f << level;
        x = g.upsample(x);
        x = g.conv(&mut p, &format!("up{level}"), x, ch, width, 2, relu, init)?;
        x = g.concat(x, skip);
        ch = width + skip_ch;
        for i in 0..config.convs_per_block {
            x = g.conv(&mut p, &format!("dec{level}.{i}"), x, ch, width, 3, relu, init)?;
            ch = width;
        }
    }
    for i in 0..config.tail_1x1_layers {
        x = g.conv(&mut p, &format!("tail{i}"), x, ch, config.tail_filters, 1, relu, init)?;
        ch = config.tail_filters;
    }
    g.conv(&mut p, "out", x, ch, 1, 1, Activation::Linear, init)?;
    Ok((g, p))
}

impl<T: Scalar> DNet<T> {
    /// Fresh network with He-uniform weights and zero biases.
    pub fn build(config: DNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut init = |fan_in| T::c(he_uniform(rng, fan_in));
        let (graph, params) = build_graph(&config, &mut init)?;
        Ok(Self { config, params, graph })
    }

    /// Rebuilds the graph around an existing parameter set (checkpoint load).
    pub fn from_params(config: DNetConfig, params: ParamSet<T>) -> Result<Self> {
        let (graph, template) = build_graph::<T>(&config, &mut |_| T::zero())?;
        check_layout(&template, &params)?;
        Ok(Self { config, params, graph })
    }

    pub fn cast<U: Scalar>(&self) -> DNet<U> {
        DNet {
            config: self.config.clone(),
            params: self.params.cast(),
            graph: self.graph.clone(),
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let d = self.config.divisor();
        if x.channels() != 1 || !x.height().is_multiple_of(d) || !x.width().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "dnet input must be single-channel with dims divisible by {d}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Denoised output, without keeping activations.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let last = self.graph.last();
        Ok(self.graph.forward_outputs(&self.params, x.clone(), &[last])?.remove(0))
    }

    /// Forward pass keeping activations for [`DNet::backward`].
    pub fn forward_trace(&self, x: Tensor4<T>) -> Result<Trace<T>> {
        self.check_input(&x)?;
        self.graph.forward(&self.params, x)
    }

    pub fn output<'a>(&self, trace: &'a Trace<T>) -> &'a Tensor4<T> {
        trace.value(self.graph.last())
    }

    /// Accumulates parameter gradients for `dL/doutput`.
    pub fn backward(&mut self, trace: &Trace<T>, grad_out: Tensor4<T>, want_input_grad: bool) -> Result<Option<Tensor4<T>>> {
        let last = self.graph.last();
        self.graph
            .backward(&mut self.params, trace, vec![(last, grad_out)], want_input_grad)
    }
}

pub(crate) fn check_layout<T: Scalar>(template: &ParamSet<T>, params: &ParamSet<T>) -> Result<()> {
    if template.len() != params.len() {
        return Err(Error::Config(format!(
            "expected {} parameter tensors, found {}",
            template.len(),
            params.len()
        )));
    }
    for (a, b) in template.iter().zip(params.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(Error::Config(format!(
                "parameter mismatch: expected `{}` {:?}, found `{}` {:?}",
                a.name,
                a.value.shape(),
                b.name,
                b.value.shape()
            )));
        }
    }
    Ok(())
}
