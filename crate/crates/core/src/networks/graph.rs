//! Static layer graph with a reverse-mode backward pass.
//!
//! Nodes are stored in topological order; node 0 is the graph input.

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Padding};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Input,
    Conv {
        src: usize,
        weight: ParamId,
        bias: ParamId,
        pad: Padding,
        act: Activation,
    },
    Pool {
        src: usize,
    },
    Upsample {
        src: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
}

impl Node {
    fn sources(&self) -> Vec<usize> {
        match *self {
            Node::Input => vec![],
            Node::Conv { src, .. } | Node::Pool { src } | Node::Upsample { src } => vec![src],
            Node::Concat { a, b } => vec![a, b],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Forward activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    values: Vec<Tensor4<T>>,
    argmax: Vec<Vec<u32>>,
}

impl<T: Scalar> Trace<T> {
    pub fn value(&self, node: usize) -> &Tensor4<T> {
        &self.values[node]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: vec![Node::Input],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn last(&self) -> usize {
        self.nodes.len() - 1
    }

    fn push(&mut self, node: Node) -> usize {
        debug_assert!(node.sources().iter().all(|&s| s < self.nodes.len()));
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Adds a convolution whose weight/bias live in `params` under
    /// `<name>.w` / `<name>.b`, initialised with `init`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv<T: Scalar>(
        &mut self,
        params: &mut ParamSet<T>,
        name: &str,
        src: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        act: Activation,
        init: &mut impl FnMut(usize) -> T,
    ) -> Result<usize> {
        let fan_in = c_in * k * k;
        let mut w = Tensor4::zeros([c_out, c_in, k, k]);
        w.data_mut().iter_mut().for_each(|v| *v = init(fan_in));
        let weight = params.insert(format!("{name}.w"), w)?;
        let bias = params.insert(format!("{name}.b"), Tensor4::zeros([1, 1, 1, c_out]))?;
        Ok(self.push(Node::Conv {
            src,
            weight,
            bias,
            pad: Padding::same(k),
            act,
        }))
    }

    pub fn pool(&mut self, src: usize) -> usize {
        self.push(Node::Pool { src })
    }

    pub fn upsample(&mut self, src: usize) -> usize {
        self.push(Node::Upsample { src })
    }

    pub fn concat(&mut self, a: usize, b: usize) -> usize {
        self.push(Node::Concat { a, b })
    }

    fn eval_node<T: Scalar>(
        &self,
        i: usize,
        params: &ParamSet<T>,
        values: &[Option<Tensor4<T>>],
    ) -> Result<(Tensor4<T>, Vec<u32>)> {
        let get = |j: usize| values[j].as_ref().expect("graph value already released");
        Ok(match self.nodes[i] {
            Node::Input => unreachable!("input is seeded"),
            Node::Conv {
                src,
                weight,
                bias,
                pad,
                act,
            } => {
                let mut y = ops::conv2d(get(src), &params.get(weight).value, params.get(bias).value.data(), pad)?;
                act.apply(&mut y)?;
                (y, Vec::new())
            }
            Node::Pool { src } => ops::pool2(get(src))?,
            Node::Upsample { src } => (ops::upsample_nearest(get(src), 2)?, Vec::new()),
            Node::Concat { a, b } => (ops::concat_channels(get(a), get(b))?, Vec::new()),
        })
    }

    /// Full forward pass keeping every activation.
    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, input: Tensor4<T>) -> Result<Trace<T>> {
        let mut values: Vec<Option<Tensor4<T>>> = Vec::with_capacity(self.nodes.len());
        let mut argmax = Vec::with_capacity(self.nodes.len());
        values.push(Some(input));
        argmax.push(Vec::new());
        for i in 1..self.nodes.len() {
            let (v, a) = self.eval_node(i, params, &values)?;
            values.push(Some(v));
            argmax.push(a);
        }
        Ok(Trace {
            values: values.into_iter().map(|v| v.expect("all values kept")).collect(),
            argmax,
        })
    }

    /// Forward pass that frees activations after their last use and returns
    /// only the requested node outputs.
    pub fn forward_outputs<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        input: Tensor4<T>,
        outputs: &[usize],
    ) -> Result<Vec<Tensor4<T>>> {
        let n = self.nodes.len();
        let mut last_use = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            for s in node.sources() {
                last_use[s] = last_use[s].max(i);
            }
        }
        for &o in outputs {
            last_use[o] = usize::MAX;
        }
        let mut values: Vec<Option<Tensor4<T>>> = vec![None; n];
        values[0] = Some(input);
        for i in 1..n {
            let (v, _) = self.eval_node(i, params, &values)?;
            values[i] = Some(v);
            for s in self.nodes[i].sources() {
                if last_use[s] == i {
                    values[s] = None;
                }
            }
        }
        outputs
            .iter()
            .map(|&o| values[o].clone().ok_or_else(|| Error::Shape(format!("node {o} not produced"))))
            .collect()
    }

    /// Backpropagates `seeds` (node, dL/d node-output) through the graph,
    /// accumulating parameter gradients into `params`. Returns the gradient
    /// with respect to the graph input when `want_input_grad` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        trace: &Trace<T>,
        seeds: Vec<(usize, Tensor4<T>)>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor4<T>>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; n];
        for (node, g) in seeds {
            if g.shape() != trace.values[node].shape() {
                return Err(Error::Shape(format!("seed gradient shape mismatch at node {node}")));
            }
            match &mut grads[node] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        let needs = |src: usize| src != 0 || want_input_grad;
        for i in (1..n).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            match self.nodes[i] {
                Node::Input => unreachable!(),
                Node::Conv {
                    src,
                    weight,
                    bias,
                    pad,
                    act,
                } => {
                    act.backward_in_place(&trace.values[i], &mut g);
                    let mut gb = vec![T::zero(); params.get(bias).value.len()];
                    let mut gsrc = needs(src).then(|| {
                        grads[src]
                            .take()
                            .unwrap_or_else(|| Tensor4::zeros(trace.values[src].shape()))
                    });
                    {
                        let p = params.get_mut(weight);
                        ops::conv2d_backward(
                            &trace.values[src],
                            &p.value,
                            &g,
                            pad,
                            p.grad.data_mut(),
                            &mut gb,
                            gsrc.as_mut(),
                        )?;
                    }
                    for (d, s) in params.get_mut(bias).grad.data_mut().iter_mut().zip(gb) {
                        *d += s;
                    }
                    if let Some(gs) = gsrc {
                        grads[src] = Some(gs);
                    }
                }
                Node::Pool { src } => {
                    if needs(src) {
                        let gs = grads[src].get_or_insert_with(|| Tensor4::zeros(trace.values[src].shape()));
                        ops::pool2_backward(&g, &trace.argmax[i], gs);
                    }
                }
                Node::Upsample { src } => {
                    if needs(src) {
                        let gs = grads[src].get_or_insert_with(|| Tensor4::zeros(trace.values[src].shape()));
                        ops::upsample_nearest_backward(&g, gs);
                    }
                }
                Node::Concat { a, b } => {
                    let mut ga = grads[a]
                        .take()
                        .unwrap_or_else(|| Tensor4::zeros(trace.values[a].shape()));
                    let mut gb = grads[b]
                        .take()
                        .unwrap_or_else(|| Tensor4::zeros(trace.values[b].shape()));
                    ops::concat_channels_backward(&g, &mut ga, &mut gb);
                    if needs(a) {
                        grads[a] = Some(ga);
                    }
                    if needs(b) {
                        grads[b] = Some(gb);
                    }
                }
            }
        }
        Ok(if want_input_grad {
            Some(grads[0].take().unwrap_or_else(|| Tensor4::zeros(trace.values[0].shape())))
        } else {
            None
        })
    }
}
