//! Minimal reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] records every operation of a forward pass against a borrowed
//! [`ParamSet`]; [`Tape::backward`] then accumulates parameter gradients for
//! a scalar node. Only the handful of layer types the agent needs exist.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter tensors, row-major.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name, shape, data });
        self.tensors.len() - 1
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| &t.data).map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flat_map(|t| &t.data).all(|v| v.is_finite())
    }

    /// Visits every scalar parameter in a fixed order.
    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flat_map(|g| g.iter().copied())
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= k);
    }

    pub fn add_scaled(&mut self, other: &Grads, k: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        // Uniform fan-in initialisation scaled by `gain`.
        let bound = gain * (3.0 / inputs.max(1) as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| if bound == 0.0 { 0.0 } else { rng.random_range(-bound..bound) })
            .collect();
        let w = params.add(format!("{name}/w"), vec![outputs, inputs], w);
        let b = params.add(format!("{name}/b"), vec![outputs], vec![0.0; outputs]);
        Linear { w, b, inputs, outputs }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = params.add(format!("{name}/gain"), vec![dim], vec![1.0; dim]);
        let bias = params.add(format!("{name}/bias"), vec![dim], vec![0.0; dim]);
        LayerNorm { gain, bias }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Linear { x: Var, layer: Linear },
    /// Column `index` of a weight matrix plus bias; a linear layer applied to
    /// a one-hot input.
    Embed { layer: Linear, index: usize },
    Add(Var, Var),
    Relu(Var),
    Tanh(Var),
    LayerNorm { x: Var, ln: LayerNorm, inv_std: f64 },
    /// Cross-entropy of softmax(logits) against a target distribution. The
    /// cache holds the softmax probabilities.
    SoftmaxXent { logits: Var, target: Vec<f64> },
    /// Mean pinball loss of quantile estimates against a scalar target at
    /// levels τ_i = (i − ½) / n.
    Pinball { q: Var, target: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    op: Op,
    value: Vec<f64>,
    cache: Vec<f64>,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>, cache: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value, cache });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, id: usize) -> &'p [f64] {
        &self.params.tensors[id].data
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Input, value, Vec::new())
    }

    pub fn linear(&mut self, x: Var, layer: Linear) -> Var {
        let w = self.data(layer.w);
        let b = self.data(layer.b);
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(xv.len(), layer.inputs);
        let out = (0..layer.outputs)
            .map(|o| {
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                b[o] + row.iter().zip(xv).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        self.push(Op::Linear { x, layer }, out, Vec::new())
    }

    pub fn embed(&mut self, layer: Linear, index: usize) -> Var {
        let w = self.data(layer.w);
        let b = self.data(layer.b);
        let out = (0..layer.outputs)
            .map(|o| w[o * layer.inputs + index] + b[o])
            .collect();
        self.push(Op::Embed { layer, index }, out, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), out, Vec::new())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu(x), out, Vec::new())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), out, Vec::new())
    }

    pub fn layer_norm(&mut self, x: Var, ln: LayerNorm) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.len() as f64;
        let mean = xv.iter().sum::<f64>() / n;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = xv.iter().map(|v| (v - mean) * inv_std).collect();
        let g = self.data(ln.gain);
        let b = self.data(ln.bias);
        let out = xhat.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b).collect();
        self.push(Op::LayerNorm { x, ln, inv_std }, out, xhat)
    }

    pub fn softmax_xent(&mut self, logits: Var, target: Vec<f64>) -> Var {
        let probs = softmax(&self.nodes[logits.0].value);
        let loss: f64 = target
            .iter()
            .zip(&probs)
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, p)| -t * p.max(f64::MIN_POSITIVE).ln())
            .sum();
        // Exact log-softmax when probabilities underflow.
        let loss = if loss.is_finite() {
            loss
        } else {
            let lse = log_sum_exp(&self.nodes[logits.0].value);
            target
                .iter()
                .zip(&self.nodes[logits.0].value)
                .map(|(t, z)| -t * (z - lse))
                .sum()
        };
        self.push(Op::SoftmaxXent { logits, target }, vec![loss], probs)
    }

    pub fn pinball(&mut self, q: Var, target: f64) -> Var {
        let qv = &self.nodes[q.0].value;
        let loss = pinball_loss(qv, target);
        self.push(Op::Pinball { q, target }, vec![loss], Vec::new())
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total = terms.iter().map(|(v, w)| w * self.nodes[v.0].value[0]).sum();
        self.push(Op::WeightedSum(terms), vec![total], Vec::new())
    }

    /// Accumulates d(root)/d(params) into `grads`.
    pub fn backward(&self, root: Var, grads: &mut Grads) {
        let mut adj: Vec<Vec<f64>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, Vec::new);
        adj[root.0] = vec![1.0];
        fn acc(slot: &mut Vec<f64>, len: usize) -> &mut Vec<f64> {
            if slot.is_empty() {
                slot.resize(len, 0.0);
            }
            slot
        }
        for i in (0..=root.0).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Linear { x, layer } => {
                    let w = self.data(layer.w);
                    let xv = &self.nodes[x.0].value;
                    let gw = &mut grads.0[layer.w];
                    for (o, go) in g.iter().enumerate() {
                        if *go == 0.0 {
                            continue;
                        }
                        let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                        for (r, xi) in row.iter_mut().zip(xv) {
                            *r += go * xi;
                        }
                    }
                    for (b, go) in grads.0[layer.b].iter_mut().zip(&g) {
                        *b += go;
                    }
                    let gx = acc(&mut adj[x.0], layer.inputs);
                    for (o, go) in g.iter().enumerate() {
                        if *go == 0.0 {
                            continue;
                        }
                        let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                        for (gxi, wi) in gx.iter_mut().zip(row) {
                            *gxi += go * wi;
                        }
                    }
                }
                Op::Embed { layer, index } => {
                    let gw = &mut grads.0[layer.w];
                    for (o, go) in g.iter().enumerate() {
                        gw[o * layer.inputs + index] += go;
                    }
                    for (b, go) in grads.0[layer.b].iter_mut().zip(&g) {
                        *b += go;
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let ga = acc(&mut adj[v.0], g.len());
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = acc(&mut adj[x.0], g.len());
                    for ((a, go), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if *xi > 0.0 {
                            *a += go;
                        }
                    }
                }
                Op::Tanh(x) => {
                    let gx = acc(&mut adj[x.0], g.len());
                    for ((a, go), y) in gx.iter_mut().zip(&g).zip(&node.value) {
                        *a += go * (1.0 - y * y);
                    }
                }
                Op::LayerNorm { x, ln, inv_std } => {
                    let xhat = &node.cache;
                    let gain = self.data(ln.gain);
                    let n = g.len() as f64;
                    let dxhat: Vec<f64> = g.iter().zip(gain).map(|(go, gm)| go * gm).collect();
                    for ((gg, go), h) in grads.0[ln.gain].iter_mut().zip(&g).zip(xhat) {
                        *gg += go * h;
                    }
                    for (gb, go) in grads.0[ln.bias].iter_mut().zip(&g) {
                        *gb += go;
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dh = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum::<f64>() / n;
                    let gx = acc(&mut adj[x.0], g.len());
                    for ((a, d), h) in gx.iter_mut().zip(&dxhat).zip(xhat) {
                        *a += inv_std * (d - mean_d - h * mean_dh);
                    }
                }
                Op::SoftmaxXent { logits, target } => {
                    let probs = &node.cache;
                    let mass: f64 = target.iter().sum();
                    let gx = acc(&mut adj[logits.0], probs.len());
                    for ((a, p), t) in gx.iter_mut().zip(probs).zip(target) {
                        *a += g[0] * (mass * p - t);
                    }
                }
                Op::Pinball { q, target } => {
                    let qv = &self.nodes[q.0].value;
                    let n = qv.len() as f64;
                    let gq = acc(&mut adj[q.0], qv.len());
                    for (i, (a, qi)) in gq.iter_mut().zip(qv).enumerate() {
                        let tau = (i as f64 + 0.5) / n;
                        // d/dq of ρ_τ(target − q)
                        let d = if target - qi < 0.0 { 1.0 - tau } else { -tau };
                        *a += g[0] * d / n;
                    }
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        acc(&mut adj[v.0], 1)[0] += g[0] * w;
                    }
                }
            }
        }
    }

    /// Which side of every non-differentiable point each ReLU input and
    /// pinball residual lies on. Two forward passes with equal patterns are
    /// in the same smooth piece of the loss.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.nodes[x.0].value.iter().map(|v| *v > 0.0)),
                Op::Pinball { q, target } => {
                    out.extend(self.nodes[q.0].value.iter().map(|v| target - v < 0.0))
                }
                _ => {}
            }
        }
        out
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Quantile level of head output `i` out of `n`.
pub fn quantile_level(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Mean pinball loss `ρ_τ(u) = u · (τ − 1[u < 0])`, `u = target − q_i`.
pub fn pinball_loss(quantiles: &[f64], target: f64) -> f64 {
    let n = quantiles.len();
    quantiles
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let u = target - q;
            let tau = quantile_level(i, n);
            u * (tau - if u < 0.0 { 1.0 } else { 0.0 })
        })
        .sum::<f64>()
        / n as f64
}
