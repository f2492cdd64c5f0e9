//! Invertible map from data space to the latent cube.
//!
//! A flow is a stack of additive coupling layers, an optional diagonal
//! scaling layer and an optional sigmoid output layer. `forward` maps data `x`
//! to latent `z` and returns `ln |det ∂z/∂x|` per point.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, logit, sigmoid, Array, Tape, Var};
use crate::error::{contract, domain, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(0.0),
        }
    }

    fn on_tape(self, v: Var<'_>) -> Var<'_> {
        match self {
            Self::Tanh => v.tanh(),
            Self::Relu => v.relu(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub coupling_layers: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub scaling: bool,
    pub sigmoid: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            coupling_layers: 4,
            hidden: vec![50, 50],
            activation: Activation::Tanh,
            scaling: true,
            sigmoid: true,
        }
    }
}

impl FlowConfig {
    /// No layers at all: `z = x`.
    pub fn identity() -> Self {
        Self {
            coupling_layers: 0,
            hidden: vec![],
            activation: Activation::Tanh,
            scaling: false,
            sigmoid: false,
        }
    }

    /// Only the parameter-free sigmoid layer.
    pub fn sigmoid_only() -> Self {
        Self {
            sigmoid: true,
            ..Self::identity()
        }
    }
}

/// Fully connected network; `weights[k]` is `[in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    weights: Vec<Array>,
    biases: Vec<Array>,
    activation: Activation,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases, and an all-zero output layer.
    fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        let last = widths.len() - 2;
        let (weights, biases) = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (i, o) = (w[0], w[1]);
                let a = (6.0 / (i + o) as f64).sqrt();
                let data = if k == last {
                    vec![0.0; i * o]
                } else {
                    (0..i * o).map(|_| rng.random_range(-a..a)).collect()
                };
                (Array::matrix(i, o, data).expect("sizes match"), Array::zeros(&[o]))
            })
            .unzip();
        Self {
            weights,
            biases,
            activation,
        }
    }

    fn forward(&self, x: &Array) -> Result<Array> {
        let mut h = x.clone();
        let n = self.weights.len();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w)?;
            let m = b.len();
            for (j, v) in h.data_mut().iter_mut().enumerate() {
                *v += b.data()[j % m];
                if k + 1 < n {
                    *v = self.activation.apply(*v);
                }
            }
        }
        Ok(h)
    }

    fn forward_on_tape<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let n = self.weights.len();
        let mut h = x;
        for k in 0..n {
            h = h.matmul(params[2 * k])?.add_row(params[2 * k + 1])?;
            if k + 1 < n {
                h = self.activation.on_tape(h);
            }
        }
        Ok(h)
    }

    fn param_len(&self) -> usize {
        2 * self.weights.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    /// Coordinates with `i % 2 == parity` pass through unchanged.
    parity: usize,
    net: Mlp,
}

impl CouplingLayer {
    fn halves(&self, dims: usize) -> (Vec<usize>, Vec<usize>) {
        (0..dims).partition(|i| i % 2 == self.parity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layer {
    Coupling(CouplingLayer),
    Scaling { log_scale: Array },
    Sigmoid,
}

fn columns(x: &Array, cols: &[usize]) -> Result<Array> {
    let (n, d) = x.dims2()?;
    let mut out = Vec::with_capacity(n * cols.len());
    for i in 0..n {
        out.extend(cols.iter().map(|&c| x.data()[i * d + c]));
    }
    Array::matrix(n, cols.len(), out)
}

fn column_indices(n: usize, d: usize, cols: &[usize]) -> Rc<[usize]> {
    (0..n).flat_map(|i| cols.iter().map(move |&c| i * d + c)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    dims: usize,
    config: FlowConfig,
    layers: Vec<Layer>,
}

impl FlowModel {
    /// Builds a flow whose coupling nets output zero, so that with
    /// `log_scale = 0` it starts as the identity (followed by the sigmoid,
    /// if configured). Coupling layers are skipped when `dims == 1`.
    pub fn new<R: Rng + ?Sized>(dims: usize, config: FlowConfig, rng: &mut R) -> Result<Self> {
        if dims == 0 {
            return contract("a flow needs at least one dimension");
        }
        let mut layers = Vec::new();
        if dims > 1 {
            for k in 0..config.coupling_layers {
                let parity = k % 2;
                let n_pass = (0..dims).filter(|i| i % 2 == parity).count();
                let mut widths = vec![n_pass];
                widths.extend(&config.hidden);
                widths.push(dims - n_pass);
                layers.push(Layer::Coupling(CouplingLayer {
                    parity,
                    net: Mlp::new(&widths, config.activation, rng),
                }));
            }
        }
        if config.scaling {
            layers.push(Layer::Scaling {
                log_scale: Array::zeros(&[dims]),
            });
        }
        if config.sigmoid {
            layers.push(Layer::Sigmoid);
        }
        Ok(Self {
            dims,
            config,
            layers,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn has_sigmoid(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Sigmoid))
    }

    /// Parameter arrays in layer order: each coupling net's weight and bias
    /// per dense layer, then the scaling layer's `log_scale`.
    pub fn parameters(&self) -> Vec<&Array> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Coupling(c) => {
                    for (w, b) in c.net.weights.iter().zip(&c.net.biases) {
                        out.push(w);
                        out.push(b);
                    }
                }
                Layer::Scaling { log_scale } => out.push(log_scale),
                Layer::Sigmoid => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Array> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Coupling(c) => {
                    for (w, b) in c.net.weights.iter_mut().zip(c.net.biases.iter_mut()) {
                        out.push(w);
                        out.push(b);
                    }
                }
                Layer::Scaling { log_scale } => out.push(log_scale),
                Layer::Sigmoid => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.parameters().into_iter().map(|p| tape.var(p.clone())).collect()
    }

    fn check_batch(&self, x: &Array) -> Result<usize> {
        let (n, d) = x.dims2()?;
        if d != self.dims {
            return contract(format!("input has {d} columns, flow expects {}", self.dims));
        }
        Ok(n)
    }

    /// `z = f(x)` and per-point `ln |det J|` for an `[n, dims]` batch.
    pub fn forward(&self, x: &Array) -> Result<(Array, Vec<f64>)> {
        let n = self.check_batch(x)?;
        let d = self.dims;
        let mut z = x.clone();
        let mut logdet = vec![0.0; n];
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Coupling(c) => {
                    let (pass, shifted) = c.halves(d);
                    let shift = c.net.forward(&columns(&z, &pass)?)?;
                    let m = shifted.len();
                    for i in 0..n {
                        for (k, &col) in shifted.iter().enumerate() {
                            z.data_mut()[i * d + col] += shift.data()[i * m + k];
                        }
                    }
                }
                Layer::Scaling { log_scale } => {
                    let s = log_scale.sum();
                    for (j, v) in z.data_mut().iter_mut().enumerate() {
                        *v *= log_scale.data()[j % d].exp();
                    }
                    logdet.iter_mut().for_each(|l| *l += s);
                }
                Layer::Sigmoid => {
                    for (j, v) in z.data_mut().iter_mut().enumerate() {
                        let u = *v;
                        logdet[j / d] += log_sigmoid(u) + log_sigmoid(-u);
                        *v = sigmoid(u);
                    }
                }
            }
            if !z.all_finite() || logdet.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite { layer: li });
            }
        }
        Ok((z, logdet))
    }

    /// Differentiable forward pass. `params` are the vars returned by
    /// [`FlowModel::bind`]; `x` is `[n, dims]`. Returns `z` and the `[n]`
    /// log-determinants.
    pub fn forward_on_tape<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dims {
            return contract(format!("flow input of shape {shape:?}, expected [n, {}]", self.dims));
        }
        let (n, d) = (shape[0], self.dims);
        let mut z = x;
        let mut logdet = tape.constant(Array::zeros(&[n]));
        let mut p = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Coupling(c) => {
                    let (pass, shifted) = c.halves(d);
                    let k = c.net.param_len();
                    let input = z.gather(column_indices(n, d, &pass), vec![n, pass.len()])?;
                    let shift = c.net.forward_on_tape(&params[p..p + k], input)?;
                    z = z.add(shift.scatter(column_indices(n, d, &shifted), vec![n, d])?)?;
                    p += k;
                }
                Layer::Scaling { .. } => {
                    let s = params[p];
                    z = z.mul_row(s.exp())?;
                    logdet = logdet.add(s.sum())?;
                    p += 1;
                }
                Layer::Sigmoid => {
                    let per = z.log_sigmoid().add(z.neg().log_sigmoid())?;
                    logdet = logdet.add(per.row_sum()?)?;
                    z = z.sigmoid();
                }
            }
            let ok = z.with_value(Array::all_finite) && logdet.with_value(Array::all_finite);
            if !ok {
                return Err(Error::NonFinite { layer: li });
            }
        }
        Ok((z, logdet))
    }

    /// `x = f⁻¹(z)`. With a sigmoid layer every coordinate of `z` must lie
    /// strictly inside `(0, 1)`.
    pub fn inverse(&self, z: &Array) -> Result<Array> {
        let n = self.check_batch(z)?;
        let d = self.dims;
        let mut x = z.clone();
        for layer in self.layers.iter().rev() {
            match layer {
                Layer::Sigmoid => {
                    for v in x.data_mut() {
                        if !(*v > 0.0 && *v < 1.0) {
                            return domain(format!("latent coordinate {v} outside (0,1)"));
                        }
                        *v = logit(*v);
                    }
                }
                Layer::Scaling { log_scale } => {
                    for (j, v) in x.data_mut().iter_mut().enumerate() {
                        *v *= (-log_scale.data()[j % d]).exp();
                    }
                }
                Layer::Coupling(c) => {
                    let (pass, shifted) = c.halves(d);
                    let shift = c.net.forward(&columns(&x, &pass)?)?;
                    let m = shifted.len();
                    for i in 0..n {
                        for (k, &col) in shifted.iter().enumerate() {
                            x.data_mut()[i * d + col] -= shift.data()[i * m + k];
                        }
                    }
                }
            }
        }
        Ok(x)
    }
}
