//! Fully-connected network with NTK-style pre-activation scaling.
//!
//! Layer `l` computes `h = A x / sqrt(d_l) + b` and applies the activation on
//! every layer except the last, whose pre-activation is the network output.
//! Hidden layers start from i.i.d. standard normal entries; the output layer
//! starts at exactly zero, so a fresh network predicts 0 everywhere.
//!
//! Parameters live in one flat vector (`theta`) laid out layer by layer as
//! `A^0 (row-major), b^0, A^1, b^1, ...`. All gradient and directional
//! derivative routines work against that layout.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Examples per accumulation chunk. Chunk boundaries are fixed so parallel
/// reductions sum in the same order regardless of thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
    Erf,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 30.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
            Activation::Erf => libm::erf(z),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-z * z).exp(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Erf => "erf",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "erf" => Ok(Activation::Erf),
            "relu" | "leaky_relu" => Err(Error::config(format!(
                "activation `{s}` has a non-Lipschitz derivative; use tanh, softplus or erf"
            ))),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Layer widths `d_0 ..= d_{L+1}`: input, hidden layers, output.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl NetConfig {
    /// `depth` hidden layers of equal `width`.
    pub fn uniform(
        input_dim: usize,
        depth: usize,
        width: usize,
        output_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut widths = Vec::with_capacity(depth + 2);
        widths.push(input_dim);
        widths.extend(std::iter::repeat_n(width, depth));
        widths.push(output_dim);
        NetConfig { widths, activation, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("a network needs at least input and output widths"));
        }
        if let Some(pos) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("width at position {pos} is zero")));
        }
        Ok(())
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated config")
    }

    /// Width of the last hidden layer (the input dimension when `L = 0`).
    pub fn penultimate_dim(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    rows: usize,
    cols: usize,
    a_offset: usize,
    b_offset: usize,
    inv_sqrt_cols: f64,
}

fn layout(cfg: &NetConfig) -> Vec<LayerShape> {
    let mut offset = 0;
    cfg.widths
        .windows(2)
        .map(|w| {
            let (cols, rows) = (w[0], w[1]);
            let shape = LayerShape {
                rows,
                cols,
                a_offset: offset,
                b_offset: offset + rows * cols,
                inv_sqrt_cols: 1.0 / (cols as f64).sqrt(),
            };
            offset += rows * cols + rows;
            shape
        })
        .collect()
}

/// Network parameters (the flattened `theta`) together with their shape.
#[derive(Debug, Clone)]
pub struct NetParams {
    config: NetConfig,
    layers: Vec<LayerShape>,
    theta: Vec<f64>,
}

impl PartialEq for NetParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.theta == other.theta
    }
}

/// Initialize parameters: standard normal hidden layers, zero output layer.
pub fn init_network(cfg: &NetConfig) -> Result<NetParams> {
    cfg.validate()?;
    let layers = layout(cfg);
    let mut theta = vec![0.0; cfg.param_count()];
    let mut rng = seed::rng(cfg.seed);
    let last = layers.len() - 1;
    for shape in &layers[..last] {
        let end = shape.b_offset + shape.rows;
        for v in &mut theta[shape.a_offset..end] {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    Ok(NetParams { config: cfg.clone(), layers, theta })
}

/// Activations recorded during a forward pass.
struct Tape {
    /// `x^0 ..= x^L` (input and hidden post-activations).
    post: Vec<Vec<f64>>,
    /// `h^1 ..= h^L` (hidden pre-activations).
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl NetParams {
    pub fn from_theta(cfg: &NetConfig, theta: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if theta.len() != cfg.param_count() {
            return Err(Error::Dimension { what: "parameter vector", expected: cfg.param_count(), got: theta.len() });
        }
        Ok(NetParams { config: cfg.clone(), layers: layout(cfg), theta })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Weight matrix of layer `l` in row-major order (`d_{l+1} x d_l`).
    pub fn layer_weights(&self, l: usize) -> &[f64] {
        let s = &self.layers[l];
        &self.theta[s.a_offset..s.b_offset]
    }

    pub fn layer_bias(&self, l: usize) -> &[f64] {
        let s = &self.layers[l];
        &self.theta[s.b_offset..s.b_offset + s.rows]
    }

    pub fn layer_weights_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.layers[l];
        &mut self.theta[s.a_offset..s.b_offset]
    }

    pub fn layer_bias_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.layers[l];
        &mut self.theta[s.b_offset..s.b_offset + s.rows]
    }

    /// Range of `theta` holding the weights of layer `l`.
    pub fn layer_weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let s = &self.layers[l];
        s.a_offset..s.b_offset
    }

    /// `theta + scale * direction`.
    pub fn displaced(&self, direction: &[f64], scale: f64) -> NetParams {
        debug_assert_eq!(direction.len(), self.theta.len());
        let theta = self.theta.iter().zip(direction).map(|(t, d)| t + scale * d).collect();
        NetParams { config: self.config.clone(), layers: self.layers.clone(), theta }
    }

    /// Stable fingerprint of the parameter values.
    pub fn snapshot_id(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.theta.len() * 8);
        for v in &self.theta {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        seed::fnv1a(&bytes)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim() {
            return Err(Error::Dimension { what: "network input", expected: self.config.input_dim(), got: x.len() });
        }
        Ok(())
    }

    fn check_batch(&self, xs: &[Vec<f64>]) -> Result<()> {
        xs.iter().try_for_each(|x| self.check_input(x))
    }

    fn check_scalar_output(&self) -> Result<()> {
        if self.config.output_dim() != 1 {
            return Err(Error::config(format!(
                "scalar-output routine called on a network with {} outputs",
                self.config.output_dim()
            )));
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let s = &self.layers[l];
        let a = &self.theta[s.a_offset..s.b_offset];
        let b = &self.theta[s.b_offset..s.b_offset + s.rows];
        out.clear();
        out.extend(a.chunks_exact(s.cols).zip(b).map(|(row, bias)| {
            let dot: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum();
            dot * s.inv_sqrt_cols + bias
        }));
    }

    fn tape(&self, x: &[f64]) -> Tape {
        let depth = self.config.depth();
        let act = self.config.activation;
        let mut post = Vec::with_capacity(depth + 1);
        let mut pre = Vec::with_capacity(depth);
        post.push(x.to_vec());
        let mut h = Vec::new();
        for l in 0..depth {
            self.affine(l, &post[l], &mut h);
            post.push(h.iter().map(|&z| act.eval(z)).collect());
            pre.push(std::mem::take(&mut h));
        }
        let mut output = Vec::new();
        self.affine(depth, &post[depth], &mut output);
        Tape { post, pre, output }
    }

    /// Network output `h^{L+1}` (no activation on the output layer).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.tape(x).output)
    }

    /// Scalar output for single-output networks.
    pub fn forward_scalar(&self, x: &[f64]) -> Result<f64> {
        self.check_scalar_output()?;
        Ok(self.forward(x)?[0])
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_batch(xs)?;
        Ok(xs.par_iter().map(|x| self.tape(x).output).collect())
    }

    /// Scalar outputs for a batch on a single-output network.
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_scalar_output()?;
        self.check_batch(xs)?;
        Ok(xs.par_iter().map(|x| self.tape(x).output[0]).collect())
    }

    /// Last hidden-layer activations `x^L`.
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = self.tape(x);
        Ok(tape.post.pop().expect("tape holds the input"))
    }

    pub fn penultimate_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_batch(xs)?;
        Ok(xs.par_iter().map(|x| self.tape(x).post.pop().expect("tape holds the input")).collect())
    }

    /// Adds `scale * J(x)^T cotangent` into `grad`.
    fn accumulate_vjp(&self, tape: &Tape, cotangent: &[f64], scale: f64, grad: &mut [f64]) {
        let act = self.config.activation;
        let mut delta: Vec<f64> = cotangent.iter().map(|c| c * scale).collect();
        for l in (0..self.layers.len()).rev() {
            let s = self.layers[l];
            let input = &tape.post[l];
            {
                let (ga, gb) = grad[s.a_offset..s.b_offset + s.rows].split_at_mut(s.rows * s.cols);
                for (i, (row, d)) in ga.chunks_exact_mut(s.cols).zip(&delta).enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let coef = d * s.inv_sqrt_cols;
                    for (g, xv) in row.iter_mut().zip(input) {
                        *g += coef * xv;
                    }
                    gb[i] += d;
                }
            }
            if l == 0 {
                break;
            }
            let a = &self.theta[s.a_offset..s.b_offset];
            let mut back = vec![0.0; s.cols];
            for (row, d) in a.chunks_exact(s.cols).zip(&delta) {
                if *d == 0.0 {
                    continue;
                }
                for (bv, av) in back.iter_mut().zip(row) {
                    *bv += av * d;
                }
            }
            let pre = &tape.pre[l - 1];
            delta = back.iter().zip(pre).map(|(bv, z)| bv * s.inv_sqrt_cols * act.derivative(*z)).collect();
        }
    }

    /// Directional derivative of the outputs along `direction` in parameter space.
    fn jvp_tape(&self, tape: &Tape, direction: &[f64]) -> Vec<f64> {
        let act = self.config.activation;
        let depth = self.config.depth();
        let mut dx = vec![0.0; self.config.input_dim()];
        let mut first = true;
        for l in 0..=depth {
            let s = &self.layers[l];
            let a = &self.theta[s.a_offset..s.b_offset];
            let va = &direction[s.a_offset..s.b_offset];
            let vb = &direction[s.b_offset..s.b_offset + s.rows];
            let x = &tape.post[l];
            let dh: Vec<f64> = (0..s.rows)
                .map(|i| {
                    let row_v = &va[i * s.cols..(i + 1) * s.cols];
                    let mut acc: f64 = row_v.iter().zip(x).map(|(p, q)| p * q).sum();
                    if !first {
                        let row_a = &a[i * s.cols..(i + 1) * s.cols];
                        acc += row_a.iter().zip(&dx).map(|(p, q)| p * q).sum::<f64>();
                    }
                    acc * s.inv_sqrt_cols + vb[i]
                })
                .collect();
            first = false;
            if l == depth {
                return dh;
            }
            dx = dh.iter().zip(&tape.pre[l]).map(|(d, z)| d * act.derivative(*z)).collect();
        }
        unreachable!("loop returns at the output layer")
    }

    /// `J(x) v` for every example of a single-output network.
    pub fn jvp_batch(&self, xs: &[Vec<f64>], direction: &[f64]) -> Result<Vec<f64>> {
        self.check_scalar_output()?;
        self.check_batch(xs)?;
        self.check_direction(direction)?;
        Ok(xs.par_iter().map(|x| self.jvp_tape(&self.tape(x), direction)[0]).collect())
    }

    fn check_direction(&self, direction: &[f64]) -> Result<()> {
        if direction.len() != self.theta.len() {
            return Err(Error::Dimension {
                what: "parameter direction",
                expected: self.theta.len(),
                got: direction.len(),
            });
        }
        Ok(())
    }

    /// `sum_i J(x_i)^T c_i`, where `cotangent(i, output)` writes the output
    /// cotangent for example `i` and returns `false` to skip it.
    pub fn vjp_sum<F>(&self, xs: &[Vec<f64>], cotangent: F) -> Result<Vec<f64>>
    where
        F: Fn(usize, &[f64], &mut Vec<f64>) -> bool + Sync,
    {
        self.check_batch(xs)?;
        let p = self.theta.len();
        let idx: Vec<usize> = (0..xs.len()).collect();
        let partials: Vec<Vec<f64>> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut buf = vec![0.0; p];
                let mut c = Vec::new();
                for &i in chunk {
                    let tape = self.tape(&xs[i]);
                    c.clear();
                    if cotangent(i, &tape.output, &mut c) {
                        self.accumulate_vjp(&tape, &c, 1.0, &mut buf);
                    }
                }
                buf
            })
            .collect();
        let mut total = vec![0.0; p];
        for part in &partials {
            for (t, v) in total.iter_mut().zip(part) {
                *t += v;
            }
        }
        Ok(total)
    }

    /// `grad_theta f(x)` for a single-output network.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_scalar_output()?;
        self.check_input(x)?;
        let mut g = vec![0.0; self.theta.len()];
        self.accumulate_vjp(&self.tape(x), &[1.0], 1.0, &mut g);
        Ok(g)
    }

    /// Gradient of the sum of outputs, used as the tangent feature of
    /// multi-output networks. Equals [`gradient`](Self::gradient) for scalar outputs.
    pub fn output_sum_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut g = vec![0.0; self.theta.len()];
        let ones = vec![1.0; self.config.output_dim()];
        self.accumulate_vjp(&self.tape(x), &ones, 1.0, &mut g);
        Ok(g)
    }

    /// Per-example Jacobian columns of a single-output network.
    pub fn jacobian(&self, xs: &[Vec<f64>]) -> Result<JacobianBlock> {
        self.check_scalar_output()?;
        if xs.is_empty() {
            return Err(Error::config("jacobian of an empty batch"));
        }
        self.check_batch(xs)?;
        let columns: Vec<Vec<f64>> = xs
            .par_iter()
            .map(|x| {
                let mut g = vec![0.0; self.theta.len()];
                self.accumulate_vjp(&self.tape(x), &[1.0], 1.0, &mut g);
                g
            })
            .collect();
        Ok(JacobianBlock { columns, example_ids: (0..xs.len() as u64).collect(), snapshot: self.snapshot_id() })
    }
}

/// `p x k` Jacobian stored column by column.
#[derive(Debug, Clone)]
pub struct JacobianBlock {
    pub columns: Vec<Vec<f64>>,
    pub example_ids: Vec<u64>,
    pub snapshot: u64,
}

impl JacobianBlock {
    pub fn with_ids(mut self, ids: &[u64]) -> Self {
        assert_eq!(ids.len(), self.columns.len(), "one id per column");
        self.example_ids = ids.to_vec();
        self
    }

    pub fn param_dim(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn num_examples(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str, params: &NetParams) -> Result<()> {
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        let layer = params.layers.iter().position(|s| idx < s.b_offset + s.rows).unwrap_or(0);
        let norm = params.theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        return Err(Error::Numeric(format!(
            "{what}: non-finite entry {} at parameter index {idx} (layer {layer}); |theta|_2 = {norm:.4e}",
            values[idx]
        )));
    }
    Ok(())
}

/// Squared-loss residuals `f(x_i) - y_i` on a single-output network.
pub fn residuals(params: &NetParams, xs: &[Vec<f64>], ys: &[f64]) -> Result<Vec<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension { what: "labels", expected: xs.len(), got: ys.len() });
    }
    let preds = params.predict(xs)?;
    Ok(preds.iter().zip(ys).map(|(f, y)| f - y).collect())
}

/// `sum_i w_i u_i grad f(x_i)` under the squared loss `(f - y)^2 / 2`.
pub fn weighted_loss_gradient(params: &NetParams, xs: &[Vec<f64>], ys: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    params.check_scalar_output()?;
    for (what, len) in [("labels", ys.len()), ("weights", weights.len())] {
        if len != xs.len() {
            return Err(Error::Dimension { what, expected: xs.len(), got: len });
        }
    }
    let grad = params.vjp_sum(xs, |i, out, c| {
        if weights[i] == 0.0 {
            return false;
        }
        c.push(weights[i] * (out[0] - ys[i]));
        true
    })?;
    ensure_finite(&grad, "weighted loss gradient", params)?;
    Ok(grad)
}

/// One classifier step `theta - eta * sum_i w_i u_i grad f(x_i)`.
pub fn weighted_sgd_step(
    params: &NetParams,
    xs: &[Vec<f64>],
    ys: &[f64],
    weights: &[f64],
    eta: f64,
) -> Result<NetParams> {
    let grad = weighted_loss_gradient(params, xs, ys, weights)?;
    Ok(params.displaced(&grad, -eta))
}
