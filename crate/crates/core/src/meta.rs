//! Bilevel meta-reweighting on the squared loss.
//!
//! Each epoch computes the weight hypergradient at `(theta_t, w_t)`, takes a
//! clipped weight step, then one full-batch classifier step with the new
//! weights. The pseudo update inside the hypergradient is never committed.

use serde::{Deserialize, Serialize};

use crate::data::{ExampleSet, SplitTag};
use crate::error::{Error, Result};
use crate::kernel::{ntk_gram, GramMatrix};
use crate::net::{ensure_finite, init_network, residuals, weighted_sgd_step, NetConfig, NetParams};
use crate::stats::inf_norm;
use crate::trace::{EpochRecord, RunTrace, TraceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Chain rule through the pseudo update.
    Exact,
    /// Clean-subset Jacobian and residuals taken at `theta_t`.
    FirstOrder,
    /// Tangent kernel frozen at initialization.
    NtkFrozen,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Backend::Exact),
            "first_order" | "first-order" => Ok(Backend::FirstOrder),
            "ntk_frozen" | "ntk-frozen" | "ntk" => Ok(Backend::NtkFrozen),
            other => Err(Error::config(format!("unknown hypergradient backend `{other}`"))),
        }
    }
}

/// Inputs, `+-1` labels and noise flags of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySplit {
    pub ids: Vec<u64>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub noisy: Vec<bool>,
}

impl BinarySplit {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Self {
        let n = x.len();
        BinarySplit { ids: (0..n as u64).collect(), x, y, noisy: vec![false; n] }
    }

    pub fn from_examples(set: &ExampleSet) -> Result<Self> {
        if set.num_classes != 2 {
            return Err(Error::config(format!(
                "bilevel trainer needs binary labels, split has {} classes",
                set.num_classes
            )));
        }
        Ok(BinarySplit {
            ids: set.ids.clone(),
            x: set.x.clone(),
            y: set.signed_observed(),
            noisy: set.noise_mask.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub eta: f64,
    /// Coupling `alpha * eta`; the weight step size is `beta / eta`.
    pub beta: f64,
    pub epochs: usize,
    pub backend: Backend,
    /// Compute all three backends each epoch and record `e1`, `e2`.
    pub diagnostics: bool,
    pub divergence_factor: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            eta: 1e-3,
            beta: 0.01,
            epochs: 100,
            backend: Backend::Exact,
            diagnostics: false,
            divergence_factor: 10.0,
        }
    }
}

impl MetaConfig {
    pub fn alpha(&self) -> f64 {
        self.beta / self.eta
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.divergence_factor.is_nan() || self.divergence_factor <= 1.0 {
            return Err(Error::config("divergence factor must exceed 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub iteration: usize,
}

impl WeightVector {
    pub fn uniform(n: usize, value: f64) -> Self {
        WeightVector { values: vec![value; n], iteration: 0 }
    }
}

/// `clip_[0,1](w - alpha g)`.
pub fn weight_step(w: &WeightVector, gradient: &[f64], alpha: f64) -> WeightVector {
    debug_assert_eq!(w.values.len(), gradient.len());
    WeightVector {
        values: w.values.iter().zip(gradient).map(|(wi, gi)| (wi - alpha * gi).clamp(0.0, 1.0)).collect(),
        iteration: w.iteration + 1,
    }
}

/// Tangent kernel between training and clean inputs at initialization.
#[derive(Debug, Clone)]
pub struct FrozenKernel {
    pub gram: GramMatrix,
}

impl FrozenKernel {
    pub fn at(params: &NetParams, train: &BinarySplit, clean: &BinarySplit) -> Result<Self> {
        let gram = ntk_gram(params, &train.x, &clean.x)?.with_ids(&train.ids, &clean.ids);
        Ok(FrozenKernel { gram })
    }
}

/// `theta - eta * sum_i w_i u_i grad f_i(theta)`.
pub fn pseudo_update(params: &NetParams, x: &[Vec<f64>], y: &[f64], w: &[f64], eta: f64) -> Result<NetParams> {
    weighted_sgd_step(params, x, y, w, eta)
}

/// `sum_j (f(x_j; theta_hat(w)) - y_j)^2 / 2` over the clean subset.
pub fn validation_objective(
    params: &NetParams,
    train: &BinarySplit,
    clean: &BinarySplit,
    w: &[f64],
    eta: f64,
) -> Result<f64> {
    let hat = pseudo_update(params, &train.x, &train.y, w, eta)?;
    let uv = residuals(&hat, &clean.x, &clean.y)?;
    Ok(0.5 * uv.iter().map(|u| u * u).sum::<f64>())
}

fn check_splits(train: &BinarySplit, clean: &BinarySplit, w: &[f64]) -> Result<()> {
    if clean.is_empty() {
        return Err(Error::EmptyCleanSet);
    }
    if w.len() != train.len() {
        return Err(Error::Dimension { what: "weights", expected: train.len(), got: w.len() });
    }
    if train.y.len() != train.len() || clean.y.len() != clean.len() {
        return Err(Error::Dimension { what: "labels", expected: train.len(), got: train.y.len() });
    }
    Ok(())
}

/// `sum_j u^v_j(theta) grad f(x^v_j; theta)`.
fn clean_direction(at: &NetParams, clean: &BinarySplit) -> Result<Vec<f64>> {
    let v = at.vjp_sum(&clean.x, |j, out, c| {
        c.push(out[0] - clean.y[j]);
        true
    })?;
    ensure_finite(&v, "clean-subset direction", at)?;
    Ok(v)
}

/// `-eta u_k <grad f_k(theta), v>` for every training example.
fn contract(params: &NetParams, train: &BinarySplit, u: &[f64], v: &[f64], eta: f64) -> Result<Vec<f64>> {
    let jv = params.jvp_batch(&train.x, v)?;
    Ok(u.iter().zip(&jv).map(|(uk, a)| -eta * uk * a).collect())
}

struct Context {
    u: Vec<f64>,
}

fn exact_with(
    ctx: &Context,
    params: &NetParams,
    train: &BinarySplit,
    clean: &BinarySplit,
    w: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    let hat = pseudo_update(params, &train.x, &train.y, w, eta)?;
    let v = clean_direction(&hat, clean)?;
    contract(params, train, &ctx.u, &v, eta)
}

fn first_order_with(
    ctx: &Context,
    params: &NetParams,
    train: &BinarySplit,
    clean: &BinarySplit,
    eta: f64,
) -> Result<Vec<f64>> {
    let v = clean_direction(params, clean)?;
    contract(params, train, &ctx.u, &v, eta)
}

fn ntk_with(
    ctx: &Context,
    params: &NetParams,
    clean: &BinarySplit,
    frozen: Option<&FrozenKernel>,
    eta: f64,
) -> Result<Vec<f64>> {
    let frozen = frozen.ok_or_else(|| {
        Error::BackendUnavailable("ntk_frozen needs the tangent kernel cached at initialization".into())
    })?;
    if frozen.gram.rows != ctx.u.len() || frozen.gram.cols != clean.len() {
        return Err(Error::BackendUnavailable(format!(
            "cached kernel is {}x{}, problem is {}x{}",
            frozen.gram.rows,
            frozen.gram.cols,
            ctx.u.len(),
            clean.len()
        )));
    }
    let uv = residuals(params, &clean.x, &clean.y)?;
    let ku = frozen.gram.mul_vec(&uv)?;
    Ok(ctx.u.iter().zip(&ku).map(|(uk, a)| -eta * uk * a).collect())
}

/// Weight hypergradient of the validation objective under `backend`.
pub fn hypergrad(
    params: &NetParams,
    train: &BinarySplit,
    clean: &BinarySplit,
    w: &[f64],
    eta: f64,
    backend: Backend,
    frozen: Option<&FrozenKernel>,
) -> Result<Vec<f64>> {
    check_splits(train, clean, w)?;
    let ctx = Context { u: residuals(params, &train.x, &train.y)? };
    let g = match backend {
        Backend::Exact => exact_with(&ctx, params, train, clean, w, eta)?,
        Backend::FirstOrder => first_order_with(&ctx, params, train, clean, eta)?,
        Backend::NtkFrozen => ntk_with(&ctx, params, clean, frozen, eta)?,
    };
    ensure_finite(&g, "hypergradient", params)?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergradDiagnostics {
    pub g_exact: Vec<f64>,
    pub g_first_order: Vec<f64>,
    pub g_ntk: Vec<f64>,
    /// `|g_exact - g_first_order|_inf`, the pseudo-update truncation error.
    pub e1_norm: f64,
    /// `|g_first_order - g_ntk|_inf`, the kernel-freezing error.
    pub e2_norm: f64,
}

impl HypergradDiagnostics {
    pub fn gradient(&self, backend: Backend) -> &[f64] {
        match backend {
            Backend::Exact => &self.g_exact,
            Backend::FirstOrder => &self.g_first_order,
            Backend::NtkFrozen => &self.g_ntk,
        }
    }
}

fn diff_inf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn hypergrad_diagnostics(
    params: &NetParams,
    train: &BinarySplit,
    clean: &BinarySplit,
    w: &[f64],
    eta: f64,
    frozen: &FrozenKernel,
) -> Result<HypergradDiagnostics> {
    check_splits(train, clean, w)?;
    let ctx = Context { u: residuals(params, &train.x, &train.y)? };
    let g_exact = exact_with(&ctx, params, train, clean, w, eta)?;
    let g_first_order = first_order_with(&ctx, params, train, clean, eta)?;
    let g_ntk = ntk_with(&ctx, params, clean, Some(frozen), eta)?;
    for g in [&g_exact, &g_first_order, &g_ntk] {
        ensure_finite(g, "hypergradient", params)?;
    }
    Ok(HypergradDiagnostics {
        e1_norm: diff_inf(&g_exact, &g_first_order),
        e2_norm: diff_inf(&g_first_order, &g_ntk),
        g_exact,
        g_first_order,
        g_ntk,
    })
}

#[derive(Debug, Clone)]
pub struct MetaRun {
    pub params: NetParams,
    pub weights: WeightVector,
    pub trace: RunTrace,
}

/// Resumable bilevel training state.
pub struct MetaTrainer<'a> {
    cfg: MetaConfig,
    train: &'a BinarySplit,
    clean: &'a BinarySplit,
    params: NetParams,
    weights: WeightVector,
    frozen: Option<FrozenKernel>,
    u0_inf: f64,
    trace: RunTrace,
}

impl<'a> MetaTrainer<'a> {
    pub fn new(cfg: &MetaConfig, train: &'a BinarySplit, clean: &'a BinarySplit, net: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        if clean.is_empty() {
            return Err(Error::EmptyCleanSet);
        }
        if train.is_empty() {
            return Err(Error::config("empty training split"));
        }
        let params = init_network(net)?;
        if params.config().output_dim() != 1 {
            return Err(Error::config("bilevel trainer needs a single-output network"));
        }
        let frozen = if cfg.backend == Backend::NtkFrozen || cfg.diagnostics {
            Some(FrozenKernel::at(&params, train, clean)?)
        } else {
            None
        };
        let u0 = residuals(&params, &train.x, &train.y)?;
        let trace = RunTrace::new(TraceKind::Meta, train.ids.clone(), train.noisy.clone(), clean.ids.clone());
        Ok(MetaTrainer {
            cfg: cfg.clone(),
            train,
            clean,
            params,
            weights: WeightVector::uniform(train.len(), 0.5),
            frozen,
            u0_inf: inf_norm(&u0),
            trace,
        })
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    /// Runs one epoch, recording the state it started from.
    pub fn step(&mut self) -> Result<()> {
        let epoch = self.weights.iteration;
        let eta = self.cfg.eta;
        let u = residuals(&self.params, &self.train.x, &self.train.y)?;
        self.guard(epoch, &u)?;
        let uv = residuals(&self.params, &self.clean.x, &self.clean.y)?;
        let (g, e1, e2) = if self.cfg.diagnostics {
            let frozen = self.frozen.as_ref().expect("cached when diagnostics are on");
            let d = hypergrad_diagnostics(&self.params, self.train, self.clean, &self.weights.values, eta, frozen)?;
            let g = d.gradient(self.cfg.backend).to_vec();
            (g, Some(d.e1_norm), Some(d.e2_norm))
        } else {
            let g = hypergrad(
                &self.params,
                self.train,
                self.clean,
                &self.weights.values,
                eta,
                self.cfg.backend,
                self.frozen.as_ref(),
            )?;
            (g, None, None)
        };
        self.trace.epochs.push(EpochRecord {
            epoch,
            weights: self.weights.values.clone(),
            residuals: u,
            val_residuals: uv,
            directions: Some(g.iter().map(|v| -v).collect()),
            e1_norm: e1,
            e2_norm: e2,
        });
        self.weights = weight_step(&self.weights, &g, self.cfg.alpha());
        self.params = weighted_sgd_step(&self.params, &self.train.x, &self.train.y, &self.weights.values, eta)?;
        Ok(())
    }

    fn guard(&self, epoch: usize, u: &[f64]) -> Result<()> {
        let residual = inf_norm(u);
        let limit = self.cfg.divergence_factor * self.u0_inf;
        if !residual.is_finite() || residual > limit {
            return Err(Error::Diverged { epoch, residual, limit });
        }
        Ok(())
    }

    /// Records the current state without stepping.
    fn record_final(&mut self) -> Result<()> {
        let epoch = self.weights.iteration;
        let u = residuals(&self.params, &self.train.x, &self.train.y)?;
        self.guard(epoch, &u)?;
        let uv = residuals(&self.params, &self.clean.x, &self.clean.y)?;
        self.trace.epochs.push(EpochRecord {
            epoch,
            weights: self.weights.values.clone(),
            residuals: u,
            val_residuals: uv,
            directions: None,
            e1_norm: None,
            e2_norm: None,
        });
        Ok(())
    }

    pub fn finish(mut self) -> Result<MetaRun> {
        self.record_final()?;
        Ok(MetaRun { params: self.params, weights: self.weights, trace: self.trace })
    }
}

/// Runs `cfg.epochs` epochs from a fresh network; the trace covers epochs
/// `0..=T`, the last one without a hypergradient.
pub fn meta_train(cfg: &MetaConfig, train: &BinarySplit, clean: &BinarySplit, net: &NetConfig) -> Result<MetaRun> {
    let mut trainer = MetaTrainer::new(cfg, train, clean, net)?;
    for _ in 0..cfg.epochs {
        trainer.step()?;
    }
    trainer.finish()
}

/// Checks the exact backend against central differences of the validation
/// objective; returns the relative error `|g - fd|_inf / |fd|_inf`.
pub fn finite_difference_check(
    params: &NetParams,
    train: &BinarySplit,
    clean: &BinarySplit,
    w: &[f64],
    eta: f64,
    step: f64,
) -> Result<f64> {
    let g = hypergrad(params, train, clean, w, eta, Backend::Exact, None)?;
    let mut fd = vec![0.0; w.len()];
    for k in 0..w.len() {
        let mut plus = w.to_vec();
        let mut minus = w.to_vec();
        plus[k] += step;
        minus[k] -= step;
        let lp = validation_objective(params, train, clean, &plus, eta)?;
        let lm = validation_objective(params, train, clean, &minus, eta)?;
        fd[k] = (lp - lm) / (2.0 * step);
    }
    let scale = inf_norm(&fd);
    if scale == 0.0 {
        return Ok(inf_norm(&g));
    }
    Ok(diff_inf(&g, &fd) / scale)
}

/// Binary splits of the clean subset and the remaining training pool.
pub fn binary_splits(train: &ExampleSet, clean: &ExampleSet) -> Result<(BinarySplit, BinarySplit)> {
    if clean.split != SplitTag::CleanSubset {
        log::warn!("clean split is tagged `{}`", clean.split);
    }
    clean.check_balanced_clean()?;
    Ok((BinarySplit::from_examples(train)?, BinarySplit::from_examples(clean)?))
}
