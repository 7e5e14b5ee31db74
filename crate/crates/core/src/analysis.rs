//! Phase detection on weight traces, kernel scaling Monte-Carlo,
//! linearization gaps and figure-data export.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{histogram, histogram_csv, ntk_gram, GramMatrix};
use crate::meta::BinarySplit;
use crate::net::{init_network, weighted_sgd_step, Activation, NetConfig};
use crate::seed;
use crate::stats::{inf_norm, log_log_slope, median};
use crate::trace::RunTrace;

/// Weight tolerance for "at the extreme" in the polarization test.
const POLAR_TOL: f64 = 1e-9;
const BAND_TOL: f64 = 1e-6;
const NOISY_FLOOR: f64 = 1e-6;
const ONSET_LEVEL: f64 = 1e-3;
const MONOTONE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseParams {
    /// Clean-subset size.
    pub m: usize,
    pub beta: f64,
    /// Measured sign margin of the centered kernel.
    pub gamma: f64,
    pub width: usize,
    pub eta: f64,
    /// Multiplier of the residual threshold `kappa (eta + width^(-1/4))`.
    pub kappa: f64,
}

impl PhaseParams {
    pub fn t1_pred(&self) -> f64 {
        1.0 + 1.0 / (self.m as f64 * self.beta * self.gamma)
    }

    pub fn residual_threshold(&self) -> f64 {
        self.kappa * (self.eta + (self.width as f64).powf(-0.25))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub params: PhaseParams,
    /// `1 + (m beta gamma)^-1`; `None` when the margin is zero.
    pub t1_pred: Option<f64>,
    pub t1_emp: Option<usize>,
    /// First epoch after polarization where the clean residual falls under
    /// the threshold or a noisy weight leaves zero.
    pub t2_emp: Option<usize>,
    pub residual_threshold: f64,
    /// Clean weights stayed in `[1/2, 1]` and noisy in `[0, 1/2]` up to `t1_emp`.
    pub early_bands_held: bool,
    /// Noisy weights stayed at zero over `(t1_emp, t2_emp]`.
    pub filtering_held: bool,
    /// `|u^v|_inf` never rose by more than the tolerance over `(t1_emp, t2_emp]`.
    pub val_residual_monotone: bool,
    /// First epoch after `t2_emp` with a noisy weight above `1e-3`.
    pub perturbation_onset: Option<usize>,
    pub max_noisy_weight_after_t2: Option<f64>,
    /// Sign changes of clean-subset residual entries after each entry first
    /// drops below the threshold (a proxy for sign stability).
    pub val_sign_flips: usize,
    pub final_val_residual_inf: f64,
}

impl fmt::Display for PhaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |e| e.to_string());
        match self.t1_pred {
            Some(t) => writeln!(f, "t1_pred = {t:.4}")?,
            None => writeln!(f, "t1_pred = none (zero margin)")?,
        }
        writeln!(f, "t1_emp = {}", opt(self.t1_emp))?;
        writeln!(
            f,
            "t2_emp = {} (operational: threshold {:.4e}, kappa {})",
            opt(self.t2_emp),
            self.residual_threshold,
            self.params.kappa
        )?;
        writeln!(f, "early_bands_held = {}", self.early_bands_held)?;
        writeln!(f, "filtering_held = {}", self.filtering_held)?;
        writeln!(f, "val_residual_monotone = {}", self.val_residual_monotone)?;
        writeln!(f, "perturbation_onset = {}", opt(self.perturbation_onset))?;
        writeln!(f, "val_sign_flips = {}", self.val_sign_flips)?;
        write!(f, "final_val_residual_inf = {:.6e}", self.final_val_residual_inf)
    }
}

fn check_trace(trace: &RunTrace) -> Result<()> {
    if trace.epochs.is_empty() {
        return Err(Error::config("trace has no epochs"));
    }
    let n = trace.num_samples();
    for rec in &trace.epochs {
        if rec.weights.len() != n {
            return Err(Error::Dimension { what: "epoch weights", expected: n, got: rec.weights.len() });
        }
        if rec.val_residuals.is_empty() {
            return Err(Error::config(format!("epoch {} has no clean-subset residuals", rec.epoch)));
        }
    }
    Ok(())
}

pub fn detect_phases(trace: &RunTrace, params: PhaseParams) -> Result<PhaseReport> {
    check_trace(trace)?;
    let noisy = &trace.noisy;
    let threshold = params.residual_threshold();
    let polarized =
        |w: &[f64]| w.iter().zip(noisy).all(|(&wi, &ni)| if ni { wi <= POLAR_TOL } else { wi >= 1.0 - POLAR_TOL });
    let t1_pos = trace.epochs.iter().position(|r| polarized(&r.weights));
    let t1_emp = t1_pos.map(|k| trace.epochs[k].epoch);

    let band_end = t1_pos.unwrap_or(trace.epochs.len() - 1);
    let early_bands_held = trace.epochs[..=band_end].iter().all(|r| {
        r.weights.iter().zip(noisy).all(|(&w, &ni)| {
            if ni {
                (0.0..=0.5 + BAND_TOL).contains(&w)
            } else {
                (0.5 - BAND_TOL..=1.0).contains(&w)
            }
        })
    });

    let max_noisy = |w: &[f64]| w.iter().zip(noisy).filter(|(_, &ni)| ni).map(|(w, _)| *w).fold(0.0, f64::max);
    let t2_pos = t1_pos.and_then(|k1| {
        (k1 + 1..trace.epochs.len()).find(|&k| {
            let r = &trace.epochs[k];
            r.val_residual_inf() <= threshold || max_noisy(&r.weights) > NOISY_FLOOR
        })
    });
    let t2_emp = t2_pos.map(|k| trace.epochs[k].epoch);

    let (filtering_held, val_residual_monotone) = match t1_pos {
        Some(k1) => {
            let end = t2_pos.unwrap_or(trace.epochs.len() - 1);
            let window = &trace.epochs[k1..=end];
            let held = window[1..].iter().all(|r| max_noisy(&r.weights) <= NOISY_FLOOR);
            let mono = window.windows(2).all(|p| p[1].val_residual_inf() <= p[0].val_residual_inf() + MONOTONE_TOL);
            (held, mono)
        }
        None => (false, false),
    };

    let (perturbation_onset, max_after) = match t2_pos {
        Some(k2) => {
            let after = &trace.epochs[k2 + 1..];
            let onset = after.iter().find(|r| max_noisy(&r.weights) > ONSET_LEVEL).map(|r| r.epoch);
            let peak = after
                .iter()
                .map(|r| max_noisy(&r.weights))
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
            (onset, peak)
        }
        None => (None, None),
    };

    let m = trace.epochs[0].val_residuals.len();
    let mut flips = 0;
    for j in 0..m {
        let mut crossed = false;
        let mut last_sign = 0.0;
        for r in &trace.epochs {
            let v = r.val_residuals[j];
            if !crossed && v.abs() <= threshold {
                crossed = true;
                last_sign = v.signum();
                continue;
            }
            if crossed && v != 0.0 {
                if v.signum() != last_sign && last_sign != 0.0 {
                    flips += 1;
                }
                last_sign = v.signum();
            }
        }
    }

    let t1_pred = (params.gamma > 0.0 && params.beta > 0.0 && params.m > 0).then(|| params.t1_pred());
    Ok(PhaseReport {
        params,
        t1_pred,
        t1_emp,
        t2_emp,
        residual_threshold: threshold,
        early_bands_held,
        filtering_held,
        val_residual_monotone,
        perturbation_onset,
        max_noisy_weight_after_t2: max_after,
        val_sign_flips: flips,
        final_val_residual_inf: trace.epochs.last().expect("checked").val_residual_inf(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prop1Distribution {
    /// i.i.d. `N(0, I / dim)` features with the linear kernel.
    Gaussian { dim: usize },
    /// Tangent features of a fresh network on inputs uniform on the sphere.
    TangentAtInit { input_dim: usize, width: usize, depth: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Config {
    pub distribution: Prop1Distribution,
    pub m_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Result {
    pub m_grid: Vec<usize>,
    pub median_c0: Vec<f64>,
    pub median_s: Vec<f64>,
    pub median_ratio: Vec<f64>,
    pub slope_s: f64,
    pub slope_c0: f64,
    pub slope_ratio: f64,
    pub replicates: usize,
}

impl Prop1Result {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,median_abs_c0,median_abs_s,median_ratio\n");
        for k in 0..self.m_grid.len() {
            let _ =
                writeln!(out, "{},{},{},{}", self.m_grid[k], self.median_c0[k], self.median_s[k], self.median_ratio[k]);
        }
        out
    }
}

/// `(c0, S)` for a clean Gram `K_m`, a held-out row `K(x, X_clean)` and
/// clean residuals `u`: `c0 = -(1/m) 1^T K_m u`, `S = K(x, X_clean) u`.
pub fn prop1_statistics(clean_gram: &GramMatrix, row: &[f64], u: &[f64]) -> Result<(f64, f64)> {
    let m = clean_gram.cols;
    if clean_gram.rows != m || row.len() != m || u.len() != m {
        return Err(Error::Dimension { what: "clean-subset gram", expected: m, got: row.len() });
    }
    let ku = clean_gram.mul_vec(u)?;
    let c0 = -ku.iter().sum::<f64>() / m as f64;
    let s = row.iter().zip(u).map(|(k, v)| k * v).sum();
    Ok((c0, s))
}

fn sample_features(
    dist: &Prop1Distribution,
    count: usize,
    rng: &mut seed::Rng,
    net: Option<&crate::net::NetParams>,
) -> Result<Vec<Vec<f64>>> {
    use rand_distr::{Distribution, Normal};
    match dist {
        Prop1Distribution::Gaussian { dim } => {
            let normal = Normal::new(0.0, 1.0 / (*dim as f64).sqrt()).expect("positive std");
            Ok((0..count).map(|_| (0..*dim).map(|_| normal.sample(rng)).collect()).collect())
        }
        Prop1Distribution::TangentAtInit { input_dim, .. } => {
            let net = net.expect("network provided for tangent features");
            (0..count)
                .map(|_| {
                    let v: Vec<f64> = (0..*input_dim).map(|_| rand_distr::StandardNormal.sample(rng)).collect();
                    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let x: Vec<f64> = v.iter().map(|a| a / n).collect();
                    crate::kernel::tangent_feature(net, &x)
                })
                .collect()
        }
    }
}

/// Monte-Carlo medians of `|c0|`, `|S_i|` and their ratio over a grid of
/// clean-subset sizes with balanced residuals `u^v = -y^v`.
pub fn prop1_monte_carlo(cfg: &Prop1Config) -> Result<Prop1Result> {
    if cfg.m_grid.len() < 3 {
        return Err(Error::config("slope fitting needs at least three grid points"));
    }
    if cfg.m_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("m grid must be strictly increasing"));
    }
    if let Some(m) = cfg.m_grid.iter().find(|&&m| m % 2 == 1 || m == 0) {
        return Err(Error::Imbalanced(format!("m = {m} cannot hold balanced +-1 labels")));
    }
    if cfg.replicates == 0 {
        return Err(Error::config("need at least one replicate"));
    }
    let (mut med_c0, mut med_s, mut med_ratio) = (Vec::new(), Vec::new(), Vec::new());
    for &m in &cfg.m_grid {
        let draws: Vec<(f64, f64)> = (0..cfg.replicates as u64)
            .into_par_iter()
            .map(|r| {
                let s = seed::derive_indexed(cfg.seed, &format!("prop1-m{m}"), r);
                let mut rng = seed::rng(s);
                let net = match &cfg.distribution {
                    Prop1Distribution::TangentAtInit { input_dim, width, depth } => Some(init_network(
                        &NetConfig::uniform(*input_dim, *depth, *width, 1, Activation::Tanh, seed::derive(s, "net")),
                    )?),
                    Prop1Distribution::Gaussian { .. } => None,
                };
                let feats = sample_features(&cfg.distribution, m + 1, &mut rng, net.as_ref())?;
                let (held, clean) = feats.split_first().expect("m + 1 draws");
                let gram = crate::kernel::feature_gram(clean, clean)?;
                let row: Vec<f64> = clean.iter().map(|c| c.iter().zip(held).map(|(a, b)| a * b).sum()).collect();
                // balanced labels: first half +1, second half -1; u^v = -y^v
                let u: Vec<f64> = (0..m).map(|j| if j < m / 2 { -1.0 } else { 1.0 }).collect();
                let (c0, s) = prop1_statistics(&gram, &row, &u)?;
                Ok((c0.abs(), s.abs()))
            })
            .collect::<Result<_>>()?;
        let c0: Vec<f64> = draws.iter().map(|d| d.0).collect();
        let s: Vec<f64> = draws.iter().map(|d| d.1).collect();
        let ratio: Vec<f64> = draws.iter().filter(|d| d.1 > 0.0).map(|d| d.0 / d.1).collect();
        med_c0.push(median(&c0));
        med_s.push(median(&s));
        med_ratio.push(if ratio.is_empty() { 0.0 } else { median(&ratio) });
    }
    let ms: Vec<f64> = cfg.m_grid.iter().map(|&m| m as f64).collect();
    Ok(Prop1Result {
        slope_s: log_log_slope(&ms, &med_s)?,
        slope_c0: log_log_slope(&ms, &med_c0)?,
        slope_ratio: log_log_slope(&ms, &med_ratio)?,
        m_grid: cfg.m_grid.clone(),
        median_c0: med_c0,
        median_s: med_s,
        median_ratio: med_ratio,
        replicates: cfg.replicates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinGapConfig {
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub depth: usize,
    pub activation: Activation,
    pub eta: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub width: usize,
    pub median_gap: f64,
    pub gaps: Vec<f64>,
}

pub fn gap_table_csv(rows: &[GapRow]) -> String {
    let mut out = String::from("width,median_gap,seeds\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.width, r.median_gap, r.gaps.len());
    }
    out
}

/// `max_probe |f_lin - f|` after `steps` weighted full-batch steps from one
/// shared initialization. The linearized model evolves in function space
/// with the frozen tangent kernel and its own residuals.
pub fn linearization_gap_single(
    net: &NetConfig,
    train: &BinarySplit,
    weights: &[f64],
    probes: &[Vec<f64>],
    eta: f64,
    steps: usize,
) -> Result<f64> {
    if weights.len() != train.len() {
        return Err(Error::Dimension { what: "weights", expected: train.len(), got: weights.len() });
    }
    let mut params = init_network(net)?;
    let k_train = ntk_gram(&params, &train.x, &train.x)?;
    let k_probe = ntk_gram(&params, probes, &train.x)?;
    let mut f_lin_train = params.predict(&train.x)?;
    let mut f_lin_probe = params.predict(probes)?;
    for _ in 0..steps {
        let wu: Vec<f64> = f_lin_train.iter().zip(&train.y).zip(weights).map(|((f, y), w)| w * (f - y)).collect();
        let dt = k_train.mul_vec(&wu)?;
        let dp = k_probe.mul_vec(&wu)?;
        f_lin_train.iter_mut().zip(&dt).for_each(|(f, d)| *f -= eta * d);
        f_lin_probe.iter_mut().zip(&dp).for_each(|(f, d)| *f -= eta * d);
        params = weighted_sgd_step(&params, &train.x, &train.y, weights, eta)?;
    }
    let f = params.predict(probes)?;
    let gap = f.iter().zip(&f_lin_probe).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if !gap.is_finite() {
        return Err(Error::Numeric("linearization gap is not finite".into()));
    }
    Ok(gap)
}

/// Median gap per width over the configured seeds.
pub fn linearization_gap(
    cfg: &LinGapConfig,
    train: &BinarySplit,
    weights: &[f64],
    probes: &[Vec<f64>],
) -> Result<Vec<GapRow>> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("need at least one seed"));
    }
    let input_dim = train.x.first().map_or(0, Vec::len);
    cfg.widths
        .iter()
        .map(|&width| {
            let gaps: Vec<f64> = cfg
                .seeds
                .iter()
                .map(|&s| {
                    let net = NetConfig::uniform(input_dim, cfg.depth, width, 1, cfg.activation, s);
                    linearization_gap_single(&net, train, weights, probes, cfg.eta, cfg.steps)
                })
                .collect::<Result<_>>()?;
            Ok(GapRow { width, median_gap: median(&gaps), gaps })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    WeightDynamics,
    MeanResidual,
    NtkHist,
    CenteredNtkHist,
    WeightDistribution,
    WeightDirections,
}

impl FigureKind {
    pub const ALL: [FigureKind; 6] = [
        FigureKind::WeightDynamics,
        FigureKind::MeanResidual,
        FigureKind::NtkHist,
        FigureKind::CenteredNtkHist,
        FigureKind::WeightDistribution,
        FigureKind::WeightDirections,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FigureKind::WeightDynamics => "weight_dynamics",
            FigureKind::MeanResidual => "mean_residual",
            FigureKind::NtkHist => "ntk_hist",
            FigureKind::CenteredNtkHist => "centered_ntk_hist",
            FigureKind::WeightDistribution => "weight_distribution",
            FigureKind::WeightDirections => "weight_directions",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.name())
    }
}

impl fmt::Display for FigureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FigureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown figure kind `{s}`")))
    }
}

pub enum FigureSource<'a> {
    Trace(&'a RunTrace),
    Gram { gram: &'a GramMatrix, labels_rows: &'a [usize], labels_cols: &'a [usize] },
}

const WEIGHT_BINS: usize = 20;
const GRAM_BINS: usize = 40;

/// CSV text for one figure panel.
pub fn emit_figure_data(kind: FigureKind, source: &FigureSource<'_>) -> Result<String> {
    let mismatch = || Error::config(format!("figure `{kind}` cannot be built from this source"));
    match (kind, source) {
        (FigureKind::NtkHist | FigureKind::CenteredNtkHist, FigureSource::Gram { gram, labels_rows, labels_cols }) => {
            Ok(histogram_csv(&histogram(gram, labels_rows, labels_cols, GRAM_BINS)?))
        }
        (FigureKind::NtkHist | FigureKind::CenteredNtkHist, _) => Err(mismatch()),
        (_, FigureSource::Gram { .. }) => Err(mismatch()),
        (kind, FigureSource::Trace(trace)) => {
            check_trace(trace)?;
            Ok(match kind {
                FigureKind::WeightDynamics => weight_dynamics(trace),
                FigureKind::MeanResidual => mean_residual(trace),
                FigureKind::WeightDistribution => weight_distribution(trace),
                FigureKind::WeightDirections => weight_directions(trace),
                FigureKind::NtkHist | FigureKind::CenteredNtkHist => unreachable!("handled above"),
            })
        }
    }
}

fn weight_dynamics(trace: &RunTrace) -> String {
    let mut out = String::from("epoch,sample_id,weight,is_noisy\n");
    for r in &trace.epochs {
        for i in 0..trace.num_samples() {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, trace.sample_ids[i], r.weights[i], u8::from(trace.noisy[i]));
        }
    }
    out
}

fn mean_residual(trace: &RunTrace) -> String {
    let mut out = String::from("epoch,mean_val_residual,abs_mean_val_residual,val_residual_inf_norm\n");
    for r in &trace.epochs {
        let mean = r.val_residuals.iter().sum::<f64>() / r.val_residuals.len() as f64;
        let _ = writeln!(out, "{},{},{},{}", r.epoch, mean, mean.abs(), inf_norm(&r.val_residuals));
    }
    out
}

fn weight_distribution(trace: &RunTrace) -> String {
    let last = trace.epochs.last().expect("checked");
    let mut counts = vec![[0usize; 2]; WEIGHT_BINS];
    for (w, &n) in last.weights.iter().zip(&trace.noisy) {
        let b = ((w * WEIGHT_BINS as f64) as usize).min(WEIGHT_BINS - 1);
        counts[b][usize::from(n)] += 1;
    }
    let mut out = String::from("bin_lo,bin_hi,count,group\n");
    for (b, c) in counts.iter().enumerate() {
        let lo = b as f64 / WEIGHT_BINS as f64;
        let hi = (b + 1) as f64 / WEIGHT_BINS as f64;
        let _ = writeln!(out, "{lo},{hi},{},clean", c[0]);
        let _ = writeln!(out, "{lo},{hi},{},noisy", c[1]);
    }
    out
}

fn weight_directions(trace: &RunTrace) -> String {
    let mut out = String::from("epoch,sample_id,direction,is_noisy\n");
    for r in &trace.epochs {
        if let Some(d) = &r.directions {
            for i in 0..trace.num_samples() {
                let _ = writeln!(out, "{},{},{},{}", r.epoch, trace.sample_ids[i], d[i], u8::from(trace.noisy[i]));
            }
        }
    }
    out
}

/// Fraction of samples whose direction sign matches their status: positive
/// for clean, negative for noisy.
pub fn direction_sign_agreement(directions: &[f64], noisy: &[bool]) -> (f64, f64) {
    let (mut clean_ok, mut clean_n, mut noisy_ok, mut noisy_n) = (0usize, 0usize, 0usize, 0usize);
    for (&d, &n) in directions.iter().zip(noisy) {
        if n {
            noisy_n += 1;
            noisy_ok += usize::from(d < 0.0);
        } else {
            clean_n += 1;
            clean_ok += usize::from(d > 0.0);
        }
    }
    let frac = |ok: usize, n: usize| if n == 0 { 1.0 } else { ok as f64 / n as f64 };
    (frac(clean_ok, clean_n), frac(noisy_ok, noisy_n))
}
