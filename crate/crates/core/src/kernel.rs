//! Empirical tangent kernels, centering transforms and the sign-separation
//! and spectral diagnostics used by the reweighting analysis.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetParams;

/// Square Grams above this size are refused by the eigen-solver.
pub const MAX_SPECTRAL_DIM: usize = 2000;

const DEFAULT_BINS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "shift", rename_all = "snake_case")]
pub enum Centering {
    None,
    MeanCentered,
    ScalarShifted(f64),
}

/// Dense row-major Gram between a row set and a column set.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<u64>,
    pub centering: Centering,
    /// Fingerprint of the parameters the features were taken at, if any.
    pub snapshot: Option<u64>,
}

impl GramMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::Dimension { what: "gram row", expected: m, got: bad.len() });
        }
        Ok(GramMatrix {
            rows: n,
            cols: m,
            values: rows.concat(),
            row_ids: (0..n as u64).collect(),
            col_ids: (0..m as u64).collect(),
            centering: Centering::None,
            snapshot: None,
        })
    }

    pub fn with_ids(mut self, row_ids: &[u64], col_ids: &[u64]) -> Self {
        assert_eq!(row_ids.len(), self.rows);
        assert_eq!(col_ids.len(), self.cols);
        self.row_ids = row_ids.to_vec();
        self.col_ids = col_ids.to_vec();
        self
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols && self.row_ids == self.col_ids
    }

    /// `K u` for a column-space vector `u`.
    pub fn mul_vec(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.cols {
            return Err(Error::Dimension { what: "gram operand", expected: self.cols, got: u.len() });
        }
        Ok((0..self.rows).map(|i| self.row(i).iter().zip(u).map(|(k, v)| k * v).sum()).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Extreme eigenvalues `(lambda_min, lambda_max)` of a square Gram.
    pub fn spectrum(&self) -> Result<(f64, f64)> {
        if self.rows != self.cols {
            return Err(Error::config(format!("spectrum of a non-square {}x{} gram", self.rows, self.cols)));
        }
        if self.rows > MAX_SPECTRAL_DIM {
            return Err(Error::config(format!(
                "gram of size {} exceeds the eigen-solver limit of {MAX_SPECTRAL_DIM}",
                self.rows
            )));
        }
        if self.rows == 0 {
            return Err(Error::config("spectrum of an empty gram"));
        }
        let n = self.rows;
        // symmetrize away rounding asymmetry before the symmetric solver
        let mat = DMatrix::from_fn(n, n, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)));
        let eig = mat.symmetric_eigen();
        let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((lo, hi))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Tangent feature of `x`: the parameter gradient of the output, or of the
/// summed outputs for multi-output networks.
pub fn tangent_feature(params: &NetParams, x: &[f64]) -> Result<Vec<f64>> {
    if params.config().output_dim() == 1 {
        params.gradient(x)
    } else {
        params.output_sum_gradient(x)
    }
}

/// `J(theta; X_rows)^T J(theta; X_cols)`. Column features are held in
/// memory; row features are streamed.
pub fn ntk_gram(params: &NetParams, x_rows: &[Vec<f64>], x_cols: &[Vec<f64>]) -> Result<GramMatrix> {
    let col_feats: Vec<Vec<f64>> = x_cols.par_iter().map(|x| tangent_feature(params, x)).collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = x_rows
        .par_iter()
        .map(|x| {
            let g = tangent_feature(params, x)?;
            Ok(col_feats.iter().map(|c| dot(&g, c)).collect())
        })
        .collect::<Result<_>>()?;
    let mut gram = GramMatrix::from_rows(rows)?;
    if x_rows.is_empty() {
        gram.cols = x_cols.len();
        gram.col_ids = (0..x_cols.len() as u64).collect();
    }
    check_finite(&gram)?;
    gram.snapshot = Some(params.snapshot_id());
    Ok(gram)
}

/// Inner products between explicit feature vectors.
pub fn feature_gram(row_feats: &[Vec<f64>], col_feats: &[Vec<f64>]) -> Result<GramMatrix> {
    let dim = col_feats.first().or(row_feats.first()).map_or(0, Vec::len);
    if let Some(bad) = row_feats.iter().chain(col_feats).find(|f| f.len() != dim) {
        return Err(Error::Dimension { what: "feature", expected: dim, got: bad.len() });
    }
    let rows: Vec<Vec<f64>> = row_feats.par_iter().map(|r| col_feats.iter().map(|c| dot(r, c)).collect()).collect();
    let mut gram = GramMatrix::from_rows(rows)?;
    gram.cols = col_feats.len();
    gram.col_ids = (0..col_feats.len() as u64).collect();
    check_finite(&gram)?;
    Ok(gram)
}

/// Arithmetic mean of a non-empty feature set.
pub fn feature_mean(feats: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = feats.first().ok_or(Error::EmptyCleanSet)?;
    let mut mean = vec![0.0; first.len()];
    for f in feats {
        if f.len() != mean.len() {
            return Err(Error::Dimension { what: "feature", expected: mean.len(), got: f.len() });
        }
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    let k = feats.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// `<phi_i - mean, phi_j - mean>` with the mean taken over the column set.
pub fn mean_centered_feature_gram(row_feats: &[Vec<f64>], col_feats: &[Vec<f64>]) -> Result<GramMatrix> {
    let mean = feature_mean(col_feats)?;
    let shift = |fs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        fs.iter().map(|f| f.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect()
    };
    let mut gram = feature_gram(&shift(row_feats), &shift(col_feats))?;
    gram.centering = Centering::MeanCentered;
    Ok(gram)
}

pub enum CenterMode<'a> {
    /// Center against the column-set feature mean. Needs the Gram of the
    /// column set with itself (which may be `g` when `g` is square).
    MeanCentered {
        cols_gram: &'a GramMatrix,
    },
    ScalarShifted(f64),
}

/// Applies a centering transform to a Gram expressed only through inner
/// products: `K_ij - <g_i, mean> - <mean, g_j> + <mean, mean>`.
pub fn center_gram(g: &GramMatrix, mode: CenterMode<'_>) -> Result<GramMatrix> {
    if g.cols == 0 {
        return Err(Error::EmptyCleanSet);
    }
    let mut out = g.clone();
    match mode {
        CenterMode::ScalarShifted(mu) => {
            out.values.iter_mut().for_each(|v| *v -= mu);
            out.centering = Centering::ScalarShifted(mu);
        }
        CenterMode::MeanCentered { cols_gram } => {
            if cols_gram.rows != g.cols || cols_gram.cols != g.cols {
                return Err(Error::Dimension { what: "column-set gram", expected: g.cols, got: cols_gram.rows });
            }
            let m = g.cols as f64;
            let col_means: Vec<f64> =
                (0..g.cols).map(|j| (0..g.cols).map(|k| cols_gram.get(k, j)).sum::<f64>() / m).collect();
            let grand = col_means.iter().sum::<f64>() / m;
            for i in 0..g.rows {
                let row_mean = g.row(i).iter().sum::<f64>() / m;
                for j in 0..g.cols {
                    out.values[i * g.cols + j] = g.get(i, j) - row_mean - col_means[j] + grand;
                }
            }
            out.centering = Centering::MeanCentered;
        }
    }
    Ok(out)
}

fn check_finite(g: &GramMatrix) -> Result<()> {
    if let Some(pos) = g.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "gram entry ({}, {}) is not finite",
            pos / g.cols.max(1),
            pos % g.cols.max(1)
        )));
    }
    Ok(())
}

fn check_labels(g: &GramMatrix, labels_rows: &[usize], labels_cols: &[usize]) -> Result<()> {
    if labels_rows.len() != g.rows {
        return Err(Error::Dimension { what: "row labels", expected: g.rows, got: labels_rows.len() });
    }
    if labels_cols.len() != g.cols {
        return Err(Error::Dimension { what: "column labels", expected: g.cols, got: labels_cols.len() });
    }
    Ok(())
}

/// Midpoint of the within-class and cross-class entry means.
pub fn estimate_shift(g: &GramMatrix, labels_rows: &[usize], labels_cols: &[usize]) -> Result<f64> {
    check_labels(g, labels_rows, labels_cols)?;
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..g.rows {
        for j in 0..g.cols {
            if labels_rows[i] == labels_cols[j] {
                within += g.get(i, j);
                nw += 1;
            } else {
                cross += g.get(i, j);
                nc += 1;
            }
        }
    }
    if nw == 0 || nc == 0 {
        return Err(Error::config("shift estimate needs both within-class and cross-class pairs"));
    }
    Ok(0.5 * (within / nw as f64 + cross / nc as f64))
}

/// Fraction of entries whose sign matches the class pattern: positive within
/// a class, negative across classes.
pub fn sign_agreement(g: &GramMatrix, labels_rows: &[usize], labels_cols: &[usize]) -> Result<f64> {
    check_labels(g, labels_rows, labels_cols)?;
    let total = g.rows * g.cols;
    if total == 0 {
        return Ok(0.0);
    }
    let mut agree = 0usize;
    for i in 0..g.rows {
        for j in 0..g.cols {
            let v = g.get(i, j);
            if (labels_rows[i] == labels_cols[j] && v > 0.0) || (labels_rows[i] != labels_cols[j] && v < 0.0) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / total as f64)
}

/// Smallest `|entry|` when every entry carries its class sign, else 0.
pub fn sign_margin(g: &GramMatrix, labels_rows: &[usize], labels_cols: &[usize]) -> Result<f64> {
    check_labels(g, labels_rows, labels_cols)?;
    let mut margin = f64::INFINITY;
    for i in 0..g.rows {
        for j in 0..g.cols {
            let signed = if labels_rows[i] == labels_cols[j] { g.get(i, j) } else { -g.get(i, j) };
            if signed <= 0.0 {
                return Ok(0.0);
            }
            margin = margin.min(signed);
        }
    }
    Ok(if margin.is_finite() { margin } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub within: usize,
    pub cross: usize,
}

/// Equal-width histogram of Gram entries split by pair type.
pub fn histogram(
    g: &GramMatrix,
    labels_rows: &[usize],
    labels_cols: &[usize],
    bins: usize,
) -> Result<Vec<HistogramBin>> {
    check_labels(g, labels_rows, labels_cols)?;
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    if g.values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = g.values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            within: 0,
            cross: 0,
        })
        .collect();
    for i in 0..g.rows {
        for j in 0..g.cols {
            let b = (((g.get(i, j) - lo) / width) as usize).min(bins - 1);
            if labels_rows[i] == labels_cols[j] {
                out[b].within += 1;
            } else {
                out[b].cross += 1;
            }
        }
    }
    Ok(out)
}

/// CSV with columns `bin_lo,bin_hi,count,pair_type`.
pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,pair_type\n");
    for b in bins {
        let _ = writeln!(out, "{},{},{},within", b.lo, b.hi, b.within);
        let _ = writeln!(out, "{},{},{},cross", b.lo, b.hi, b.cross);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    /// `(lambda_min, lambda_max)`, present for square Grams.
    pub eigen_range: Option<(f64, f64)>,
    pub sign_margin: f64,
    pub sign_agreement: f64,
    pub shift_estimate: Option<f64>,
    pub histogram: Vec<HistogramBin>,
    /// Set when the labels used are observed rather than latent.
    pub observed_labels: bool,
}

/// Spectral range (square Grams only), sign margin and agreement, shift
/// estimate and entry histogram. Pass latent labels where they are known;
/// `observed_labels` flags the weaker variant.
pub fn kernel_stats(
    g: &GramMatrix,
    labels_rows: &[usize],
    labels_cols: &[usize],
    observed_labels: bool,
) -> Result<KernelStats> {
    check_labels(g, labels_rows, labels_cols)?;
    let eigen_range = if g.rows == g.cols && g.rows > 0 { Some(g.spectrum()?) } else { None };
    Ok(KernelStats {
        eigen_range,
        sign_margin: sign_margin(g, labels_rows, labels_cols)?,
        sign_agreement: sign_agreement(g, labels_rows, labels_cols)?,
        shift_estimate: estimate_shift(g, labels_rows, labels_cols).ok(),
        histogram: histogram(g, labels_rows, labels_cols, DEFAULT_BINS)?,
        observed_labels,
    })
}
