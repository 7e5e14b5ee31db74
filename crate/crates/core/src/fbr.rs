//! Feature-based reweighting: a hypergradient-free surrogate for the bilevel
//! weight update.
//!
//! Each mini-batch row of the mean-centered feature Gram against the clean
//! subset is shifted by its second-best class mean, masked by label
//! agreement and summed into a direction `d_i`. Clean-looking samples get
//! `d_i >= 0` and noisy-looking ones `d_i <= 0`; the weight moves along
//! `+d_i`, mirroring how the bilevel weight rises with `u_i [K u^v]_i`.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ExampleSet;
use crate::error::{Error, Result};
use crate::kernel::{feature_mean, tangent_feature};
use crate::net::{ensure_finite, init_network, NetConfig, NetParams};
use crate::seed;
use crate::trace::{EpochRecord, RunTrace, TraceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// Last hidden-layer activations.
    Penultimate,
    /// Gradient of the summed outputs with respect to all parameters.
    Tangent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `|f(x) - e_y|^2 / 2`.
    Squared,
    /// Softmax cross-entropy.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbrConfig {
    pub alpha: f64,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub feature_map: FeatureMap,
    pub loss: Loss,
    pub batch_size: usize,
    pub epochs: usize,
    /// Classifier step size.
    pub eta: f64,
    /// Per-epoch multiplicative decay of `lambda_neg`; `None` keeps it fixed.
    pub lambda_neg_decay: Option<f64>,
    /// Seed of the per-epoch batch shuffle.
    pub seed: u64,
    pub divergence_factor: f64,
}

impl FbrConfig {
    /// `lambda_pos = 1`, `lambda_neg = 1 / (C - 1)`.
    pub fn with_defaults(num_classes: usize) -> Self {
        FbrConfig {
            alpha: 0.05,
            lambda_pos: 1.0,
            lambda_neg: 1.0 / (num_classes.max(2) - 1) as f64,
            feature_map: FeatureMap::Penultimate,
            loss: Loss::CrossEntropy,
            batch_size: 128,
            epochs: 20,
            eta: 0.5,
            lambda_neg_decay: None,
            seed: 0,
            divergence_factor: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pos >= 0.0 && self.lambda_neg >= 0.0) {
            return Err(Error::config("label-signed coefficients must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be positive, got {}", self.eta)));
        }
        if let Some(rate) = self.lambda_neg_decay {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::config(format!("lambda_neg decay {rate} outside (0, 1]")));
            }
        }
        Ok(())
    }

    fn lambda_neg_at(&self, epoch: usize) -> f64 {
        match self.lambda_neg_decay {
            Some(rate) => self.lambda_neg * rate.powi(epoch as i32),
            None => self.lambda_neg,
        }
    }
}

pub fn features(params: &NetParams, map: FeatureMap, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    match map {
        FeatureMap::Penultimate => params.penultimate_batch(xs),
        FeatureMap::Tangent => xs.par_iter().map(|x| tangent_feature(params, x)).collect(),
    }
}

/// Mean clean-subset feature.
pub fn clean_mean(clean_feats: &[Vec<f64>]) -> Result<Vec<f64>> {
    feature_mean(clean_feats)
}

fn centered(feats: &[Vec<f64>], mean: &[f64]) -> Vec<Vec<f64>> {
    feats.iter().map(|f| f.iter().zip(mean).map(|(a, b)| a - b).collect()).collect()
}

/// `<phi_i - mean, phi_j - mean>`, one row per batch example.
pub fn centered_gram_batch(batch: &[Vec<f64>], clean: &[Vec<f64>], mean: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = mean.len();
    if let Some(bad) = batch.iter().chain(clean).find(|f| f.len() != d) {
        return Err(Error::Dimension { what: "feature", expected: d, got: bad.len() });
    }
    let clean_c = centered(clean, mean);
    Ok(batch
        .par_iter()
        .map(|f| {
            let fc: Vec<f64> = f.iter().zip(mean).map(|(a, b)| a - b).collect();
            clean_c.iter().map(|c| fc.iter().zip(c).map(|(p, q)| p * q).sum()).collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowShiftRecord {
    pub class_means: Vec<f64>,
    pub top1: usize,
    pub top2: usize,
    pub shifted: Vec<f64>,
    pub masked: Vec<f64>,
    pub direction: f64,
}

/// Clean-subset indices grouped by class; every class must be present.
pub fn class_index(clean_labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if num_classes < 2 {
        return Err(Error::config("row shifting needs at least two classes"));
    }
    let mut groups = vec![Vec::new(); num_classes];
    for (j, &c) in clean_labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::config(format!("clean label {c} outside 0..{num_classes}")));
        }
        groups[c].push(j);
    }
    if let Some(class) = groups.iter().position(Vec::is_empty) {
        return Err(Error::MissingClass { class });
    }
    Ok(groups)
}

/// Class means of a Gram row and the row shifted by the second-largest one.
/// Ties go to the lowest class index. Returns `(class_means, top1, top2, shifted)`.
pub fn row_shift_with(row: &[f64], groups: &[Vec<usize>]) -> (Vec<f64>, usize, usize, Vec<f64>) {
    let means: Vec<f64> = groups.iter().map(|g| g.iter().map(|&j| row[j]).sum::<f64>() / g.len() as f64).collect();
    let mut top1 = 0;
    for c in 1..means.len() {
        if means[c] > means[top1] {
            top1 = c;
        }
    }
    let mut top2 = usize::from(top1 == 0);
    for c in 0..means.len() {
        if c != top1 && means[c] > means[top2] {
            top2 = c;
        }
    }
    let shift = means[top2];
    let shifted = row.iter().map(|k| k - shift).collect();
    (means, top1, top2, shifted)
}

pub fn row_shift(row: &[f64], clean_labels: &[usize], num_classes: usize) -> Result<RowShiftRecord> {
    if row.len() != clean_labels.len() {
        return Err(Error::Dimension { what: "gram row", expected: clean_labels.len(), got: row.len() });
    }
    let groups = class_index(clean_labels, num_classes)?;
    let (class_means, top1, top2, shifted) = row_shift_with(row, &groups);
    Ok(RowShiftRecord { class_means, top1, top2, shifted, masked: Vec::new(), direction: 0.0 })
}

/// `(lambda_pos [y_i = y_j] - lambda_neg [y_i != y_j]) * row_j`.
pub fn label_mask(shifted: &[f64], label: usize, clean_labels: &[usize], lambda_pos: f64, lambda_neg: f64) -> Vec<f64> {
    shifted.iter().zip(clean_labels).map(|(k, &c)| if c == label { lambda_pos * k } else { -lambda_neg * k }).collect()
}

/// Row sum of the masked row.
pub fn fbr_direction(masked: &[f64]) -> f64 {
    masked.iter().sum()
}

/// Full per-row pipeline: shift, mask, sum.
pub fn process_row(
    row: &[f64],
    label: usize,
    clean_labels: &[usize],
    groups: &[Vec<usize>],
    lambda_pos: f64,
    lambda_neg: f64,
) -> RowShiftRecord {
    let (class_means, top1, top2, shifted) = row_shift_with(row, groups);
    let masked = label_mask(&shifted, label, clean_labels, lambda_pos, lambda_neg);
    let direction = fbr_direction(&masked);
    RowShiftRecord { class_means, top1, top2, shifted, masked, direction }
}

/// Centered clean-subset features for one epoch.
#[derive(Debug, Clone)]
pub struct CleanReference {
    pub mean: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
}

impl CleanReference {
    pub fn at(params: &NetParams, map: FeatureMap, clean: &ExampleSet) -> Result<Self> {
        let feats = features(params, map, &clean.x)?;
        let mean = clean_mean(&feats)?;
        Ok(CleanReference {
            groups: class_index(&clean.observed, clean.num_classes)?,
            labels: clean.observed.clone(),
            features: feats,
            mean,
        })
    }
}

/// Directions `d_i` for the given training rows.
pub fn batch_directions(
    params: &NetParams,
    map: FeatureMap,
    reference: &CleanReference,
    xs: &[Vec<f64>],
    labels: &[usize],
    lambda_pos: f64,
    lambda_neg: f64,
) -> Result<Vec<f64>> {
    let feats = features(params, map, xs)?;
    let gram = centered_gram_batch(&feats, &reference.features, &reference.mean)?;
    Ok(gram
        .par_iter()
        .zip(labels)
        .map(|(row, &y)| process_row(row, y, &reference.labels, &reference.groups, lambda_pos, lambda_neg).direction)
        .collect())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-sample loss of one output vector.
pub fn sample_loss(loss: Loss, out: &[f64], label: usize) -> f64 {
    match loss {
        Loss::Squared => {
            0.5 * out.iter().enumerate().map(|(c, v)| (v - f64::from(u8::from(c == label))).powi(2)).sum::<f64>()
        }
        Loss::CrossEntropy => {
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - out[label]
        }
    }
}

fn loss_cotangent(loss: Loss, out: &[f64], label: usize, scale: f64, c: &mut Vec<f64>) {
    let p = match loss {
        Loss::Squared => out.to_vec(),
        Loss::CrossEntropy => softmax(out),
    };
    c.extend(p.iter().enumerate().map(|(k, v)| scale * (v - f64::from(u8::from(k == label)))));
}

/// `theta - eta * grad (1/|B|) sum_i w_i l_i`.
pub fn classifier_step(
    params: &NetParams,
    loss: Loss,
    xs: &[Vec<f64>],
    labels: &[usize],
    weights: &[f64],
    eta: f64,
) -> Result<NetParams> {
    if xs.is_empty() {
        return Ok(params.clone());
    }
    let inv = 1.0 / xs.len() as f64;
    let grad = params.vjp_sum(xs, |i, out, c| {
        if weights[i] == 0.0 {
            return false;
        }
        loss_cotangent(loss, out, labels[i], weights[i] * inv, c);
        true
    })?;
    ensure_finite(&grad, "weighted classifier gradient", params)?;
    Ok(params.displaced(&grad, -eta))
}

/// One mini-batch of the surrogate: directions and clipped weight update for
/// the batch members, then a classifier step using the weights they held
/// before this update. Returns the new parameters and the batch directions.
#[allow(clippy::too_many_arguments)]
pub fn process_batch(
    cfg: &FbrConfig,
    lambda_neg: f64,
    params: &NetParams,
    reference: &CleanReference,
    train: &ExampleSet,
    batch: &[usize],
    weights: &mut [f64],
) -> Result<(NetParams, Vec<f64>)> {
    let xs: Vec<Vec<f64>> = batch.iter().map(|&i| train.x[i].clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|&i| train.observed[i]).collect();
    let dirs = batch_directions(params, cfg.feature_map, reference, &xs, &labels, cfg.lambda_pos, lambda_neg)?;
    let before: Vec<f64> = batch.iter().map(|&i| weights[i]).collect();
    for (&i, d) in batch.iter().zip(&dirs) {
        weights[i] = (weights[i] + cfg.alpha * d).clamp(0.0, 1.0);
    }
    let next = classifier_step(params, cfg.loss, &xs, &labels, &before, cfg.eta)?;
    Ok((next, dirs))
}

#[derive(Debug, Clone)]
pub struct FbrRun {
    pub params: NetParams,
    pub weights: Vec<f64>,
    pub trace: RunTrace,
}

fn residual_norms(params: &NetParams, set: &ExampleSet) -> Result<Vec<f64>> {
    let outs = params.forward_batch(&set.x)?;
    Ok(outs
        .iter()
        .zip(&set.observed)
        .map(|(o, &y)| o.iter().enumerate().map(|(c, v)| (v - f64::from(u8::from(c == y))).powi(2)).sum::<f64>().sqrt())
        .collect())
}

fn losses(params: &NetParams, loss: Loss, set: &ExampleSet) -> Result<Vec<f64>> {
    let outs = params.forward_batch(&set.x)?;
    Ok(outs.iter().zip(&set.observed).map(|(o, &y)| sample_loss(loss, o, y)).collect())
}

/// Runs the surrogate from a fresh network with `num_classes` outputs.
/// Trace epoch `t` holds the weights and losses at the start of epoch `t`
/// and the directions computed during it; a final record closes epoch `T`.
pub fn fbr_train(cfg: &FbrConfig, train: &ExampleSet, clean: &ExampleSet, net: &NetConfig) -> Result<FbrRun> {
    cfg.validate()?;
    clean.check_balanced_clean()?;
    if train.is_empty() {
        return Err(Error::config("empty training split"));
    }
    if net.output_dim() != train.num_classes {
        return Err(Error::config(format!(
            "network has {} outputs for {} classes",
            net.output_dim(),
            train.num_classes
        )));
    }
    let mut params = init_network(net)?;
    let mut weights = vec![0.5; train.len()];
    let mut trace = RunTrace::new(TraceKind::Fbr, train.ids.clone(), train.noise_mask.clone(), clean.ids.clone());
    let limit = cfg.divergence_factor * residual_norms(&params, train)?.iter().copied().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..=cfg.epochs {
        let norms = residual_norms(&params, train)?;
        let worst = norms.iter().copied().fold(0.0, f64::max);
        if !worst.is_finite() || worst > limit {
            return Err(Error::Diverged { epoch, residual: worst, limit });
        }
        let mut record = EpochRecord {
            epoch,
            weights: weights.clone(),
            residuals: losses(&params, cfg.loss, train)?,
            val_residuals: losses(&params, cfg.loss, clean)?,
            directions: None,
            e1_norm: None,
            e2_norm: None,
        };
        if epoch == cfg.epochs {
            trace.epochs.push(record);
            break;
        }
        let reference = CleanReference::at(&params, cfg.feature_map, clean)?;
        let lambda_neg = cfg.lambda_neg_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive_indexed(cfg.seed, "fbr-batches", epoch as u64)));
        let mut dirs = vec![0.0; train.len()];
        for batch in order.chunks(cfg.batch_size) {
            let (next, d) = process_batch(cfg, lambda_neg, &params, &reference, train, batch, &mut weights)?;
            for (&i, v) in batch.iter().zip(d) {
                dirs[i] = v;
            }
            params = next;
        }
        record.directions = Some(dirs);
        trace.epochs.push(record);
    }
    Ok(FbrRun { params, weights, trace })
}

/// Fraction of examples whose predicted class (argmax output) matches the
/// latent label.
pub fn accuracy(params: &NetParams, set: &ExampleSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let outs = params.forward_batch(&set.x)?;
    let hits = outs
        .iter()
        .zip(&set.clean)
        .filter(|(o, &y)| {
            let mut best = 0;
            for c in 1..o.len() {
                if o[c] > o[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(hits as f64 / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_clusters, inject_noise, take_clean_subset, NoiseKind, NoiseSpec};
    use crate::net::Activation;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn clean_mean_examples() {
        assert_eq!(clean_mean(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(clean_mean(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(clean_mean(&[]), Err(Error::EmptyCleanSet)));
        let mut rng = seed::rng(3);
        let feats: Vec<Vec<f64>> =
            (0..100).map(|_| (0..16).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let mu = clean_mean(&feats).unwrap();
        assert!(mu.iter().map(|v| v * v).sum::<f64>().sqrt() <= 3.0 * (16.0f64 / 100.0).sqrt());
    }

    #[test]
    fn centered_gram_examples() {
        let mean = vec![0.5, 0.5];
        let g = centered_gram_batch(&[vec![0.5, 0.5]], &[vec![1.0, 0.0], vec![0.0, 1.0]], &mean).unwrap();
        assert_eq!(g, vec![vec![0.0, 0.0]]);
        let eye =
            centered_gram_batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0])
                .unwrap();
        assert_eq!(eye, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(centered_gram_batch(&[vec![1.0]], &[vec![1.0, 0.0]], &mean).is_err());
    }

    #[test]
    fn two_class_shift_by_hand() {
        // class-means (0.8, -0.3)
        let row = [0.8, 0.8, -0.3, -0.3];
        let r = row_shift(&row, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!((r.top1, r.top2), (0, 1));
        assert_eq!(r.class_means, vec![0.8, -0.3]);
        let shifted_means = [(r.shifted[0] + r.shifted[1]) / 2.0, (r.shifted[2] + r.shifted[3]) / 2.0];
        assert!((shifted_means[0] - 1.1).abs() < 1e-12 && shifted_means[1].abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let r = row_shift(&[0.4; 6], &[0, 1, 2, 0, 1, 2], 3).unwrap();
        assert_eq!((r.top1, r.top2), (0, 1));
        assert!(r.shifted.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_class_is_an_error() {
        assert!(matches!(row_shift(&[1.0, 2.0], &[0, 0], 2), Err(Error::MissingClass { class: 1 })));
    }

    #[test]
    fn mask_and_direction_examples() {
        let labels = [0, 1, 0];
        assert_eq!(label_mask(&[1.0, 2.0, 3.0], 0, &labels, 1.0, 0.0), vec![1.0, -0.0, 3.0]);
        let zero = label_mask(&[1.0, 2.0, 3.0], 0, &labels, 0.0, 0.0);
        assert_eq!(fbr_direction(&zero), 0.0);
        let lambda_neg = FbrConfig::with_defaults(10).lambda_neg;
        let m = label_mask(&[1.0, 9.0], 0, &[0, 3], 1.0, lambda_neg);
        assert!((m[1] + 1.0).abs() < 1e-12);
        assert_eq!(fbr_direction(&[1.0, -0.5, 0.25]), 0.75);
        assert_eq!(fbr_direction(&[0.0; 4]), 0.0);
    }

    #[test]
    fn column_permutation_leaves_direction() {
        let row = [0.3, -0.2, 0.9, 0.1, -0.4, 0.25];
        let labels = [0, 1, 2, 0, 1, 2];
        let groups = class_index(&labels, 3).unwrap();
        let d = process_row(&row, 1, &labels, &groups, 1.0, 0.5).direction;
        let perm = [5, 3, 0, 1, 4, 2];
        let row_p: Vec<f64> = perm.iter().map(|&j| row[j]).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&j| labels[j]).collect();
        let groups_p = class_index(&labels_p, 3).unwrap();
        let dp = process_row(&row_p, 1, &labels_p, &groups_p, 1.0, 0.5).direction;
        assert!((d - dp).abs() < 1e-12);
    }

    fn clusters(n: usize, m: usize, classes: usize, rate: f64, seed: u64) -> (ExampleSet, ExampleSet) {
        let set = gen_clusters(n + m, 8, classes, 3.0, seed).unwrap();
        let noisy = inject_noise(&set, &NoiseSpec { kind: NoiseKind::Symmetric { rate }, seed: seed + 1 }).unwrap();
        let (clean, train) = take_clean_subset(&noisy, m, seed + 2).unwrap();
        (train, clean)
    }

    #[test]
    fn classifier_step_uses_pre_update_weights() {
        let (train, clean) = clusters(40, 8, 2, 0.3, 5);
        let net = NetConfig::uniform(8, 1, 32, 2, Activation::Tanh, 1);
        let mut params = init_network(&net).unwrap();
        // give the output layer some signal so the step touches every layer
        let mut rng = seed::rng(9);
        for v in params.layer_weights_mut(1) {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut cfg = FbrConfig::with_defaults(2);
        cfg.alpha = 10.0;
        let reference = CleanReference::at(&params, cfg.feature_map, &clean).unwrap();
        let batch: Vec<usize> = (0..10).collect();
        let mut weights = vec![0.5; train.len()];
        let (next, _) = process_batch(&cfg, cfg.lambda_neg, &params, &reference, &train, &batch, &mut weights).unwrap();
        assert!(weights[..10].iter().any(|w| *w != 0.5));
        assert!(weights[10..].iter().all(|w| *w == 0.5));
        let xs: Vec<Vec<f64>> = batch.iter().map(|&i| train.x[i].clone()).collect();
        let ys: Vec<usize> = batch.iter().map(|&i| train.observed[i]).collect();
        let old = classifier_step(&params, cfg.loss, &xs, &ys, &[0.5; 10], cfg.eta).unwrap();
        let new = classifier_step(&params, cfg.loss, &xs, &ys, &weights[..10], cfg.eta).unwrap();
        assert_eq!(next.theta(), old.theta());
        assert_ne!(next.theta(), new.theta());
    }

    #[test]
    fn noiseless_clusters_push_weights_up() {
        let (train, clean) = clusters(400, 40, 2, 0.0, 8);
        let mut cfg = FbrConfig::with_defaults(2);
        cfg.lambda_neg = 0.0;
        cfg.epochs = 10;
        cfg.batch_size = 50;
        let run = fbr_train(&cfg, &train, &clean, &NetConfig::uniform(8, 1, 128, 2, Activation::Tanh, 2)).unwrap();
        let mean = run.weights.iter().sum::<f64>() / run.weights.len() as f64;
        assert!(mean >= 0.95, "mean weight {mean}");
        assert_eq!(run.trace.epochs.len(), 11);
        assert!(run.weights.iter().all(|w| (0.0..=1.0).contains(w)));
    }

    #[test]
    fn noisy_clusters_separate_weights() {
        let (train, clean) = clusters(800, 80, 4, 0.4, 13);
        let mut cfg = FbrConfig::with_defaults(4);
        cfg.epochs = 10;
        cfg.batch_size = 64;
        let run = fbr_train(&cfg, &train, &clean, &NetConfig::uniform(8, 1, 128, 4, Activation::Tanh, 2)).unwrap();
        let s = run.trace.weight_summary(run.trace.last().unwrap());
        assert!(s.mean_clean_weight.unwrap() - s.mean_noisy_weight.unwrap() >= 0.5, "{s:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn non_dominant_class_means_are_nonpositive(
            classes in prop::sample::select(vec![2usize, 4, 10]),
            per_class in 1usize..5,
            seed in 0u64..u64::MAX,
        ) {
            let mut rng = seed::rng(seed);
            let labels: Vec<usize> = (0..classes * per_class).map(|j| j % classes).collect();
            let row: Vec<f64> = labels.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
            let r = row_shift(&row, &labels, classes).unwrap();
            let groups = class_index(&labels, classes).unwrap();
            for (c, g) in groups.iter().enumerate() {
                let m = g.iter().map(|&j| r.shifted[j]).sum::<f64>() / g.len() as f64;
                if c != r.top1 {
                    prop_assert!(m <= 1e-12);
                }
                if c == r.top2 {
                    prop_assert!(m.abs() <= 1e-12);
                }
            }
            prop_assert!(r.class_means[r.top1] >= r.class_means[r.top2]);
            for (c, m) in r.class_means.iter().enumerate() {
                if c != r.top1 && c != r.top2 {
                    prop_assert!(r.class_means[r.top2] >= *m);
                }
            }
        }

        #[test]
        fn mask_sign_follows_label_agreement(
            row in prop::collection::vec(-3.0f64..3.0, 6),
            label in 0usize..3,
            lp in 0.0f64..2.0,
            ln in 0.0f64..2.0,
        ) {
            let labels = [0, 1, 2, 0, 1, 2];
            let masked = label_mask(&row, label, &labels, lp, ln);
            for j in 0..6 {
                let expected = if labels[j] == label { lp * row[j] } else { -ln * row[j] };
                prop_assert!(masked[j] == 0.0 || masked[j].signum() == expected.signum());
            }
        }

        #[test]
        fn directions_ignore_global_feature_shift(seed in 0u64..10_000) {
            let mut rng = seed::rng(seed);
            let normal = |rng: &mut crate::seed::Rng, d: usize| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
            let clean: Vec<Vec<f64>> = (0..8).map(|_| normal(&mut rng, 5)).collect();
            let batch: Vec<Vec<f64>> = (0..4).map(|_| normal(&mut rng, 5)).collect();
            let v: Vec<f64> = normal(&mut rng, 5).iter().map(|a| a * 10.0).collect();
            let labels: Vec<usize> = (0..8).map(|j| j % 2).collect();
            let groups = class_index(&labels, 2).unwrap();
            let dirs = |b: &[Vec<f64>], c: &[Vec<f64>]| -> Vec<f64> {
                let mu = clean_mean(c).unwrap();
                centered_gram_batch(b, c, &mu).unwrap().iter().enumerate()
                    .map(|(i, row)| process_row(row, i % 2, &labels, &groups, 1.0, 1.0).direction).collect()
            };
            let shift = |fs: &[Vec<f64>]| fs.iter().map(|f| f.iter().zip(&v).map(|(a, b)| a + b).collect()).collect::<Vec<Vec<f64>>>();
            let a = dirs(&batch, &clean);
            let b = dirs(&shift(&batch), &shift(&clean));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }
}
