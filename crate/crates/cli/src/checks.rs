//! Randomized correctness checks shared by `self-check` and the acceptance
//! suite. Each check reports its worst observed error; callers apply the
//! tolerance.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rwlab_core::fbr::{centered_gram_batch, class_index, clean_mean, process_row, row_shift};
use rwlab_core::meta::{finite_difference_check, BinarySplit};
use rwlab_core::net::{Activation, NetConfig, NetParams};
use rwlab_core::seed::{self, derive_indexed, Rng};

use crate::error::CliResult;

pub const HYPERGRAD_TOL: f64 = 1e-6;
pub const CENTERING_TOL: f64 = 1e-9;
pub const ROW_SHIFT_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub cases: usize,
    pub worst: f64,
}

impl CheckOutcome {
    pub fn passed(&self, tol: f64) -> bool {
        self.worst <= tol
    }
}

fn unit_ball_point(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
    v.iter().map(|a| a / norm).collect()
}

fn random_binary_split(n: usize, dim: usize, rng: &mut Rng) -> BinarySplit {
    let x = (0..n).map(|_| unit_ball_point(dim, rng)).collect();
    let y = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    BinarySplit::new(x, y)
}

fn gaussian_vec(len: usize, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Exact hypergradient against central differences on random tiny
/// instances: depth in {1, 2}, width <= 16, n <= 8, m <= 4, eta <= 1e-3,
/// all parameters (output layer included) drawn from N(0, 1).
pub fn hypergrad_oracle(instances: usize, master: u64) -> CliResult<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = seed::rng(derive_indexed(master, "hypergrad-oracle", k as u64));
        let depth = rng.random_range(1..=2);
        let width = rng.random_range(2..=16);
        let dim = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=4);
        let eta = rng.random_range(1e-5..=1e-3);
        let activation = [Activation::Tanh, Activation::Softplus, Activation::Erf][k % 3];
        let cfg = NetConfig::uniform(dim, depth, width, 1, activation, 0);
        let params = NetParams::from_theta(&cfg, gaussian_vec(cfg.param_count(), &mut rng))?;
        let train = random_binary_split(n, dim, &mut rng);
        let clean = random_binary_split(m, dim, &mut rng);
        let w: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let err = finite_difference_check(&params, &train, &clean, &w, eta, FD_STEP)?;
        worst = worst.max(err);
    }
    Ok(CheckOutcome { cases: instances, worst })
}

/// FBR directions before and after adding one random vector to every
/// feature (batch and clean subset alike). Reports the worst change
/// relative to the direction's magnitude.
pub fn centering_invariance(instances: usize, master: u64) -> CliResult<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for k in 0..instances {
        let mut rng = seed::rng(derive_indexed(master, "centering-invariance", k as u64));
        let classes = [2, 4, 10][k % 3];
        let dim = rng.random_range(2..=32);
        let per_class = rng.random_range(1..=4);
        let labels: Vec<usize> = (0..classes * per_class).map(|j| j % classes).collect();
        let clean: Vec<Vec<f64>> = labels.iter().map(|_| gaussian_vec(dim, &mut rng)).collect();
        let batch_len = rng.random_range(1..=16);
        let batch: Vec<Vec<f64>> = (0..batch_len).map(|_| gaussian_vec(dim, &mut rng)).collect();
        let batch_labels: Vec<usize> = (0..batch_len).map(|_| rng.random_range(0..classes)).collect();
        let offset = gaussian_vec(dim, &mut rng);
        let shift = |fs: &[Vec<f64>]| -> Vec<Vec<f64>> {
            fs.iter().map(|f| f.iter().zip(&offset).map(|(a, b)| a + b).collect()).collect()
        };
        let groups = class_index(&labels, classes)?;
        let directions = |batch: &[Vec<f64>], clean: &[Vec<f64>]| -> CliResult<Vec<f64>> {
            let mean = clean_mean(clean)?;
            let gram = centered_gram_batch(batch, clean, &mean)?;
            Ok(gram
                .iter()
                .zip(&batch_labels)
                .map(|(row, &y)| process_row(row, y, &labels, &groups, 1.0, 1.0 / (classes - 1) as f64).direction)
                .collect())
        };
        let before = directions(&batch, &clean)?;
        let after = directions(&shift(&batch), &shift(&clean))?;
        for (a, b) in before.iter().zip(&after) {
            let rel = if *a == 0.0 && *b == 0.0 { 0.0 } else { (a - b).abs() / a.abs().max(f64::MIN_POSITIVE) };
            worst = worst.max(rel);
            cases += 1;
        }
    }
    Ok(CheckOutcome { cases, worst })
}

/// Post-shift class means on random rows: the largest value over non-top
/// classes of the shifted mean, and the magnitude of the runner-up's
/// shifted mean, folded into one worst-case number.
pub fn row_shift_law(rows: usize, master: u64) -> CliResult<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for k in 0..rows {
        let mut rng = seed::rng(derive_indexed(master, "row-shift", k as u64));
        let classes = [2, 4, 10][k % 3];
        let per_class = rng.random_range(1..=8);
        let mut labels: Vec<usize> = (0..classes * per_class).map(|j| j % classes).collect();
        labels.shuffle(&mut rng);
        let row = gaussian_vec(labels.len(), &mut rng);
        let r = row_shift(&row, &labels, classes)?;
        let groups = class_index(&labels, classes)?;
        for (c, g) in groups.iter().enumerate() {
            let mean = g.iter().map(|&j| r.shifted[j]).sum::<f64>() / g.len() as f64;
            if c == r.top2 {
                worst = worst.max(mean.abs());
            } else if c != r.top1 {
                worst = worst.max(mean);
            }
        }
    }
    Ok(CheckOutcome { cases: rows, worst })
}
