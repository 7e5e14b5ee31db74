//! Experiment configuration.
//!
//! A config is a TOML document with one master `seed` and a section per
//! component. Every stochastic stream is seeded from the master seed through
//! [`Seeds`], so a single integer reproduces a whole run.

use std::collections::BTreeMap;
use std::path::Path;

use rwlab_core::data::{gen_clusters, inject_noise, take_clean_subset, Dataset, NoiseKind, NoiseSpec, SplitTag};
use rwlab_core::fbr::{FbrConfig, FeatureMap, Loss};
use rwlab_core::net::{Activation, NetConfig};
use rwlab_core::seed::derive;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub meta: MetaSection,
    #[serde(default)]
    pub fbr: FbrSection,
    #[serde(default)]
    pub phases: PhaseSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Training pool size, clean subset included.
    pub n: usize,
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// `none`, `symmetric` or `asymmetric`.
    #[serde(default = "default_noise")]
    pub noise: String,
    #[serde(default)]
    pub rate: f64,
    /// Target class per source class for asymmetric noise.
    #[serde(default)]
    pub class_map: Vec<usize>,
    /// Size of the trusted subset drawn from unflipped examples.
    pub clean_size: usize,
    /// Noise-free held-out examples.
    #[serde(default)]
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection { width: 512, depth: 1, activation: Activation::Tanh }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub eta: f64,
    /// Weight step scale; when absent, `t1_target` sets it from the
    /// measured kernel margin, and without either [`DEFAULT_BETA`] applies.
    pub beta: Option<f64>,
    /// Polarization epoch to aim for when `beta` is absent.
    pub t1_target: Option<f64>,
    pub epochs: usize,
    pub diagnostics: bool,
    pub divergence_factor: f64,
}

impl Default for MetaSection {
    fn default() -> Self {
        MetaSection { eta: 1e-3, beta: None, t1_target: None, epochs: 100, diagnostics: false, divergence_factor: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbrSection {
    pub alpha: f64,
    pub lambda_pos: f64,
    /// Defaults to `1 / (C - 1)`.
    pub lambda_neg: Option<f64>,
    pub feature_map: FeatureMap,
    pub loss: Loss,
    pub batch_size: usize,
    pub epochs: usize,
    pub eta: f64,
    pub lambda_neg_decay: Option<f64>,
    pub divergence_factor: f64,
}

impl Default for FbrSection {
    fn default() -> Self {
        let d = FbrConfig::with_defaults(2);
        FbrSection {
            alpha: d.alpha,
            lambda_pos: d.lambda_pos,
            lambda_neg: None,
            feature_map: d.feature_map,
            loss: d.loss,
            batch_size: d.batch_size,
            epochs: d.epochs,
            eta: d.eta,
            lambda_neg_decay: d.lambda_neg_decay,
            divergence_factor: d.divergence_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSection {
    pub kappa: f64,
}

impl Default for PhaseSection {
    fn default() -> Self {
        PhaseSection { kappa: 3.0 }
    }
}

pub const DEFAULT_BETA: f64 = 0.01;

fn default_classes() -> usize {
    2
}

fn default_separation() -> f64 {
    6.0
}

fn default_noise() -> String {
    "none".into()
}

/// Stream seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub noise: u64,
    pub clean_subset: u64,
    pub net: u64,
    pub batches: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Seeds {
            data: derive(master, "data"),
            noise: derive(master, "noise"),
            clean_subset: derive(master, "clean-subset"),
            net: derive(master, "net"),
            batches: derive(master, "batches"),
        }
    }

    pub fn as_map(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("data".to_string(), self.data),
            ("noise".to_string(), self.noise),
            ("clean_subset".to_string(), self.clean_subset),
            ("net".to_string(), self.net),
            ("batches".to_string(), self.batches),
        ])
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.data;
        if d.clean_size == 0 {
            return Err(CliError::Usage("data.clean_size must be positive".into()));
        }
        if d.clean_size >= d.n {
            return Err(CliError::Usage(format!("data.clean_size {} must be below data.n {}", d.clean_size, d.n)));
        }
        if self.net.width == 0 || self.net.depth == 0 {
            return Err(CliError::Usage("net.width and net.depth must be positive".into()));
        }
        if self.phases.kappa <= 0.0 {
            return Err(CliError::Usage("phases.kappa must be positive".into()));
        }
        if self.meta.beta.is_some() && self.meta.t1_target.is_some() {
            return Err(CliError::Usage("meta.beta and meta.t1_target are mutually exclusive".into()));
        }
        if let Some(b) = self.meta.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(CliError::Usage(format!("meta.beta must be positive, got {b}")));
            }
        }
        if let Some(t) = self.meta.t1_target {
            if t <= 1.0 {
                return Err(CliError::Usage(format!("meta.t1_target must exceed 1, got {t}")));
            }
        }
        self.noise_spec()?;
        Ok(())
    }

    pub fn noise_spec(&self) -> CliResult<NoiseSpec> {
        let d = &self.data;
        let kind = match d.noise.as_str() {
            "none" => NoiseKind::None,
            "symmetric" => NoiseKind::Symmetric { rate: d.rate },
            "asymmetric" => NoiseKind::Asymmetric { rate: d.rate, class_map: d.class_map.clone() },
            other => return Err(CliError::Usage(format!("unknown noise kind `{other}`"))),
        };
        Ok(NoiseSpec { kind, seed: self.seeds().noise })
    }

    pub fn net_config(&self, input_dim: usize, outputs: usize) -> NetConfig {
        NetConfig::uniform(input_dim, self.net.depth, self.net.width, outputs, self.net.activation, self.seeds().net)
    }

    pub fn fbr_config(&self, num_classes: usize) -> FbrConfig {
        let f = &self.fbr;
        let mut cfg = FbrConfig::with_defaults(num_classes);
        cfg.alpha = f.alpha;
        cfg.lambda_pos = f.lambda_pos;
        if let Some(l) = f.lambda_neg {
            cfg.lambda_neg = l;
        }
        cfg.feature_map = f.feature_map;
        cfg.loss = f.loss;
        cfg.batch_size = f.batch_size;
        cfg.epochs = f.epochs;
        cfg.eta = f.eta;
        cfg.lambda_neg_decay = f.lambda_neg_decay;
        cfg.divergence_factor = f.divergence_factor;
        cfg.seed = self.seeds().batches;
        cfg
    }

    /// Generates the clustered dataset with `train`, `clean_subset` and
    /// (if requested) a noise-free `test` split.
    pub fn build_dataset(&self) -> CliResult<Dataset> {
        let d = &self.data;
        let seeds = self.seeds();
        let all = gen_clusters(d.n + d.test_size, d.dim, d.classes, d.separation, seeds.data)?;
        let pool_idx: Vec<usize> = (0..d.n).collect();
        let test_idx: Vec<usize> = (d.n..d.n + d.test_size).collect();
        let pool = all.select(&pool_idx, SplitTag::Train);
        let noisy = inject_noise(&pool, &self.noise_spec()?)?;
        let (clean, train) = take_clean_subset(&noisy, d.clean_size, seeds.clean_subset)?;
        let mut splits = vec![train, clean];
        if d.test_size > 0 {
            splits.push(all.select(&test_idx, SplitTag::Test));
        }
        Ok(Dataset { num_classes: d.classes, dim: d.dim, noise: self.noise_spec()?, splits })
    }
}
