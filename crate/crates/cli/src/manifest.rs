//! Run manifests and run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rwlab_core::analysis::{PhaseParams, PhaseReport};
use rwlab_core::trace::WeightSummary;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUT_DIR_ENV: &str = "RWLAB_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> CliResult<Self> {
        Ok(FileRecord { path: path.display().to_string(), sha256: sha256_file(path)? })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_completed: Option<usize>,
    pub test_accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub final_weights: Option<WeightSummary>,
    /// Mean-centered kernel sign margin at initialization.
    pub gamma_hat: Option<f64>,
    /// Weight step scale actually used.
    pub beta: Option<f64>,
    pub phase_params: Option<PhaseParams>,
    pub phase_report: Option<PhaseReport>,
    /// Relative error of the hypergradient against central differences.
    pub self_check_rel_err: Option<f64>,
    pub failure: Option<String>,
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub mode: Option<String>,
    pub config: Option<ExperimentConfig>,
    pub master_seed: Option<u64>,
    pub seeds: BTreeMap<String, u64>,
    pub self_check: bool,
    pub dataset: Option<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_at: String,
    pub wall_clock_secs: f64,
    pub summary: RunSummary,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            tool_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            command: command.to_string(),
            mode: None,
            config: None,
            master_seed: None,
            seeds: BTreeMap::new(),
            self_check: false,
            dataset: None,
            outputs: Vec::new(),
            started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            wall_clock_secs: 0.0,
            summary: RunSummary::default(),
        }
    }

    pub fn with_config(mut self, cfg: &ExperimentConfig) -> Self {
        self.master_seed = Some(cfg.seed);
        self.seeds = cfg.seeds().as_map();
        self.config = Some(cfg.clone());
        self
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Base directory for run outputs, overridable through the environment.
pub fn out_base() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from)
}

/// Creates `<base>/<UTC timestamp>-<label>-seed<seed>`, adding a numeric
/// suffix if that name is taken.
pub fn create_run_dir(label: &str, seed: u64) -> CliResult<PathBuf> {
    let base = out_base();
    std::fs::create_dir_all(&base).map_err(|e| CliError::io(&base, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let stem = format!("{stamp}-{label}-seed{seed}");
    for k in 0.. {
        let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
        let dir = base.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}
