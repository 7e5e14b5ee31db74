//! Subcommand implementations. Each writes its outputs and a manifest into
//! a fresh run directory and returns that directory.

use std::fmt;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rwlab_core::analysis::{
    detect_phases, emit_figure_data, gap_table_csv, linearization_gap, prop1_monte_carlo, FigureKind, FigureSource,
    LinGapConfig, PhaseParams, Prop1Config, Prop1Distribution,
};
use rwlab_core::data::{signed_label, Dataset, ExampleSet, SplitTag};
use rwlab_core::fbr::{accuracy, fbr_train};
use rwlab_core::kernel::{center_gram, ntk_gram, sign_margin, CenterMode};
use rwlab_core::meta::{binary_splits, finite_difference_check, Backend, BinarySplit, MetaConfig, MetaTrainer};
use rwlab_core::net::{init_network, Activation, NetParams};
use rwlab_core::trace::RunTrace;
use serde::{Deserialize, Serialize};

use crate::checks::{self, CENTERING_TOL, HYPERGRAD_TOL, ROW_SHIFT_TOL};
use crate::config::{ExperimentConfig, DEFAULT_BETA};
use crate::error::{CliError, CliResult};
use crate::manifest::{create_run_dir, sha256_file, FileRecord, RunManifest, MANIFEST_FILE};

pub const DATA_FILE: &str = "data.rlab";
pub const CONFIG_FILE: &str = "config.toml";
const SELF_CHECK_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    MetaExact,
    MetaFirstOrder,
    MetaNtk,
    Fbr,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::MetaExact => "meta-exact",
            Mode::MetaFirstOrder => "meta-first-order",
            Mode::MetaNtk => "meta-ntk",
            Mode::Fbr => "fbr",
        }
    }

    fn backend(self) -> Option<Backend> {
        match self {
            Mode::MetaExact => Some(Backend::Exact),
            Mode::MetaFirstOrder => Some(Backend::FirstOrder),
            Mode::MetaNtk => Some(Backend::NtkFrozen),
            Mode::Fbr => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        [Mode::MetaExact, Mode::MetaFirstOrder, Mode::MetaNtk, Mode::Fbr]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown training mode `{s}`")))
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn finish(mut manifest: RunManifest, dir: &Path, started: Instant) -> CliResult<PathBuf> {
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.write(dir)?;
    Ok(dir.to_path_buf())
}

pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(Dataset::read_rlab(BufReader::new(file))?)
}

fn split(ds: &Dataset, tag: SplitTag) -> CliResult<&ExampleSet> {
    ds.split(tag).ok_or_else(|| CliError::Usage(format!("dataset has no `{tag}` split")))
}

/// `gen-data`: generates the dataset described by the config.
pub fn gen_data(config_path: &Path) -> CliResult<PathBuf> {
    let started = Instant::now();
    let cfg = ExperimentConfig::load(config_path)?;
    let ds = cfg.build_dataset()?;
    let dir = create_run_dir("gen-data", cfg.seed)?;
    let data_path = dir.join(DATA_FILE);
    let file = std::fs::File::create(&data_path).map_err(|e| CliError::io(&data_path, e))?;
    ds.write_rlab(std::io::BufWriter::new(file))?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let record = FileRecord::of(&data_path)?;
    let train = split(&ds, SplitTag::Train)?;
    println!("dataset {}", data_path.display());
    println!("sha256 {}", record.sha256);
    println!("train_flip_fraction {:.6}", train.noise_fraction());

    let mut manifest = RunManifest::new("gen-data").with_config(&cfg);
    manifest.outputs = vec![record.clone(), FileRecord::of(&dir.join(CONFIG_FILE))?];
    manifest.dataset = Some(record);
    manifest.summary.notes.insert("train_flip_fraction".into(), format!("{:.6}", train.noise_fraction()));
    for s in &ds.splits {
        manifest.summary.notes.insert(format!("{}_size", s.split), s.len().to_string());
    }
    finish(manifest, &dir, started)
}

#[derive(Debug, Clone)]
pub struct TrainRequest {
    pub mode: Mode,
    pub config: ExperimentConfig,
    pub data: PathBuf,
    pub self_check: bool,
    /// Checksum the dataset must match, when replaying.
    pub expected_sha256: Option<String>,
}

impl TrainRequest {
    /// Rebuilds the request recorded in a training manifest.
    pub fn from_manifest(path: &Path) -> CliResult<Self> {
        let m = RunManifest::read(path)?;
        if m.command != "train" {
            return Err(CliError::Usage(format!("{} records a `{}` run, not `train`", path.display(), m.command)));
        }
        let mode: Mode = m.mode.as_deref().ok_or_else(|| CliError::Usage("manifest has no mode".into()))?.parse()?;
        let config = m.config.ok_or_else(|| CliError::Usage("manifest has no config".into()))?;
        let dataset = m.dataset.ok_or_else(|| CliError::Usage("manifest has no dataset".into()))?;
        Ok(TrainRequest {
            mode,
            config,
            data: PathBuf::from(dataset.path),
            self_check: m.self_check,
            expected_sha256: Some(dataset.sha256),
        })
    }
}

/// `train`: runs one training mode and writes its trace files.
pub fn train(req: &TrainRequest) -> CliResult<PathBuf> {
    let started = Instant::now();
    let cfg = &req.config;
    cfg.validate()?;
    let data_path = std::fs::canonicalize(&req.data).map_err(|e| CliError::io(&req.data, e))?;
    let sha = sha256_file(&data_path)?;
    if let Some(expected) = &req.expected_sha256 {
        if *expected != sha {
            return Err(CliError::Usage(format!(
                "dataset {} checksum {sha} does not match the recorded {expected}",
                data_path.display()
            )));
        }
    }
    let ds = read_dataset(&data_path)?;
    let dir = create_run_dir(&format!("train-{}", req.mode), cfg.seed)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let mut manifest = RunManifest::new("train").with_config(cfg);
    manifest.mode = Some(req.mode.to_string());
    manifest.self_check = req.self_check;
    manifest.dataset = Some(FileRecord { path: data_path.display().to_string(), sha256: sha });

    let outcome = match req.mode.backend() {
        Some(backend) => train_meta(cfg, &ds, backend, req.self_check, &mut manifest),
        None => train_fbr(cfg, &ds, &mut manifest),
    };
    let (trace, failure) = match outcome {
        Ok(trace) => (Some(trace), None),
        Err(failed) => {
            let (trace, e) = *failed;
            (trace, Some(e))
        }
    };
    if let Some(trace) = &trace {
        if !trace.epochs.is_empty() {
            let files = trace.write_dir(&dir)?;
            for f in files {
                manifest.outputs.push(FileRecord::of(&dir.join(f))?);
            }
        }
        manifest.summary.epochs_completed = trace.epochs.last().map(|r| r.epoch);
    }
    manifest.outputs.push(FileRecord::of(&dir.join(CONFIG_FILE))?);
    if let Some(e) = &failure {
        manifest.summary.failure = Some(e.to_string());
    }
    let dir = finish(manifest, &dir, started)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(dir),
    }
}

/// A failed run keeps whatever trace it produced.
type TrainOutcome = Result<RunTrace, Box<(Option<RunTrace>, CliError)>>;

fn sign_accuracy(params: &NetParams, set: &ExampleSet) -> CliResult<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let f = params.predict(&set.x)?;
    let hits = f.iter().zip(&set.clean).filter(|(v, &c)| v.signum() == signed_label(c)).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Mean-centered tangent kernel sign margin between the training pool and
/// the clean subset at initialization, by latent label.
pub fn init_margin(params: &NetParams, train: &ExampleSet, clean: &ExampleSet) -> CliResult<f64> {
    let raw = ntk_gram(params, &train.x, &clean.x)?;
    let cc = ntk_gram(params, &clean.x, &clean.x)?;
    let centered = center_gram(&raw, CenterMode::MeanCentered { cols_gram: &cc })?;
    Ok(sign_margin(&centered, &train.clean, &clean.clean)?)
}

/// Weight step scale: explicit, or chosen so the predicted polarization
/// epoch equals `t1_target` under the measured margin.
pub fn resolve_beta(cfg: &ExperimentConfig, m: usize, gamma: f64) -> CliResult<f64> {
    match (cfg.meta.beta, cfg.meta.t1_target) {
        (Some(beta), _) => Ok(beta),
        (None, None) => Ok(DEFAULT_BETA),
        (None, Some(t1)) if gamma > 0.0 => Ok(1.0 / ((t1 - 1.0) * m as f64 * gamma)),
        (None, Some(_)) => Err(CliError::Usage("meta.t1_target needs a positive kernel margin; set meta.beta".into())),
    }
}

fn train_meta(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    backend: Backend,
    self_check: bool,
    manifest: &mut RunManifest,
) -> TrainOutcome {
    let setup = || -> CliResult<_> {
        let train = split(ds, SplitTag::Train)?;
        let clean = split(ds, SplitTag::CleanSubset)?;
        let (tr, cl) = binary_splits(train, clean)?;
        let net = cfg.net_config(ds.dim, 1);
        let params = init_network(&net)?;
        let gamma = init_margin(&params, train, clean)?;
        let beta = resolve_beta(cfg, cl.len(), gamma)?;
        Ok((tr, cl, net, params, gamma, beta))
    };
    let (tr, cl, net, params, gamma, beta) = setup().map_err(|e| Box::new((None, e)))?;
    manifest.summary.gamma_hat = Some(gamma);
    manifest.summary.beta = Some(beta);
    let mcfg = MetaConfig {
        eta: cfg.meta.eta,
        beta,
        epochs: cfg.meta.epochs,
        backend,
        diagnostics: cfg.meta.diagnostics,
        divergence_factor: cfg.meta.divergence_factor,
    };
    if self_check {
        let w = vec![0.5; tr.len()];
        let err = finite_difference_check(&params, &tr, &cl, &w, mcfg.eta, SELF_CHECK_STEP)
            .map_err(|e| Box::new((None, e.into())))?;
        manifest.summary.self_check_rel_err = Some(err);
        println!("self_check hypergradient rel_err {err:.3e}");
        if err > HYPERGRAD_TOL {
            return Err(Box::new((
                None,
                CliError::CheckFailed(format!("hypergradient self-check failed: rel err {err:.3e}")),
            )));
        }
    }
    let phase_params =
        PhaseParams { m: cl.len(), beta, gamma, width: cfg.net.width, eta: mcfg.eta, kappa: cfg.phases.kappa };
    manifest.summary.phase_params = Some(phase_params);

    let mut trainer = MetaTrainer::new(&mcfg, &tr, &cl, &net).map_err(|e| Box::new((None, e.into())))?;
    for _ in 0..mcfg.epochs {
        if let Err(e) = trainer.step() {
            return Err(Box::new((Some(trainer.trace().clone()), e.into())));
        }
    }
    let run = trainer.finish().map_err(|e| Box::new((None, e.into())))?;
    let mut report = || -> CliResult<()> {
        manifest.summary.final_weights = run.trace.last().map(|r| run.trace.weight_summary(r));
        manifest.summary.phase_report = Some(detect_phases(&run.trace, phase_params)?);
        manifest.summary.train_accuracy = Some(sign_accuracy(&run.params, split(ds, SplitTag::Train)?)?);
        if let Some(test) = ds.split(SplitTag::Test) {
            manifest.summary.test_accuracy = Some(sign_accuracy(&run.params, test)?);
        }
        Ok(())
    };
    match report() {
        Ok(()) => Ok(run.trace),
        Err(e) => Err(Box::new((Some(run.trace), e))),
    }
}

fn train_fbr(cfg: &ExperimentConfig, ds: &Dataset, manifest: &mut RunManifest) -> TrainOutcome {
    let mut run = || -> CliResult<_> {
        let train = split(ds, SplitTag::Train)?;
        let clean = split(ds, SplitTag::CleanSubset)?;
        let fcfg = cfg.fbr_config(ds.num_classes);
        let net = cfg.net_config(ds.dim, ds.num_classes);
        let run = fbr_train(&fcfg, train, clean, &net)?;
        manifest.summary.final_weights = run.trace.last().map(|r| run.trace.weight_summary(r));
        manifest.summary.train_accuracy = Some(accuracy(&run.params, train)?);
        if let Some(test) = ds.split(SplitTag::Test) {
            manifest.summary.test_accuracy = Some(accuracy(&run.params, test)?);
        }
        Ok(run.trace)
    };
    run().map_err(|e| Box::new((None, e)))
}

/// Overrides for the phase-detection parameters recorded in a manifest.
#[derive(Debug, Clone, Default)]
pub struct PhaseOverrides {
    pub m: Option<usize>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub width: Option<usize>,
    pub eta: Option<f64>,
    pub kappa: Option<f64>,
}

fn missing(flag: &str) -> CliError {
    CliError::Usage(format!("no manifest parameters found; pass --{flag}"))
}

/// `analyze phases`: phase detection on a trace directory.
pub fn analyze_phases(run: &Path, o: &PhaseOverrides) -> CliResult<PathBuf> {
    let started = Instant::now();
    let trace = RunTrace::read_dir(run)?;
    let manifest_path = run.join(MANIFEST_FILE);
    let source = if manifest_path.exists() { Some(RunManifest::read(&manifest_path)?) } else { None };
    let recorded = source.as_ref().and_then(|m| m.summary.phase_params);
    let params = PhaseParams {
        m: o.m.or(recorded.map(|p| p.m)).ok_or_else(|| missing("m"))?,
        beta: o.beta.or(recorded.map(|p| p.beta)).ok_or_else(|| missing("beta"))?,
        gamma: o.gamma.or(recorded.map(|p| p.gamma)).ok_or_else(|| missing("gamma"))?,
        width: o.width.or(recorded.map(|p| p.width)).ok_or_else(|| missing("width"))?,
        eta: o.eta.or(recorded.map(|p| p.eta)).ok_or_else(|| missing("eta"))?,
        kappa: o.kappa.or(recorded.map(|p| p.kappa)).unwrap_or(3.0),
    };
    let report = detect_phases(&trace, params)?;
    let dir = create_run_dir("analyze-phases", source.and_then(|m| m.master_seed).unwrap_or(0))?;
    let text = format!("{report}\n");
    print!("{text}");
    write_file(&dir.join("phases.txt"), &text)?;
    write_file(&dir.join("phases.json"), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    let mut manifest = RunManifest::new("analyze phases");
    manifest.summary.phase_params = Some(params);
    manifest.summary.phase_report = Some(report);
    manifest.outputs = vec![FileRecord::of(&dir.join("phases.txt"))?, FileRecord::of(&dir.join("phases.json"))?];
    manifest.summary.notes.insert("trace_dir".into(), run.display().to_string());
    finish(manifest, &dir, started)
}

/// `analyze prop1`: Monte-Carlo scaling of the kernel statistics.
pub fn analyze_prop1(cfg: &Prop1Config) -> CliResult<PathBuf> {
    let started = Instant::now();
    let result = prop1_monte_carlo(cfg)?;
    let dir = create_run_dir("analyze-prop1", cfg.seed)?;
    write_file(&dir.join("prop1.csv"), &result.to_csv())?;
    write_file(&dir.join("prop1.json"), &(serde_json::to_string_pretty(&result).expect("result serializes") + "\n"))?;
    println!("slope_abs_s {:.4}", result.slope_s);
    println!("slope_abs_c0 {:.4}", result.slope_c0);
    println!("slope_ratio {:.4}", result.slope_ratio);
    let mut manifest = RunManifest::new("analyze prop1");
    manifest.master_seed = Some(cfg.seed);
    manifest.outputs = vec![FileRecord::of(&dir.join("prop1.csv"))?, FileRecord::of(&dir.join("prop1.json"))?];
    manifest.summary.notes.insert(
        "distribution".into(),
        match cfg.distribution {
            Prop1Distribution::Gaussian { dim } => format!("gaussian dim={dim}"),
            Prop1Distribution::TangentAtInit { input_dim, width, depth } => {
                format!("tangent input_dim={input_dim} width={width} depth={depth}")
            }
        },
    );
    manifest.summary.notes.insert("replicates".into(), cfg.replicates.to_string());
    finish(manifest, &dir, started)
}

#[derive(Debug, Clone)]
pub struct LinGapRequest {
    pub data: PathBuf,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub depth: usize,
    pub activation: Activation,
    pub eta: f64,
    pub steps: usize,
    pub probes: usize,
    /// Leading training examples used; the step size must stay below the
    /// stability limit of their unnormalized kernel.
    pub train_size: usize,
}

/// `analyze lingap`: gap between the network and its linearization after
/// uniform-weight training on the dataset's training split.
pub fn analyze_lingap(req: &LinGapRequest) -> CliResult<PathBuf> {
    let started = Instant::now();
    let ds = read_dataset(&req.data)?;
    let pool = split(&ds, SplitTag::Train)?;
    let head: Vec<usize> = (0..pool.len().min(req.train_size)).collect();
    let train = BinarySplit::from_examples(&pool.select(&head, SplitTag::Train))?;
    let probe_pool = ds.split(SplitTag::Test).unwrap_or(split(&ds, SplitTag::Train)?);
    let probes: Vec<Vec<f64>> = probe_pool.x.iter().take(req.probes.max(1)).cloned().collect();
    let weights = vec![1.0; train.len()];
    let cfg = LinGapConfig {
        widths: req.widths.clone(),
        seeds: req.seeds.clone(),
        depth: req.depth,
        activation: req.activation,
        eta: req.eta,
        steps: req.steps,
    };
    let rows = linearization_gap(&cfg, &train, &weights, &probes)?;
    let dir = create_run_dir("analyze-lingap", req.seeds.first().copied().unwrap_or(0))?;
    let csv = gap_table_csv(&rows);
    print!("{csv}");
    write_file(&dir.join("lingap.csv"), &csv)?;
    let mut manifest = RunManifest::new("analyze lingap");
    manifest.dataset = Some(FileRecord::of(&req.data)?);
    manifest.outputs = vec![FileRecord::of(&dir.join("lingap.csv"))?];
    manifest.summary.notes.insert("eta".into(), req.eta.to_string());
    manifest.summary.notes.insert("steps".into(), req.steps.to_string());
    manifest.summary.notes.insert("train_size".into(), train.len().to_string());
    finish(manifest, &dir, started)
}

/// `analyze figures`: one CSV per figure panel for a training run. The
/// kernel panels are recomputed at the run's initialization.
pub fn analyze_figures(run: &Path) -> CliResult<PathBuf> {
    let started = Instant::now();
    let trace = RunTrace::read_dir(run)?;
    let recorded = RunManifest::read(&run.join(MANIFEST_FILE))?;
    let cfg = recorded.config.clone().ok_or_else(|| CliError::Usage("run manifest has no config".into()))?;
    let mode: Mode =
        recorded.mode.as_deref().ok_or_else(|| CliError::Usage("run manifest has no mode".into()))?.parse()?;
    let data = recorded.dataset.as_ref().ok_or_else(|| CliError::Usage("run manifest has no dataset".into()))?;
    let data_path = PathBuf::from(&data.path);
    if sha256_file(&data_path)? != data.sha256 {
        warn!("dataset {} changed since the run; kernel panels may not match", data_path.display());
    }
    let ds = read_dataset(&data_path)?;
    let train = split(&ds, SplitTag::Train)?;
    let clean = split(&ds, SplitTag::CleanSubset)?;
    let outputs = if mode == Mode::Fbr { ds.num_classes } else { 1 };
    let params = init_network(&cfg.net_config(ds.dim, outputs))?;
    info!("recomputing {}x{} tangent kernel", train.len(), clean.len());
    let raw = ntk_gram(&params, &train.x, &clean.x)?;
    let cc = ntk_gram(&params, &clean.x, &clean.x)?;
    let centered = center_gram(&raw, CenterMode::MeanCentered { cols_gram: &cc })?;

    let dir = create_run_dir("analyze-figures", cfg.seed)?;
    let mut manifest = RunManifest::new("analyze figures").with_config(&cfg);
    manifest.mode = Some(mode.to_string());
    manifest.dataset = Some(data.clone());
    for kind in FigureKind::ALL {
        let source = match kind {
            FigureKind::NtkHist => {
                FigureSource::Gram { gram: &raw, labels_rows: &train.clean, labels_cols: &clean.clean }
            }
            FigureKind::CenteredNtkHist => {
                FigureSource::Gram { gram: &centered, labels_rows: &train.clean, labels_cols: &clean.clean }
            }
            _ => FigureSource::Trace(&trace),
        };
        let path = dir.join(kind.file_name());
        write_file(&path, &emit_figure_data(kind, &source)?)?;
        println!("{}", path.display());
        manifest.outputs.push(FileRecord::of(&path)?);
    }
    manifest.summary.notes.insert("trace_dir".into(), run.display().to_string());
    finish(manifest, &dir, started)
}

#[derive(Debug, Clone, Copy)]
pub struct SelfCheckRequest {
    pub instances: usize,
    pub rows: usize,
    pub seed: u64,
}

/// `self-check`: the randomized oracles at the requested budget.
pub fn self_check(req: &SelfCheckRequest) -> CliResult<PathBuf> {
    let started = Instant::now();
    let results = [
        ("hypergradient_vs_finite_differences", checks::hypergrad_oracle(req.instances, req.seed)?, HYPERGRAD_TOL),
        ("mean_centering_invariance", checks::centering_invariance(req.instances, req.seed)?, CENTERING_TOL),
        ("row_shift_law", checks::row_shift_law(req.rows, req.seed)?, ROW_SHIFT_TOL),
    ];
    let mut report = String::from("check,cases,worst,tolerance,status\n");
    let mut manifest = RunManifest::new("self-check");
    manifest.master_seed = Some(req.seed);
    let mut failed = Vec::new();
    for (name, outcome, tol) in results {
        let status = if outcome.passed(tol) { "PASS" } else { "FAIL" };
        println!("{status} {name}: worst {:.3e} over {} cases (tol {tol:.0e})", outcome.worst, outcome.cases);
        report.push_str(&format!("{name},{},{:e},{tol:e},{status}\n", outcome.cases, outcome.worst));
        manifest.summary.notes.insert(name.into(), format!("{status} worst={:e}", outcome.worst));
        if !outcome.passed(tol) {
            failed.push(name);
        }
    }
    let dir = create_run_dir("self-check", req.seed)?;
    write_file(&dir.join("self_check.csv"), &report)?;
    manifest.outputs = vec![FileRecord::of(&dir.join("self_check.csv"))?];
    let dir = finish(manifest, &dir, started)?;
    if failed.is_empty() {
        Ok(dir)
    } else {
        Err(CliError::CheckFailed(format!("self-check failed: {}", failed.join(", "))))
    }
}
