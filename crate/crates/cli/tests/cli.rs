use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rwlab_cli::RunManifest;
use rwlab_core::data::Dataset;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn rwlab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwlab")).args(args).env("RWLAB_OUT_DIR", out).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    assert!(o.status.success(), "command failed: {}", stderr(o));
    let s = stdout(o);
    PathBuf::from(s.lines().rev().find_map(|l| l.strip_prefix("run_dir ")).expect("run_dir line"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "seed = 4
[data]
n = 60
dim = 3
separation = 6.0
noise = \"symmetric\"
rate = 0.3
clean_size = 10
test_size = 20
[net]
width = 32
depth = 1
activation = \"tanh\"
[meta]
eta = 1e-3
beta = 0.5
epochs = 5
diagnostics = true
divergence_factor = 10.0
";

fn gen(out: &Path, cfg: &str) -> PathBuf {
    run_dir(&rwlab(out, &["gen-data", "--config", cfg])).join("data.rlab")
}

#[test]
fn gen_data_checksum_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "seed = 1\n[data]\nn = 100\ndim = 8\nclean_size = 10\n");
    let a = rwlab(tmp.path(), &["gen-data", "--config", &cfg]);
    let b = rwlab(tmp.path(), &["gen-data", "--config", &cfg]);
    let sha = |o: &Output| stdout(o).lines().find(|l| l.starts_with("sha256 ")).unwrap().to_string();
    assert_eq!(sha(&a), sha(&b));
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_ne!(da, db);
    assert_eq!(std::fs::read(da.join("data.rlab")).unwrap(), std::fs::read(db.join("data.rlab")).unwrap());
    assert!(da.join("manifest.json").exists());
}

#[test]
fn noise_rate_of_one_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "seed = 1\n[data]\nn = 100\ndim = 8\nnoise = \"symmetric\"\nrate = 1.0\nclean_size = 10\n",
    );
    let o = rwlab(tmp.path(), &["gen-data", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[0, 1)"), "{}", stderr(&o));
}

#[test]
fn flip_fraction_is_within_binomial_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "seed = 2\n[data]\nn = 5000\ndim = 4\nnoise = \"symmetric\"\nrate = 0.4\nclean_size = 100\n",
    );
    let data = gen(tmp.path(), &cfg);
    let ds = Dataset::read_rlab(std::io::BufReader::new(std::fs::File::open(data).unwrap())).unwrap();
    let flips: usize = ds.splits.iter().map(|s| s.noise_mask.iter().filter(|n| **n).count()).sum();
    let frac = flips as f64 / 5000.0;
    let sd = (0.4f64 * 0.6 / 5000.0).sqrt();
    assert!((frac - 0.4).abs() <= 4.0 * sd, "flip fraction {frac}");
}

#[test]
fn fbr_on_noiseless_data_keeps_weights_high() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "seed = 3\n[data]\nn = 240\ndim = 4\nclasses = 3\nclean_size = 30\n[net]\nwidth = 64\ndepth = 1\nactivation = \"tanh\"\n",
    );
    let data = gen(tmp.path(), &cfg);
    let dir =
        run_dir(&rwlab(tmp.path(), &["train", "--mode", "fbr", "--config", &cfg, "--data", data.to_str().unwrap()]));
    let m = RunManifest::read(&dir.join("manifest.json")).unwrap();
    assert!(m.summary.final_weights.unwrap().mean_clean_weight.unwrap() >= 0.95);
    assert!(dir.join("directions.csv").exists());
}

#[test]
fn meta_exact_passes_embedded_self_check() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let data = gen(tmp.path(), &cfg);
    let o = rwlab(
        tmp.path(),
        &["train", "--mode", "meta-exact", "--config", &cfg, "--data", data.to_str().unwrap(), "--self-check"],
    );
    let m = RunManifest::read(&run_dir(&o).join("manifest.json")).unwrap();
    assert!(m.self_check);
    assert!(m.summary.self_check_rel_err.unwrap() <= 1e-6);
    assert_eq!(m.summary.epochs_completed, Some(5));
    assert!(m.summary.phase_report.is_some());
}

#[test]
fn golden_trace_phases_match_report() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = format!("{FIXTURES}/golden_trace");
    let o = rwlab(
        tmp.path(),
        &[
            "analyze", "phases", "--run", &trace, "--m", "2", "--beta", "0.25", "--gamma", "0.5", "--width", "16",
            "--eta", "0.1", "--kappa", "0.5",
        ],
    );
    let dir = run_dir(&o);
    let golden = std::fs::read_to_string(format!("{FIXTURES}/golden_phases.txt")).unwrap();
    assert_eq!(std::fs::read_to_string(dir.join("phases.txt")).unwrap(), golden);
    assert!(golden.contains("t1_emp = 5\n") && golden.contains("t2_emp = 40 "));
}

#[test]
fn phases_without_parameters_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rwlab(tmp.path(), &["analyze", "phases", "--run", &format!("{FIXTURES}/golden_trace")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--m"));
}

#[test]
fn prop1_emits_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_dir(&rwlab(tmp.path(), &["analyze", "prop1", "--replicates", "10", "--m-grid", "64,256,1024"]));
    let csv = std::fs::read_to_string(dir.join("prop1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("m,median_abs_c0,median_abs_s,median_ratio\n"));
}

#[test]
fn figures_emit_six_panels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let data = gen(tmp.path(), &cfg);
    let run = run_dir(&rwlab(
        tmp.path(),
        &["train", "--mode", "meta-ntk", "--config", &cfg, "--data", data.to_str().unwrap()],
    ));
    let dir = run_dir(&rwlab(tmp.path(), &["analyze", "figures", "--run", run.to_str().unwrap()]));
    let csvs: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .collect();
    assert_eq!(csvs.len(), 6);
    let hist = std::fs::read_to_string(dir.join("ntk_hist.csv")).unwrap();
    let total: usize = hist.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 50 * 10);
}

#[test]
fn lingap_reports_each_width() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let data = gen(tmp.path(), &cfg);
    let o = rwlab(
        tmp.path(),
        &["analyze", "lingap", "--data", data.to_str().unwrap(), "--widths", "16,64", "--seeds", "0,1", "--steps", "5"],
    );
    let csv = std::fs::read_to_string(run_dir(&o).join("lingap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn divergence_exits_with_code_two_and_keeps_partial_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let body = SMALL.replace("eta = 1e-3", "eta = 50.0").replace("epochs = 5", "epochs = 30");
    let cfg = write_config(tmp.path(), "c.toml", &body);
    let data = gen(tmp.path(), &cfg);
    let o =
        rwlab(tmp.path(), &["train", "--mode", "meta-first-order", "--config", &cfg, "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence"));
    let runs: Vec<_> = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.to_string_lossy().contains("train-meta-first-order"))
        .collect();
    let m = RunManifest::read(&runs[0].join("manifest.json")).unwrap();
    assert!(m.summary.failure.unwrap().contains("divergence"));
}

#[test]
fn missing_input_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let o = rwlab(tmp.path(), &["train", "--mode", "fbr", "--config", &cfg, "--data", "/no/such/file.rlab"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn schema_mismatch_names_the_column() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("bad");
    std::fs::create_dir(&trace).unwrap();
    std::fs::write(trace.join("trace.csv"), "epoch,sample_id,residual,is_noisy\n0,0,0.1,0\n").unwrap();
    let o = rwlab(
        tmp.path(),
        &[
            "analyze",
            "phases",
            "--run",
            trace.to_str().unwrap(),
            "--m",
            "2",
            "--beta",
            "1",
            "--gamma",
            "1",
            "--width",
            "4",
            "--eta",
            "0.1",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing column `weight`"), "{}", stderr(&o));
}

#[test]
fn replay_rejects_changed_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let data = gen(tmp.path(), &cfg);
    let run = run_dir(&rwlab(
        tmp.path(),
        &["train", "--mode", "meta-exact", "--config", &cfg, "--data", data.to_str().unwrap()],
    ));
    let mut text = std::fs::read_to_string(&data).unwrap();
    text.push('\n');
    std::fs::write(&data, text).unwrap();
    let o = rwlab(tmp.path(), &["train", "--replay", run.join("manifest.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum"));
}

#[test]
fn help_and_bad_usage_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(rwlab(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(rwlab(tmp.path(), &["train"]).status.code(), Some(1));
    assert_eq!(rwlab(tmp.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn self_check_passes_on_small_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rwlab(tmp.path(), &["self-check", "--instances", "10", "--rows", "100"]);
    let dir = run_dir(&o);
    assert_eq!(stdout(&o).matches("PASS").count(), 3);
    assert!(dir.join("self_check.csv").exists() && dir.join("manifest.json").exists());
}
