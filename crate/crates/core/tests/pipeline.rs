use rwlab_core::analysis::{detect_phases, emit_figure_data, FigureKind, FigureSource, PhaseParams};
use rwlab_core::data::{gen_clusters, inject_noise, take_clean_subset, Dataset, NoiseKind, NoiseSpec};
use rwlab_core::fbr::{fbr_train, FbrConfig};
use rwlab_core::meta::{binary_splits, meta_train, Backend, MetaConfig};
use rwlab_core::net::{Activation, NetConfig};
use rwlab_core::trace::RunTrace;

fn binary_problem(rate: f64, seed: u64) -> Dataset {
    let pool = gen_clusters(120, 2, 2, 20.0, seed).unwrap();
    let spec =
        if rate > 0.0 { NoiseSpec { kind: NoiseKind::Symmetric { rate }, seed: seed + 1 } } else { NoiseSpec::none() };
    let noisy = inject_noise(&pool, &spec).unwrap();
    let (clean, train) = take_clean_subset(&noisy, 20, seed + 2).unwrap();
    Dataset { num_classes: 2, dim: 2, noise: spec, splits: vec![train, clean] }
}

fn meta_cfg(backend: Backend) -> MetaConfig {
    MetaConfig { eta: 1e-3, beta: 0.05, epochs: 15, backend, diagnostics: false, divergence_factor: 10.0 }
}

fn net() -> NetConfig {
    NetConfig::uniform(2, 1, 256, 1, Activation::Tanh, 11)
}

#[test]
fn noiseless_meta_training_raises_every_weight() {
    let ds = binary_problem(0.0, 1);
    let (train, clean) = binary_splits(&ds.splits[0], &ds.splits[1]).unwrap();
    let cfg = MetaConfig { eta: 0.005, epochs: 40, ..meta_cfg(Backend::FirstOrder) };
    let run = meta_train(&cfg, &train, &clean, &net()).unwrap();
    let full = |r: &rwlab_core::trace::EpochRecord| r.weights.iter().all(|w| *w == 1.0);
    let first = run.trace.epochs.iter().position(full).expect("weights saturate");
    let mean_abs = |v: &[f64]| v.iter().map(|a| a.abs()).sum::<f64>() / v.len() as f64;
    let residual: Vec<f64> = run.trace.epochs.iter().map(|r| mean_abs(&r.residuals)).collect();
    assert!(residual.windows(2).all(|w| w[1] <= w[0]), "{residual:?}");
    assert!(residual.last().unwrap() < &(0.5 * residual[0]));
    let params = PhaseParams { m: 20, beta: 0.05, gamma: 1.0, width: 256, eta: 0.005, kappa: 3.0 };
    let report = detect_phases(&run.trace, params).unwrap();
    assert_eq!(report.t1_emp, Some(first));
    let t2 = report.t2_emp.expect("residual crosses threshold");
    assert!(run.trace.epochs[first..=t2].iter().all(full));
    assert!(report.filtering_held && report.early_bands_held);
}

#[test]
fn noisy_meta_training_separates_groups() {
    let ds = binary_problem(0.3, 2);
    let (train, clean) = binary_splits(&ds.splits[0], &ds.splits[1]).unwrap();
    let run = meta_train(&meta_cfg(Backend::Exact), &train, &clean, &net()).unwrap();
    let s = run.trace.weight_summary(run.trace.last().unwrap());
    assert!(s.mean_clean_weight.unwrap() > s.mean_noisy_weight.unwrap() + 0.3, "{s:?}");
    assert!(s.weight_auc.unwrap() > 0.9);
}

#[test]
fn dataset_round_trips_through_rlab() {
    let ds = binary_problem(0.3, 3);
    let text = ds.to_rlab_string();
    let back = Dataset::read_rlab(text.as_bytes()).unwrap();
    assert_eq!(back.to_rlab_string(), text);
    assert_eq!(back.splits[0].noise_mask, ds.splits[0].noise_mask);
}

#[test]
fn traces_round_trip_through_directories() {
    let ds = binary_problem(0.3, 4);
    let (train, clean) = binary_splits(&ds.splits[0], &ds.splits[1]).unwrap();
    let mut cfg = meta_cfg(Backend::Exact);
    cfg.diagnostics = true;
    cfg.epochs = 3;
    let meta = meta_train(&cfg, &train, &clean, &net()).unwrap().trace;
    let mut fcfg = FbrConfig::with_defaults(2);
    fcfg.epochs = 2;
    fcfg.batch_size = 32;
    let fbr = fbr_train(&fcfg, &ds.splits[0], &ds.splits[1], &NetConfig::uniform(2, 1, 32, 2, Activation::Tanh, 5))
        .unwrap()
        .trace;
    for trace in [meta, fbr] {
        let dir = tempfile::tempdir().unwrap();
        trace.write_dir(dir.path()).unwrap();
        let back = RunTrace::read_dir(dir.path()).unwrap();
        assert_eq!(back.trace_csv(), trace.trace_csv());
        assert_eq!(back.val_trace_csv(), trace.val_trace_csv());
        assert_eq!(back.directions_csv(), trace.directions_csv());
    }
}

#[test]
fn figure_data_is_deterministic() {
    let ds = binary_problem(0.3, 5);
    let (train, clean) = binary_splits(&ds.splits[0], &ds.splits[1]).unwrap();
    let mut cfg = meta_cfg(Backend::NtkFrozen);
    cfg.epochs = 4;
    let a = meta_train(&cfg, &train, &clean, &net()).unwrap().trace;
    let b = meta_train(&cfg, &train, &clean, &net()).unwrap().trace;
    for kind in [FigureKind::WeightDynamics, FigureKind::MeanResidual, FigureKind::WeightDistribution] {
        let fa = emit_figure_data(kind, &FigureSource::Trace(&a)).unwrap();
        assert_eq!(fa, emit_figure_data(kind, &FigureSource::Trace(&b)).unwrap());
        assert!(fa.lines().count() > 1);
    }
    assert!(emit_figure_data(FigureKind::NtkHist, &FigureSource::Trace(&a)).is_err());
}
