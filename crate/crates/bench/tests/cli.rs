use std::fs;
use std::path::Path;
use std::process::Command;

use sgrgmm_bench::config::{ExperimentConfig, ExperimentId, InitMode, Overrides};
use sgrgmm_bench::mixture::{self, Method, Setting};
use sgrgmm_bench::output::write_all;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sgrgmm"))
}

/// A mixture config small enough for debug-speed tests.
fn tiny(id: ExperimentId) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(id);
    cfg.mixture.n = 150;
    cfg.mixture.d = 3;
    cfg.mixture.orders = 3;
    cfg.dgmm.t_gmm = 1;
    cfg.dgmm.i_lbfgs = 12;
    cfg.dgmm.i_interval = 6;
    cfg.sgr.inner_rounds = 20;
    cfg.sgr.s_max = 2;
    cfg.trials = Some(2);
    cfg.resolve(&Overrides::default()).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn rerun_from_persisted_config_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let st = bin().args(["outer-loop", "--out"]).arg(a.path()).args(["--seed", "11"]).status().unwrap();
    assert!(st.success());
    let st = bin()
        .args(["outer-loop", "--config"])
        .arg(a.path().join("config.toml"))
        .arg("--out")
        .arg(b.path())
        .status()
        .unwrap();
    assert!(st.success());
    for f in ["config.toml", "outer_loop.csv", "outer_loop_summary.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    let csv = read(a.path(), "outer_loop.csv");
    let mut lines = csv.lines();
    let prov = lines.next().unwrap();
    assert!(prov.starts_with("# sgrgmm ") && prov.contains("config_sha256=") && prov.ends_with("seed=11"), "{prov}");
    assert_eq!(lines.next().unwrap(), "s,gamma,mean_error,outlier_mass,weight_l1_change,center_l2_change,inlier_op_norm,oracle_error");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "experiment = \"outer-loop\"\n[sgr]\ns_max = 0\n").unwrap();
    let code = |args: &[&str]| bin().args(args).arg("--out").arg(dir.path().join("o")).status().unwrap().code();
    assert_eq!(code(&["outer-loop", "--config", cfg.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["no-such-command"]), Some(2));
    assert_eq!(code(&["outer-loop", "--config", "/nonexistent/cfg.toml"]), Some(2));
    let other = dir.path().join("outer.toml");
    fs::write(&other, "experiment = \"outer-loop\"\n").unwrap();
    assert_eq!(code(&["outer-loop", "--config", other.to_str().unwrap(), "--trials", "1"]), Some(0));
    // valid file, but for a different experiment
    assert_eq!(code(&["contamination-sweep", "--config", other.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["epsilon-sensitivity", "--trials", "2"]), Some(0));

    // the output path is a file, so writing fails after a successful run
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let st = bin().args(["outer-loop", "--out"]).arg(blocker.join("sub")).status().unwrap();
    assert_eq!(st.code(), Some(1));
}

#[test]
fn sweep_tables_cover_every_level_and_method() {
    let mut cfg = ExperimentConfig::new(ExperimentId::ContaminationSweep);
    cfg.sweep.epsilons = vec![0.0, 0.2, 0.4];
    cfg.cloud.n = 120;
    let cfg = cfg.resolve(&Overrides { trials: Some(3), ..Default::default() }).unwrap();
    let tables = sgrgmm_bench::run(&cfg).unwrap();
    let summary = &tables[0];
    assert_eq!(summary.header, ["epsilon", "method", "mean_err", "std_err", "mean_outlier_mass"]);
    // SGR is undefined above one third
    assert_eq!(summary.rows.len(), 5 + 5 + 4);
    assert_eq!(tables[1].rows.len(), 3 * 14);
    let dir = tempfile::tempdir().unwrap();
    let written = write_all(dir.path(), &cfg, &tables).unwrap();
    assert_eq!(written.len(), 4);
    assert!(read(dir.path(), "runtimes.csv").contains("seconds"));
}

#[test]
fn clean_and_noise_only_variants_coincide() {
    let cfg = tiny(ExperimentId::DgmmTrials);
    let trials = mixture::dgmm_trials_for(&cfg, &[Setting::Clean, Setting::NoiseOnly]).unwrap();
    for rec in &trials.records {
        let robust = rec.run(Method::Robust).unwrap();
        let aware = rec.run(Method::NoiseAware).unwrap();
        assert_eq!(robust.estimate, aware.estimate);
        if rec.setting == Setting::Clean {
            assert_eq!(rec.run(Method::Naive).unwrap().estimate, robust.estimate);
        }
    }
    let tables = trials.tables();
    assert_eq!(tables[0].name, "dgmm_trials_summary");
    assert_eq!(tables[0].rows.len(), 6);
}

#[test]
fn diagnostics_trace_each_reweighting() {
    let cfg = tiny(ExperimentId::DgmmDiagnostics);
    let diag = mixture::dgmm_diagnostics(&cfg).unwrap();
    let report = diag.report();
    assert_eq!(diag.trajectory.len(), report.reweightings.len());
    let tables = diag.tables(cfg.mixture.orders);
    let names: Vec<&str> = tables.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["dgmm_fit", "dgmm_reweightings", "dgmm_components", "dgmm_summary", "runtimes"]);
    assert_eq!(tables[0].header.last().unwrap(), "outlier_mass_3");
    assert_eq!(tables[2].rows.len(), cfg.mixture.k);
    let last = diag.trajectory.last().unwrap();
    assert!(last.err_sigma.is_finite() && last.err_mu.is_finite());
}

#[test]
fn baselines_share_initial_centers() {
    let mut cfg = tiny(ExperimentId::BaselineComparison);
    cfg.dgmm.init = InitMode::Random;
    let res = mixture::baseline_comparison(&cfg).unwrap();
    assert_eq!(res.records.len(), 4);
    for rec in &res.records {
        let methods: Vec<Method> = rec.runs.iter().map(|r| r.method).collect();
        assert_eq!(methods, mixture::BASELINE_METHODS);
        assert_eq!(rec.init_hash.len(), 64);
    }
    let table = &res.tables()[1];
    let col = table.column("init_hash").unwrap();
    for chunk in table.rows.chunks(4) {
        assert!(chunk.iter().all(|r| r[col] == chunk[0][col]));
    }
}
