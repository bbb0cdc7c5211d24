use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "synth.n_cells=12",
    "synth.n_days=8",
    "n_test_dates=2",
    "models=pctn,itransformer",
    "train.epochs=1",
    "pctn.ctx_hidden=16",
    "pctn.ctx_out=8",
    "pctn.token_dim=8",
    "pctn.encoder_layers=1",
    "pctn.n_heads=2",
    "pctn.ff_dim=8",
    "pctn.fusion_dim=8",
    "pctn.alpha_hidden=4",
    "itransformer.d_model=8",
    "itransformer.layers=1",
    "itransformer.n_heads=2",
    "itransformer.ff_dim=8",
];

fn run(work: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cellthresh"));
    cmd.env_remove("CELLTHRESH_WORK_DIR").env("RUST_LOG", "warn");
    cmd.arg("--work-dir").arg(work);
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let bin = env!("CARGO_BIN_EXE_cellthresh");
    let o = Command::new(bin).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(bin).args(["train", "--model", "lstm"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(bin).args(["evaluate", "--models", "pctn,lstm"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(bin).args(["--help"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--set", "no_such_key=1", "ingest"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("no_such_key"));
    let o = run(dir.path(), &["--set", "synth.n_cells=many", "synth"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let cfg = dir.path().join("missing.conf");
    let o = run(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_1_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    for (stage, args) in [
        ("ingest", vec!["ingest"]),
        ("features", vec!["features"]),
        ("train", vec!["train", "--model", "pctn"]),
        ("evaluate", vec!["evaluate"]),
    ] {
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(1), "{stage}: {}", stderr(&o));
        assert!(stderr(&o).contains(&format!("stage {stage}:")), "{stage}: {}", stderr(&o));
    }
}

#[test]
fn stages_run_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for args in [
        vec!["synth"],
        vec!["ingest"],
        vec!["features"],
        vec!["label"],
        vec!["train"],
        vec!["predict", "--model", "pctn"],
        vec!["predict", "--model", "itransformer"],
        vec!["evaluate", "--models", "all"],
        vec!["report"],
    ] {
        let o = run(w, &args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let metrics = std::fs::read_to_string(w.join("reports/metrics.csv")).unwrap();
    for model in ["pctn", "itransformer", "naive_mean"] {
        assert!(metrics.contains(model), "{metrics}");
    }
    for f in ["alpha_stats.csv", "quantile_spread.csv", "data_audit.csv", "wilcoxon.csv", "metrics.txt"] {
        assert!(w.join("reports").join(f).exists(), "{f}");
    }
    for stage in [
        "synth",
        "ingest",
        "features",
        "label",
        "train_pctn",
        "train_itransformer",
        "predict_pctn",
        "predict_itransformer",
        "evaluate",
        "report",
    ] {
        assert!(w.join(format!("manifests/{stage}.txt")).exists(), "{stage}");
    }
}

#[test]
fn pipeline_matches_sequential_flag() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let o = run(dirs[0].path(), &["pipeline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(dirs[1].path(), &["--sequential", "pipeline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["reports/metrics.csv", "models/pctn.ckpt", "models/itransformer.ckpt", "predictions/pctn.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs between parallel and sequential runs");
    }
}

#[test]
fn cell_day_synth_feeds_features_directly() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["synth", "--format", "cell-days"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(dir.path(), &["features"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("features_train.csv").exists());
}
