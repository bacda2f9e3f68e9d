use std::collections::BTreeMap;
use std::path::Path;

use ctf_core::dataset;
use ctf_core::eval;
use ctf_core::mil::{self, TrainOptions};
use ctf_core::pipeline::{run_pipeline, run_stage, Backend, PipelineConfig, Stage};
use ctf_core::Error;

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        output: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

#[test]
fn staged_execution_matches_monolithic_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&config(a.path())).unwrap();
    let cfg = config(b.path());
    for stage in Stage::ALL {
        run_stage(stage, &cfg).unwrap();
    }
    let mut fa = files(a.path());
    let mut fb = files(b.path());
    // the manifest echoes the output directory
    fa.remove("manifest.json");
    fb.remove("manifest.json");
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs");
    }
    for expected in [
        "scores_train.csv",
        "scores_test.csv",
        "froc_ctf_test.csv",
        "templates.json",
        "retrieval.csv",
    ] {
        assert!(fa.contains_key(expected), "{expected} missing");
    }
}

#[test]
fn manifest_lists_config_seeds_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&config(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["config"]["seed"], 7);
    assert!(v["seeds"]["embed"].is_u64());
    let listed: Vec<&str> = v["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a.as_str().unwrap())
        .collect();
    assert!(listed.contains(&"summary.json"));
}

#[test]
fn coarse_curve_is_the_single_layer_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    run_pipeline(&cfg).unwrap();
    let train = dataset::load(dir.path().join("train.csv")).unwrap();
    let test = dataset::load(dir.path().join("test.csv")).unwrap();
    let (std_train, scaler) = dataset::standardize(&train).unwrap();
    let opts = TrainOptions {
        max_iters: cfg.coarse.max_iters,
        grad_tol: cfg.coarse.grad_tol,
        ridge_on_hessian: cfg.coarse.ridge,
    };
    let (model, _) = mil::train_map(&std_train, cfg.coarse.prior_sigma2, &opts).unwrap();
    let scores = model.scores(&scaler.apply(&test).unwrap()).unwrap();
    let curve = eval::froc_dataset(&test, &scores).unwrap();
    let written = std::fs::read_to_string(dir.path().join("froc_coarse_test.csv")).unwrap();
    assert_eq!(written, eval::curve_to_csv(&curve));
}

#[test]
fn spg_backend_swaps_only_the_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    run_pipeline(&cfg).unwrap();
    let before = files(dir.path());
    cfg.embed.backend = Backend::Spg;
    for stage in &Stage::ALL[4..] {
        run_stage(*stage, &cfg).unwrap();
    }
    let after = files(dir.path());
    for upstream in [
        "train.csv",
        "test.csv",
        "coarse_model.json",
        "prune.json",
        "train_pruned.csv",
        "selection.json",
    ] {
        assert!(before[upstream] == after[upstream], "{upstream} changed");
    }
    assert!(before["projection.json"] != after["projection.json"]);
    let proj: serde_json::Value = serde_json::from_slice(&after["projection.json"]).unwrap();
    assert_eq!(proj["model"]["backend"], "spg");
}

#[test]
fn missing_upstream_artifact_names_its_producer() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_stage(Stage::Score, &config(dir.path())).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("score"), "{msg}");
    assert!(msg.contains("run `"), "{msg}");
    assert_eq!(err.exit_code(), 3);
    match err {
        Error::Stage { source, .. } => assert!(matches!(*source, Error::MissingArtifact { .. })),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn single_class_after_pruning_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.synth.n_cases = 40;
    cfg.synth.geometry = dataset::Geometry::Linear;
    cfg.synth.noise_sigma = 0.0;
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("select"), "{err}");
}

#[test]
fn file_ingestion_matches_synthetic_run() {
    let a = tempfile::tempdir().unwrap();
    run_pipeline(&config(a.path())).unwrap();
    let b = tempfile::tempdir().unwrap();
    let text = format!(
        "[data]\nsource = \"files\"\ntrain = {:?}\ntest = {:?}\n",
        a.path().join("train.csv"),
        a.path().join("test.csv")
    );
    let mut cfg = PipelineConfig::from_toml(&text).unwrap();
    cfg.output = b.path().to_path_buf();
    run_pipeline(&cfg).unwrap();
    for name in ["scores_test.csv", "froc_ctf_test.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}
