use std::path::Path;
use std::process::{Command, Output};

fn ctf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn run_succeeds_and_seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctf(&["run", "--output", "a"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("a/summary.json").exists());

    let out = ctf(&["run", "--seed", "8", "--output", "b"], dir.path());
    assert_eq!(code(&out), 0);
    let manifest = std::fs::read_to_string(dir.path().join("b/manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["config"]["seed"], 8);
    assert_ne!(
        std::fs::read(dir.path().join("a/train.csv")).unwrap(),
        std::fs::read(dir.path().join("b/train.csv")).unwrap()
    );
}

#[test]
fn subcommand_chain_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "output = \"chain\"\n[voting]\nk = 3\n",
    )
    .unwrap();
    for sub in [
        "synth",
        "train-coarse",
        "prune",
        "select",
        "embed",
        "cluster",
        "score",
        "evaluate",
        "retrieve",
    ] {
        let out = ctf(&[sub, "--config", "c.toml"], dir.path());
        assert_eq!(
            code(&out),
            0,
            "{sub}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let vote = std::fs::read_to_string(dir.path().join("chain/vote.json")).unwrap();
    assert!(vote.contains("\"k\": 3"), "{vote}");
}

#[test]
fn embed_backend_flag() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ctf(&["run", "--output", "o"], dir.path())), 0);
    let out = ctf(&["embed", "--backend", "spg", "--output", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let proj = std::fs::read_to_string(dir.path().join("o/projection.json")).unwrap();
    assert!(proj.contains("\"spg\""));
    assert_eq!(
        code(&ctf(
            &["embed", "--backend", "pca", "--output", "o"],
            dir.path()
        )),
        2
    );
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "[coarse]\nprior_sigma3 = 1.0\n",
    )
    .unwrap();
    let out = ctf(&["run", "--config", "bad.toml"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("prior_sigma3"));

    std::fs::write(
        dir.path().join("range.toml"),
        "[voting]\nfp_lo = 4.0\nfp_hi = 2.0\n",
    )
    .unwrap();
    assert_eq!(
        code(&ctf(&["run", "--config", "range.toml"], dir.path())),
        2
    );
    assert_eq!(
        code(&ctf(&["run", "--config", "absent.toml"], dir.path())),
        2
    );
    assert_eq!(code(&ctf(&["run", "--seed", "x"], dir.path())), 2);
    assert_eq!(code(&ctf(&["frobnicate"], dir.path())), 2);
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctf(&["score", "--output", "empty"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `"));

    std::fs::write(
        dir.path().join("train.csv"),
        "candidate_id,case_id,bag_id,label,f0\n1,a,,2,0.5\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("files.toml"),
        "[data]\nsource = \"files\"\ntrain = \"train.csv\"\ntest = \"train.csv\"\n",
    )
    .unwrap();
    let out = ctf(&["synth", "--config", "files.toml"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("label"));
}
