//! Black-box tests of the fsnas binary: exit codes, output contracts,
//! artifact round-trips, and byte-level determinism.

use std::path::Path;
use std::process::{Command, Output};

fn fsnas(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsnas"))
        .args(args)
        .current_dir(dir)
        .env_remove("FSNAS_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_mini_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("mini.json");
    std::fs::write(
        &path,
        r#"{
  "dataset": {"seed": 5, "sizes": [256, 64, 64]},
  "space": {"nodes": 3, "ops": 3, "hidden": 8},
  "training": {
    "oracle": {"epochs": 3, "seed": 0, "cap": 27},
    "root": {"epochs": 6},
    "child": {"epochs": 2}
  },
  "split": {"total_epoch_budget": 12, "seed": 0},
  "search": {"algorithm": "rea", "sample_budget": 12, "population": 4, "tournament": 2, "k": 2, "seed": 1}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn gen_space_prints_the_default_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsnas(&["gen-space"], dir.path());
    assert!(out.status.success());
    assert_eq!(stdout(&out), "edges=6 architectures=15625\n");
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();

    let out = fsnas(&["--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = fsnas(&["no-such-command"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = fsnas(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));

    let out = fsnas(&["--out", "empty", "search"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("no evaluator available"),
        "{}",
        stderr(&out)
    );

    // Default space holds 15625 architectures, over the default cap.
    let out = fsnas(&["--out", "o", "train-oracle"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cap"), "{}", stderr(&out));
}

#[test]
fn bad_config_is_a_runtime_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"dataset": {"sedd": 3}}"#).unwrap();
    let out = fsnas(&["--config", "bad.json", "gen-space"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("sedd"), "{err}");

    let out = fsnas(&["--config", "missing.json", "gen-space"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_flow_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write_mini_config(dir.path());
    let base = ["--config", "mini.json", "--out", "run"];
    let run = |cmd: &[&str]| {
        let args: Vec<&str> = base.iter().chain(cmd).copied().collect();
        let out = fsnas(&args, dir.path());
        assert!(
            out.status.success(),
            "{cmd:?} failed: {}",
            stderr(&out)
        );
        out
    };

    let out = run(&["train-oracle"]);
    assert!(stdout(&out).contains("architectures=27 new=27"));
    // Resume finds nothing left to do.
    let out = run(&["train-oracle"]);
    assert!(stdout(&out).contains("new=0"));

    run(&["train-tree"]);
    let tree_dir = dir.path().join("run/tree-s0");
    assert!(tree_dir.join("tree-manifest.json").exists());
    assert!(tree_dir.join("supernet_L0_0.fsns").exists());

    run(&["eval-corr"]);
    let corr = std::fs::read_to_string(dir.path().join("run/correlation.csv")).unwrap();
    let mut lines = corr.lines();
    assert_eq!(
        lines.next().unwrap(),
        "level,supernet_count,split_edges,seed,tau,concordant,discordant,ties_x,ties_y,cost_epochs"
    );
    assert_eq!(lines.count(), 2, "one row per tree level");

    let out = run(&["search"]);
    assert!(stdout(&out).contains("algo=rea evaluator=few_shot"));
    let trace = std::fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    assert!(trace.starts_with("step,encoding,proxy_score,true_score,best_true_so_far\n"));
    assert_eq!(trace.lines().count(), 13, "header plus 12 sampled steps");

    let out = run(&["retrain"]);
    assert!(stdout(&out).contains("winner="));

    let out = run(&["report"]);
    let text = stdout(&out);
    assert!(text.contains("oracle architectures=27"));
    assert!(text.contains("correlation seed=0 level=0"));
    assert!(text.contains("search steps=12"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_mini_config(dir.path());
    let base = ["--config", "mini.json", "--out", "run"];
    let run = |cmd: &str| {
        let args: Vec<&str> = base.iter().chain([&cmd]).copied().collect();
        let out = fsnas(&args, dir.path());
        assert!(out.status.success(), "{cmd} failed: {}", stderr(&out));
    };

    run("train-oracle");
    run("train-tree");
    run("eval-corr");
    run("search");
    let oracle1 = std::fs::read(dir.path().join("run/oracle.csv")).unwrap();
    let corr1 = std::fs::read(dir.path().join("run/correlation.csv")).unwrap();
    let trace1 = std::fs::read(dir.path().join("run/trace.csv")).unwrap();

    std::fs::remove_dir_all(dir.path().join("run")).unwrap();
    run("train-oracle");
    run("train-tree");
    run("eval-corr");
    run("search");
    assert_eq!(
        oracle1,
        std::fs::read(dir.path().join("run/oracle.csv")).unwrap()
    );
    assert_eq!(
        corr1,
        std::fs::read(dir.path().join("run/correlation.csv")).unwrap()
    );
    assert_eq!(
        trace1,
        std::fs::read(dir.path().join("run/trace.csv")).unwrap()
    );
}

#[test]
fn parallel_oracle_training_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    write_mini_config(dir.path());

    let out = fsnas(
        &["--config", "mini.json", "--out", "seq", "train-oracle"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = fsnas(
        &[
            "--config",
            "mini.json",
            "--out",
            "par",
            "--jobs",
            "3",
            "train-oracle",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let seq = std::fs::read(dir.path().join("seq/oracle.csv")).unwrap();
    let par = std::fs::read(dir.path().join("par/oracle.csv")).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn fsnas_out_env_sets_the_directory_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    write_mini_config(dir.path());

    let out = Command::new(env!("CARGO_BIN_EXE_fsnas"))
        .args(["--config", "mini.json", "train-oracle"])
        .current_dir(dir.path())
        .env("FSNAS_OUT", "enved")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("enved/oracle.csv").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_fsnas"))
        .args(["--config", "mini.json", "--out", "flagged", "train-oracle"])
        .current_dir(dir.path())
        .env("FSNAS_OUT", "ignored")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("flagged/oracle.csv").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn seed_flag_places_the_tree_under_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_mini_config(dir.path());
    let out = fsnas(
        &[
            "--config",
            "mini.json",
            "--out",
            "run",
            "--seed",
            "9",
            "train-tree",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("run/tree-s9/tree-manifest.json").exists());
    assert!(!dir.path().join("run/tree-s0").exists());
}

#[test]
fn corrupt_checkpoint_fails_with_a_named_invariant() {
    let dir = tempfile::tempdir().unwrap();
    write_mini_config(dir.path());
    let base = ["--config", "mini.json", "--out", "run"];
    for cmd in ["train-oracle", "train-tree"] {
        let args: Vec<&str> = base.iter().chain([&cmd]).copied().collect();
        let out = fsnas(&args, dir.path());
        assert!(out.status.success(), "{}", stderr(&out));
    }

    let victim = dir.path().join("run/tree-s0/supernet_L1_0.fsns");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&victim, bytes).unwrap();

    let out = fsnas(
        &["--config", "mini.json", "--out", "run", "eval-corr"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("magic"), "{err}");
    assert!(err.contains("supernet_L1_0.fsns"), "{err}");
}
