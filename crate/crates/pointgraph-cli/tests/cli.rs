//! End-to-end tests of the `pointgraph` binary: exit codes, golden help
//! text, and a full sample/train/eval/graph/project round trip.

use std::path::{Path, PathBuf};
use std::process::Command;

const TETRA_OFF: &str = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";

struct CmdResult {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> CmdResult {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pointgraph"));
    cmd.args(args);
    for (key, value) in env {
        cmd.env(key, value);
    }
    let out = cmd.output().expect("spawning the pointgraph binary");
    CmdResult {
        code: out.status.code().expect("binary exited without a code"),
        stdout: String::from_utf8(out.stdout).expect("stdout is UTF-8"),
        stderr: String::from_utf8(out.stderr).expect("stderr is UTF-8"),
    }
}

fn run(args: &[&str]) -> CmdResult {
    run_env(args, &[])
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn path_str(path: &Path) -> &str {
    path.to_str().expect("test paths are UTF-8")
}

#[test]
fn help_output_is_stable() {
    let top = run(&["--help"]);
    assert_eq!(top.code, 0);
    assert_eq!(top.stdout, golden("help.txt"));
    for sub in [
        "sample",
        "train",
        "eval",
        "graph",
        "compare-graphs",
        "stress",
        "gradcheck",
        "project",
        "sweep",
    ] {
        let out = run(&[sub, "--help"]);
        assert_eq!(out.code, 0, "{sub} --help exit code");
        assert_eq!(out.stdout, golden(&format!("help-{sub}.txt")), "{sub} --help text");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["bogus"]).code, 1);
    assert_eq!(run(&["sample"]).code, 1);
    // The graph feature source group admits exactly one member.
    assert_eq!(run(&["graph", "--cloud", "x.csv", "--out", "y.csv"]).code, 1);
    let thr = run_env(&["compare-graphs", "a.csv", "b.csv"], &[("POINTGRAPH_THREADS", "many")]);
    assert_eq!(thr.code, 1);
    assert!(thr.stderr.contains("POINTGRAPH_THREADS"), "stderr: {}", thr.stderr);
}

#[test]
fn missing_files_exit_two() {
    let out = run(&["stress", "--cloud", "/nonexistent/a.csv", "--mapped", "/nonexistent/b.csv"]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("/nonexistent/a.csv"), "stderr: {}", out.stderr);
}

#[test]
fn bad_sweep_values_exit_one() {
    let cfg = repo_config("toy-train.json");
    let out = run(&["sweep", "--config", path_str(&cfg), "--axis", "gamma", "--values", "x,y"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("gamma"), "stderr: {}", out.stderr);
}

#[test]
fn identical_graphs_share_every_edge() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("tetra.off");
    std::fs::write(&mesh, TETRA_OFF).unwrap();
    let cloud = dir.path().join("cloud.csv");
    let sampled = run(&[
        "sample",
        "--in",
        path_str(&mesh),
        "--n",
        "32",
        "--seed",
        "5",
        "--out",
        path_str(&cloud),
    ]);
    assert_eq!(sampled.code, 0, "stderr: {}", sampled.stderr);

    let g1 = dir.path().join("g1.csv");
    let g2 = dir.path().join("g2.csv");
    for out in [&g1, &g2] {
        let graph = run(&[
            "graph",
            "--cloud",
            path_str(&cloud),
            "--k",
            "4",
            "--baseline",
            "--out",
            path_str(out),
        ]);
        assert_eq!(graph.code, 0, "stderr: {}", graph.stderr);
    }
    // 32 nodes x 4 neighbors, one edge per line.
    assert_eq!(std::fs::read_to_string(&g1).unwrap().lines().count(), 128);

    let cmp = run(&["compare-graphs", path_str(&g1), path_str(&g2)]);
    assert_eq!(cmp.code, 0);
    assert_eq!(cmp.stdout, "100.00\n");
}

#[test]
fn identity_stress_prints_exact_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("tetra.off");
    std::fs::write(&mesh, TETRA_OFF).unwrap();
    let cloud = dir.path().join("cloud.csv");
    run(&["sample", "--in", path_str(&mesh), "--n", "16", "--seed", "1", "--out", path_str(&cloud)]);

    let out = run(&["stress", "--cloud", path_str(&cloud), "--mapped", path_str(&cloud)]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    assert_eq!(out.stdout, "S = 0\nS^2 = 0\n");
}

#[test]
fn gradcheck_tiny_config_passes() {
    let cfg = repo_config("gradcheck-tiny.json");
    let out = run(&["gradcheck", "--config", path_str(&cfg)]);
    assert_eq!(out.code, 0, "stdout: {}\nstderr: {}", out.stdout, out.stderr);
    assert!(out.stdout.contains("neighbor tie flips = 0"), "stdout: {}", out.stdout);
    assert!(out.stdout.trim_end().ends_with("ok"), "stdout: {}", out.stdout);
}

#[test]
fn train_eval_graph_project_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{
  "mode": "learned",
  "d_graph": 3,
  "dataset": {
    "kind": "synthetic",
    "clouds_per_class": 4,
    "test_fraction": 0.25,
    "val_fraction": 0.25,
    "seed": 9
  },
  "t_blocks": 2,
  "k": 3,
  "gamma": 0.5,
  "epochs": 2,
  "batch_size": 3,
  "lr0": 0.001,
  "lr_halving_period": 20,
  "seeds": [0],
  "n_points": 16,
  "widths": { "f_hidden": 4, "node": 6, "edge": 6, "fusion": 12, "pred_hidden": 6 }
}
"#,
    )
    .unwrap();

    let run_dir = dir.path().join("run");
    let trained = run(&["train", "--config", path_str(&cfg), "--out", path_str(&run_dir)]);
    assert_eq!(trained.code, 0, "stderr: {}", trained.stderr);
    let ckpt = run_dir.join("seed-0/model.ckpt");
    for artifact in [
        ckpt.clone(),
        run_dir.join("seed-0/model.ckpt.json"),
        run_dir.join("seed-0/metrics.jsonl"),
        run_dir.join("seed-0/summary.json"),
        run_dir.join("aggregate.json"),
        run_dir.join("config.json"),
    ] {
        assert!(artifact.exists(), "missing {}", artifact.display());
    }

    // Eval should find the sidecar config without --config.
    let eval = run(&["eval", "--checkpoint", path_str(&ckpt), "--split", "test"]);
    assert_eq!(eval.code, 0, "stderr: {}", eval.stderr);
    assert!(eval.stdout.contains("overall accuracy = "), "stdout: {}", eval.stdout);
    assert!(eval.stdout.contains("shared edges = "), "stdout: {}", eval.stdout);

    let mesh = dir.path().join("tetra.off");
    std::fs::write(&mesh, TETRA_OFF).unwrap();
    let cloud = dir.path().join("cloud.csv");
    run(&["sample", "--in", path_str(&mesh), "--n", "16", "--seed", "2", "--out", path_str(&cloud)]);

    let edges = dir.path().join("edges.csv");
    let graph = run(&[
        "graph",
        "--cloud",
        path_str(&cloud),
        "--k",
        "3",
        "--checkpoint",
        path_str(&ckpt),
        "--out",
        path_str(&edges),
    ]);
    assert_eq!(graph.code, 0, "stderr: {}", graph.stderr);
    assert_eq!(std::fs::read_to_string(&edges).unwrap().lines().count(), 48);

    let proj = dir.path().join("proj.csv");
    let projected = run(&[
        "project",
        "--cloud",
        path_str(&cloud),
        "--checkpoint",
        path_str(&ckpt),
        "--out",
        path_str(&proj),
    ]);
    assert_eq!(projected.code, 0, "stderr: {}", projected.stderr);
    let text = std::fs::read_to_string(&proj).unwrap();
    assert_eq!(text.lines().count(), 17, "header plus one row per point");
    // A point that is extreme along several axes carries all its letters.
    for anchor in ['A', 'B', 'C', 'D', 'E', 'F'] {
        assert!(
            text.lines().skip(1).any(|l| l.split(',').next().is_some_and(|f| f.contains(anchor))),
            "anchor {anchor} missing in:\n{text}"
        );
    }
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_config("toy-train.json");
    let out_dir = dir.path().join("sweep");
    let out = run(&[
        "sweep",
        "--config",
        path_str(&cfg),
        "--axis",
        "d_graph",
        "--values",
        "2,3",
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    let csv = std::fs::read_to_string(out_dir.join("table.csv")).unwrap();
    assert!(csv.starts_with("model,d_graph,gamma,"), "csv: {csv}");
    assert_eq!(csv.lines().count(), 3, "header plus one row per value");
    assert!(out_dir.join("table.txt").exists());
    assert!(out.stdout.contains("mlp-3-4-2"), "stdout: {}", out.stdout);
    assert!(out.stdout.contains("mlp-3-4-3"), "stdout: {}", out.stdout);
}
