use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use p2p_core::data::kitti::load_kitti_root;

fn p2p(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2p"))
        .args(args)
        .env_remove("P2P_OUT_DIR")
        .env_remove("P2P_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = p2p(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn kitti_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/kitti")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// `(success, precision)` of the `all` row.
fn overall(stdout: &str) -> (f64, f64) {
    let line = stdout
        .lines()
        .find(|l| l.split_whitespace().nth(1) == Some("all"))
        .unwrap();
    let f: Vec<&str> = line.split_whitespace().collect();
    let at = |key: &str| f[f.iter().position(|w| *w == key).unwrap() + 1].parse().unwrap();
    (at("success"), at("precision"))
}

#[test]
fn params_reports_the_reference_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["params", "--variant", "p2p_point", "--out", s(dir.path())]);
    assert!(out.contains("reference 7.39 M"), "{out}");
    let m = manifest(dir.path());
    assert_eq!(m["command"], "params");
    assert_eq!(m["input_hash"].as_str().unwrap().len(), 64);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("params.json")).unwrap()).unwrap();
    let n = report["parameters"].as_f64().unwrap();
    assert!((n / 7.39e6 - 1.0).abs() <= 0.15);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(p2p(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(p2p(&["params", "--variant", "nope"]).status.code(), Some(2));
    assert_eq!(
        p2p(&["params", "--set", "train.epochs", "--out", out]).status.code(),
        Some(2)
    );
    assert_eq!(
        p2p(&["params", "--set", "bogus=1", "--out", out]).status.code(),
        Some(2)
    );
    assert_eq!(
        p2p(&["eval", "--data", "synthetic:2", "--out", out]).status.code(),
        Some(2)
    );
    assert_eq!(
        p2p(&["eval", "--data", "synthetic:x", "--tracker", "cv", "--out", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(p2p(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("tracks.json");
    std::fs::write(&bad, "not json").unwrap();
    let out = dir.path().join("out");
    let fixture = kitti_fixture();
    let args = ["eval", "--data", s(&fixture), "--pred", s(&bad), "--out", s(&out)];
    assert_eq!(p2p(&args).status.code(), Some(1));
    let missing = dir.path().join("missing.ckpt");
    let args = [
        "eval",
        "--data",
        "synthetic:2",
        "--checkpoint",
        s(&missing),
        "--out",
        s(&out),
    ];
    assert_eq!(p2p(&args).status.code(), Some(1));
}

#[test]
fn eval_of_ground_truth_boxes_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<serde_json::Value> = load_kitti_root(&kitti_fixture(), Some("Car"))
        .unwrap()
        .iter()
        .map(|t| serde_json::json!({ "id": t.id, "tracker": "gt", "boxes": t.gt_boxes() }))
        .collect();
    let pred = dir.path().join("tracks.json");
    std::fs::write(&pred, serde_json::to_string(&records).unwrap()).unwrap();
    let out = ok(&[
        "eval",
        "--data",
        s(&kitti_fixture()),
        "--pred",
        s(&pred),
        "--out",
        s(dir.path()),
    ]);
    let (success, precision) = overall(&out);
    assert_eq!(precision, 100.0);
    assert!(success >= 99.0);
    for f in ["sequences.json", "summary.csv", "curves.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn generated_data_tracks_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-synthetic",
        "--n",
        "3",
        "--preset",
        "desk",
        "--seed",
        "5",
        "--out",
        s(&data),
    ]);
    assert!(data.join("label_02/0002.txt").exists());
    let tracks = dir.path().join("track");
    ok(&["track", "--data", s(&data), "--tracker", "oracle", "--out", s(&tracks)]);
    let scored = ok(&[
        "eval",
        "--data",
        s(&data),
        "--pred",
        s(&tracks.join("tracks.json")),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    let (success, precision) = overall(&scored);
    assert!(success >= 99.0 && precision >= 99.0, "{scored}");
    let cv = ok(&[
        "eval",
        "--data",
        s(&data),
        "--tracker",
        "cv",
        "--out",
        s(&dir.path().join("cv")),
    ]);
    assert!(overall(&cv).0 <= success);
}

#[test]
fn train_runs_are_reproducible_and_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "preset = \"desk\"\n[train]\nepochs = 2\npairs_per_epoch = 24\nbatch_size = 8\n[train.model]\nn_points = 64\n",
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train",
            "--config",
            s(&config),
            "--data",
            "synthetic:4@9",
            "--seed",
            "2",
            "--out",
            s(&out),
        ]);
        out
    };
    let a = run("a");
    let b = Command::new(env!("CARGO_BIN_EXE_p2p"))
        .args([
            "train",
            "--config",
            s(&config),
            "--data",
            "synthetic:4@9",
            "--seed",
            "2",
        ])
        .env("P2P_OUT_DIR", dir.path().join("b"))
        .env("P2P_THREADS", "1")
        .output()
        .unwrap();
    assert!(b.status.success());
    let b = dir.path().join("b");
    assert_eq!(manifest(&a)["input_hash"], manifest(&b)["input_hash"]);
    for f in ["metrics.csv", "epochs.csv", "best.ckpt", "last.ckpt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let out = ok(&[
        "eval",
        "--data",
        "synthetic:2@100",
        "--preset",
        "desk",
        "--checkpoint",
        s(&a.join("best.ckpt")),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    let (success, precision) = overall(&out);
    assert!((0.0..=100.0).contains(&success) && (0.0..=100.0).contains(&precision));
}

#[test]
fn gradcheck_passes_on_the_small_network() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "gradcheck",
        "--variant",
        "p2p_point",
        "--max-coords",
        "4",
        "--out",
        s(dir.path()),
    ]);
    assert!(out.contains("max relative error"), "{out}");
    assert!(dir.path().join("gradcheck.json").exists());
}
