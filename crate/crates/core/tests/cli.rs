use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: [&str; 8] = [
    "--set",
    "data.generator.samples=120",
    "--set",
    "train.steps=20",
    "--set",
    "train.log_every=10",
    "--set",
    "model.expert_hidden=16",
];

fn come(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_come"))
        .args(args)
        .env_remove("COME_THREADS")
        .output()
        .unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

fn assert_validation_error(out: &Output) {
    assert_eq!(out.status.code(), Some(1), "{out:?}");
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("ERROR: "), "{err}");
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn validation_errors_exit_one_with_a_single_line() {
    assert_validation_error(&come(&["train", "--set", "no.such.key=1"]));
    assert_validation_error(&come(&["train", "--set", "router.top_k=0"]));
    assert_validation_error(&come(&["train", "--set", "missing_equals"]));
    assert_validation_error(&come(&["frobnicate"]));
    assert_validation_error(&come(&["sweep", "--axis", "nonsense"]));
    let out = Command::new(env!("CARGO_BIN_EXE_come"))
        .args(["gradcheck"])
        .env("COME_THREADS", "zero")
        .output()
        .unwrap();
    assert_validation_error(&out);
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.bin");
    let out = come(&with_small(&["eval", "--checkpoint", missing.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR: "));
}

#[test]
fn help_exits_zero() {
    let out = come(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "train", "eval", "ablate", "sweep", "cluster", "gradcheck", "route-dump"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn gen_data_writes_containers_and_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let out = come(&with_small(&["gen-data", "--seed", "4", "--out", dir.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let m = manifest(&dir);
    assert_eq!(m["kind"], "manifest");
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["config"]["seed"], 4);
    for f in ["train.bin", "test.bin", "dataset.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let outputs = m["outputs"].as_object().unwrap();
    assert!(!outputs.is_empty());
    for (name, digest) in outputs {
        assert_eq!(digest.as_str().unwrap(), sha(&dir.join(name)), "{name}");
    }
}

#[test]
fn manifest_reproduces_a_training_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = come(&with_small(&["train", "--seed", "9", "--out", a.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let again = come(&[
        "train",
        "--config",
        a.join("manifest.json").to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(again.status.code(), Some(0), "{again:?}");
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["digests"], mb["digests"]);
    for f in ["metrics.csv", "balance.csv", "eval.csv", "checkpoint.bin"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f}");
    }
    assert_eq!(ma["digests"]["metrics_csv"].as_str().unwrap(), sha(&a.join("metrics.csv")));

    // Evaluating the checkpoint reproduces the run's own test evaluation, up
    // to the f32 rounding of stored weights.
    let e = tmp.path().join("eval");
    let out = come(&[
        "eval",
        "--config",
        a.join("manifest.json").to_str().unwrap(),
        "--checkpoint",
        a.join("checkpoint.bin").to_str().unwrap(),
        "--out",
        e.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let evaluated = std::fs::read_to_string(e.join("eval.csv")).unwrap();
    let trained = std::fs::read_to_string(a.join("eval.csv")).unwrap();
    let test_row = |s: &str| s.lines().find(|l| l.starts_with("test,")).unwrap().to_string();
    assert_eq!(evaluated.lines().next(), trained.lines().next());
    let (x, y) = (test_row(&evaluated), test_row(&trained));
    for (i, (u, v)) in x.split(',').zip(y.split(',')).enumerate() {
        if i == 3 {
            let (u, v): (f64, f64) = (u.parse().unwrap(), v.parse().unwrap());
            assert!((u - v).abs() < 1e-5, "task_ce {u} vs {v}");
        } else {
            assert_eq!(u, v, "column {i}");
        }
    }
}

#[test]
fn route_dump_lists_every_selection() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = come(&with_small(&["train", "--set", "router.top_k=2", "--out", run.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let dump = tmp.path().join("dump");
    let out = come(&[
        "route-dump",
        "--config",
        run.join("manifest.json").to_str().unwrap(),
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let routes = std::fs::read_to_string(dump.join("routes.csv")).unwrap();
    let proj = std::fs::read_to_string(dump.join("projections.csv")).unwrap();
    assert_eq!(
        routes.lines().next().unwrap(),
        "batch,token,sample,source,rank,expert,weight,status,fine_id,coarse_id"
    );
    assert_eq!(proj.lines().next().unwrap(), "token,source,pc1,pc2");
    let tokens = proj.lines().count() - 1;
    assert_eq!(routes.lines().count() - 1, 2 * tokens);
    assert!(routes
        .lines()
        .skip(1)
        .all(|l| l.ends_with(",admitted") || l.contains(",admitted,") || l.contains(",overflow,")));
}

#[test]
fn cluster_assignments_match_the_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(come(&with_small(&["gen-data", "--out", data.to_str().unwrap()])).status.code(), Some(0));
    let train_bin = data.join("train.bin");
    let f2c = tmp.path().join("f2c");
    let out = come(&["cluster", "--data", train_bin.to_str().unwrap(), "--samples", "16", "--out", f2c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let csv = std::fs::read_to_string(f2c.join("assignments.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "token_index,fine_id,coarse_id");
    assert!(csv.lines().count() > 1);

    let ms = tmp.path().join("ms");
    let out = come(&[
        "cluster",
        "--data",
        train_bin.to_str().unwrap(),
        "--samples",
        "16",
        "--set",
        "model.clustering.strategy=multistep",
        "--out",
        ms.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let csv = std::fs::read_to_string(ms.join("assignments.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "token_index,step_1,step_2,step_3,step_4,step_5");
}
