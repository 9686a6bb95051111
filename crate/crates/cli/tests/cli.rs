use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bmetrics(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmetrics")).args(args).current_dir(cwd).output().expect("spawn bmetrics")
}

fn ok(args: &[&str], cwd: &Path) -> Value {
    let out = bmetrics(args, cwd);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

const TINY: [&str; 8] = ["--steps", "40", "--batch-size", "8", "--eval-every", "20", "--instance-seed", "3"];

#[test]
fn gen_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--seed", "5", "--n-states", "3", "--n-noise", "2", "--out", "a.json"], dir.path());
    ok(&["gen", "--seed", "5", "--n-states", "3", "--n-noise", "2", "--out", "b.json"], dir.path());
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.json")).unwrap());
    let m: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(m["task"]["n_states"], 3);
}

#[test]
fn exact_writes_matrix_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--seed", "1", "--n-states", "3", "--n-noise", "2", "--out", "m.json"], dir.path());
    let s = ok(&["exact", "--instance", "m.json", "--metric", "bsm", "--out", "d.csv"], dir.path());
    assert_eq!(s["kind"], "bsm");
    assert_eq!(s["n_obs"], 6);
    assert!(s["residual"].as_f64().unwrap() <= 1e-10);
    assert_eq!(header(&dir.path().join("d.csv")), ["row", "col", "value"]);
    let rows = csv::Reader::from_path(dir.path().join("d.csv")).unwrap().records().count();
    assert_eq!(rows, 36);
}

#[test]
fn exact_rejects_feature_instances() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--emission", "feature", "--out", "m.json"], dir.path());
    let out = bmetrics(&["exact", "--instance", "m.json", "--out", "d.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_emits_one_document_per_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let out = bmetrics(&["verify", "--random", "2"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let docs: Vec<Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(docs.len(), 10);
    assert!(docs.iter().all(|d| d["passed"] == true));
}

#[test]
fn usage_and_io_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bmetrics(&["verify"], dir.path()).status.code(), Some(1));
    assert_eq!(bmetrics(&["train", "--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(bmetrics(&["exact", "--instance", "missing.json", "--out", "d.csv"], dir.path()).status.code(), Some(1));
    let out = bmetrics(&["train", "--batch-size", "0", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"name": "base", "seed": 4, "train": {"steps": 9999}}"#).unwrap();
    let mut args = vec!["train", "--config", "cfg.json", "--out", "run", "--variant", "mico"];
    args.extend(TINY);
    ok(&args, dir.path());
    let cfg: Value = serde_json::from_slice(&std::fs::read(dir.path().join("run/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["name"], "base");
    assert_eq!(cfg["seed"], 4);
    assert_eq!(cfg["train"]["steps"], 40);
    assert_eq!(cfg["loss"]["variant"], "mico");
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", "sweep", "--seeds", "1,2", "--ood-shift-seed", "9"];
    args.extend(TINY);
    let summary = ok(&args, dir.path());
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
    let child = dir.path().join("sweep/seed-1");
    assert_eq!(header(&child.join("df.csv")), ["step", "pos", "neg", "df", "ood_pos", "ood_neg", "ood_df"]);
    assert_eq!(header(&child.join("loss.csv")), ["step", "j_m", "j_zp", "j_rp", "total"]);

    // Exact re-evaluation of the checkpoint reproduces the final in-distribution score.
    let report: Value = serde_json::from_slice(&std::fs::read(child.join("report.json")).unwrap()).unwrap();
    let df = ok(&["eval-df", "--run", "sweep/seed-1", "--csv", "df1.csv"], dir.path());
    assert_eq!(df["df"], report["final"]["df"]);
    assert_eq!(header(&dir.path().join("df1.csv"))[..3], ["pos", "neg", "df"]);
    let ood = ok(&["eval-df", "--run", "sweep/seed-1", "--ood"], dir.path());
    assert_eq!(ood["df"], report["ood"]["df"]);

    let rows = ok(&["report", "sweep", "--csv", "agg.csv"], dir.path());
    assert_eq!(rows[0]["n"], 2);
    assert!(rows[0]["ood_df_mean"].is_number());
    assert_eq!(header(&dir.path().join("agg.csv"))[0], "group");
}

#[test]
fn reference_encoders() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--seed", "2", "--n-states", "4", "--n-noise", "3", "--out", "m.json"], dir.path());
    let df = |enc: &str| ok(&["eval-df", "--instance", "m.json", "--encoder", enc], dir.path())["df"].as_f64().unwrap();
    assert_eq!(df("oracle"), 1.0);
    assert_eq!(df("constant"), 0.0);
    assert!(df("noise-only") <= 0.05);
}

#[test]
fn isolated_run_and_leak_control() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["isolated", "--out", "iso", "--agent", "zp-rp", "--metric", "dbc"];
    args.extend(TINY);
    let log = ok(&args, dir.path());
    assert_eq!(log["schema"], "isolated-report/1");
    assert_eq!(log["max_leak_norm"], 0.0);
    for f in ["df_agent.csv", "df_metric.csv"] {
        assert_eq!(header(&dir.path().join("iso").join(f)), ["step", "pos", "neg", "df"]);
    }

    let mut leak = vec!["isolated", "--out", "leak", "--inject-leak"];
    leak.extend(TINY);
    let out = bmetrics(&leak, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("isolation violated"));

    // Training runs and isolated runs do not aggregate together.
    let mut train = vec!["train", "--out", "run"];
    train.extend(TINY);
    ok(&train, dir.path());
    assert_eq!(bmetrics(&["report", "run", "iso"], dir.path()).status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let mut args = vec!["train", "--out", out, "--sigmas", "0.5,1"];
        args.extend(TINY);
        ok(&args, dir.path());
    }
    for f in ["index.json", "config.json", "sigma-0.5/df.csv", "sigma-1/loss.csv", "sigma-1/checkpoint.json", "sigma-0.5/report.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}
