use std::path::Path;
use std::process::{Command, Output};

use dcl::config::Config;
use dcl::train::Metrics;

fn dcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcl"))
        .args(args)
        .env("DCL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    Config::tiny().save(&path).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_hash_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = dcl(&["gen-data", "--config", s(&cfg), "--seed", "4", "--out", s(&tmp.path().join("a"))]);
    let b = dcl(&["gen-data", "--config", s(&cfg), "--seed", "4", "--out", s(&tmp.path().join("b"))]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a).trim().len(), 64);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dataset_hash"].as_str().unwrap(), stdout(&a).trim());
}

#[test]
fn default_config_manifest_has_documented_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let o = dcl(&["gen-data", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["data"]["t"], 8);
    assert_eq!(manifest["config"]["model"]["d"], 256);
    assert!(manifest["git_describe"].is_string());
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let o = dcl(&["gen-data", "--config", "/no/such/config.json", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/config.json"));
    assert_eq!(dcl(&["train", "--mode", "dse_b", "--out", "/tmp/unused"]).status.code(), Some(2));
}

#[test]
fn train_then_eval_reproduces_the_logged_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert!(dcl(&["gen-data", "--config", s(&cfg), "--seed", "2", "--out", s(&data)]).status.success());
    for mode in ["baseline", "dse", "dse_a", "dse_a_c"] {
        let out = tmp.path().join(mode);
        let t = dcl(&["train", "--config", s(&cfg), "--data", s(&data), "--mode", mode, "--seed", "3", "--out", s(&out)]);
        assert!(t.status.success(), "{mode}: {}", stderr(&t));
        let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first["epoch"], 0);
        for key in ["recon", "kl_s", "kl_z", "mi_z_x", "mi_s_x", "mi_z_s", "ce", "total", "val_accuracy"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        let logged: Metrics = serde_json::from_value(summary["test"].clone()).unwrap();
        let e = dcl(&["eval", "--checkpoint", s(&out.join("model.dclc")), "--data", s(&data)]);
        assert!(e.status.success(), "{}", stderr(&e));
        let evaluated: Metrics = serde_json::from_str(&stdout(&e)).unwrap();
        assert_eq!(evaluated, logged, "{mode}");
    }
}

#[test]
fn single_thread_runs_give_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = dcl(&["train", "--config", s(&cfg), "--mode", "dse_a_c", "--seed", "7", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("metrics.jsonl")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn corrupt_checkpoint_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert!(dcl(&["gen-data", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let bad = tmp.path().join("broken.dclc");
    std::fs::write(&bad, b"DCLC\x01\x00garbage").unwrap();
    let o = dcl(&["eval", "--checkpoint", s(&bad), "--data", s(&data)]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("broken.dclc"), "{}", stderr(&o));
}

#[test]
fn ablate_prints_one_row_per_mode_with_std() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("abl");
    let o = dcl(&["ablate", "--config", s(&cfg), "--seeds", "1,2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let header = table.lines().next().unwrap();
    assert!(header.contains("overall") && header.contains("material"));
    for mode in ["baseline", "dse", "dse_a", "dse_a_c"] {
        let row = table.lines().skip(1).find(|l| l.split_whitespace().next() == Some(mode)).unwrap();
        assert_eq!(row.matches('±').count(), 2, "{row}");
    }
    assert_eq!(std::fs::read_to_string(out.join("ablation.txt")).unwrap(), table);
}

#[test]
fn embed_viz_writes_one_finite_row_per_clip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert!(dcl(&["gen-data", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let run = tmp.path().join("run");
    assert!(dcl(&["train", "--config", s(&cfg), "--data", s(&data), "--mode", "dse", "--out", s(&run)]).status.success());
    let png = tmp.path().join("viz/dynamic.png");
    let o = dcl(&["embed-viz", "--checkpoint", s(&run.join("model.dclc")), "--data", s(&data), "--out", s(&png)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(png.exists());
    let csv = std::fs::read_to_string(png.with_extension("csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * Config::tiny().data.test_pairs);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert!(f[0].parse::<f64>().unwrap().is_finite() && f[1].parse::<f64>().unwrap().is_finite());
    }
    let base = tmp.path().join("base");
    assert!(dcl(&["train", "--config", s(&cfg), "--data", s(&data), "--mode", "baseline", "--out", s(&base)]).status.success());
    let o = dcl(&["embed-viz", "--checkpoint", s(&base.join("model.dclc")), "--data", s(&data), "--out", s(&png)]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_gradient() {
    let t = std::time::Instant::now();
    let ok = dcl(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(t.elapsed().as_secs() < 60);
    let bad = dcl(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("gradient check failed"));
}
