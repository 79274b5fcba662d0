use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use circuitseek::transformer::{load_checkpoint, save_checkpoint};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circuitseek"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A short discovery schedule so the recall pipeline finishes in seconds.
fn quick_config(dir: &Path) -> String {
    let path = dir.join("quick.json");
    fs::write(&path, r#"{"task": "recall", "discovery": {"rounds": 120}}"#).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn recall_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = quick_config(tmp.path());
    let c = ["--config", cfg.as_str()];

    assert_eq!(code(&run(&out, &[c[0], c[1], "build-planted"])), 0);
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("planted/ground_truth.json")).unwrap()).unwrap();
    assert_eq!(truth["components"], serde_json::json!(["h1.2"]));

    assert_eq!(code(&run(&out, &[c[0], c[1], "gen-data"])), 0);
    let o = run(&out, &[c[0], c[1], "discover"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["mask.json", "binary_mask.json", "trajectory.csv", "run.json"] {
        assert!(out.join("runs/full").join(f).is_file(), "missing {f}");
    }
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("runs/full/run.json")).unwrap()).unwrap();
    assert_eq!(record["patched"], serde_json::json!(["h1.2"]));
    assert_eq!(record["lambda"], serde_json::json!(0.03));
    let trajectory = fs::read_to_string(out.join("runs/full/trajectory.csv")).unwrap();
    assert!(trajectory.starts_with("config_hash,seed,"));

    let mask = out.join("runs/full/binary_mask.json");
    let o = run(&out, &[c[0], c[1], "--strict", "eval", "--mask", mask.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let row: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(row["vd_acc"], serde_json::json!(1.0));
    assert_eq!(row["patched"], serde_json::json!(1));

    // Eval is pure: running it again leaves identical artifacts.
    let first = fs::read(out.join("runs/full/eval.json")).unwrap();
    run(&out, &[c[0], c[1], "eval", "--mask", mask.to_str().unwrap()]);
    assert_eq!(first, fs::read(out.join("runs/full/eval.json")).unwrap());

    assert_eq!(code(&run(&out, &[c[0], c[1], "eval"])), 0);
    let o = run(&out, &["report"]);
    assert_eq!(code(&o), 0);
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("| vd_only | MISSING"));
    let clean_at = md.find("| clean |").unwrap();
    let full_at = md.find("| full |").unwrap();
    assert!(clean_at < full_at);
    assert_eq!(code(&run(&out, &["--strict", "report"])), 4);
}

#[test]
fn discovery_is_reproducible_across_output_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let masks: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            for cmd in ["build-planted", "gen-data", "discover"] {
                let o = run(&out, &["--config", &cfg, "--seed", "4", cmd]);
                assert_eq!(code(&o), 0, "{}", stderr(&o));
            }
            fs::read(out.join("runs/full/mask.json")).unwrap()
        })
        .collect();
    assert_eq!(masks[0], masks[1]);
}

#[test]
fn gen_data_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let read = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        assert_eq!(code(&run(&out, &["--seed", seed, "gen-data"])), 0);
        let train = fs::read(out.join("data/vd_train.jsonl")).unwrap();
        assert_eq!(fs::read_to_string(out.join("data/vd_train.jsonl")).unwrap().lines().count(), 90);
        assert_eq!(fs::read_to_string(out.join("data/oi_test.jsonl")).unwrap().lines().count(), 90);
        train
    };
    let a = read("a", "1");
    assert_eq!(a, read("b", "1"));
    assert_ne!(a, read("c", "2"));
}

#[test]
fn build_planted_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run(&a, &["build-planted"])), 0);
    assert_eq!(code(&run(&b, &["build-planted"])), 0);
    for f in ["model.ckpt", "ground_truth.json", "self_check.json"] {
        assert_eq!(fs::read(a.join("planted").join(f)).unwrap(), fs::read(b.join("planted").join(f)).unwrap());
    }
}

#[test]
fn eval_refuses_training_tuples() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = quick_config(tmp.path());
    assert_eq!(code(&run(&out, &["--config", &cfg, "build-planted"])), 0);
    assert_eq!(code(&run(&out, &["--config", &cfg, "gen-data"])), 0);
    let manifest = out.join("data/manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    for f in m["files"].as_array_mut().unwrap() {
        if f["name"] == "recall_test" {
            f["path"] = serde_json::json!("recall_train.jsonl");
            f["split"] = serde_json::json!("train");
        }
    }
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let o = run(&out, &["--config", &cfg, "eval"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("refusing"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"discovery": {"lambda": -1.0}}"#).unwrap();
    assert_eq!(code(&run(&out, &["--config", bad.to_str().unwrap(), "gen-data"])), 2);
    fs::write(&bad, "not json").unwrap();
    assert_eq!(code(&run(&out, &["--config", bad.to_str().unwrap(), "gen-data"])), 2);
    assert_eq!(code(&run(&out, &["--task", "recall", "discover"])), 2);
    assert_eq!(code(&run(&out, &["sweep", "--lambdas", "0.1"])), 2);
}

#[test]
fn nan_model_aborts_with_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = quick_config(tmp.path());
    assert_eq!(code(&run(&out, &["--config", &cfg, "build-planted"])), 0);
    assert_eq!(code(&run(&out, &["--config", &cfg, "gen-data"])), 0);
    let ckpt = out.join("planted/model.ckpt");
    let mut p = load_checkpoint(&ckpt).unwrap();
    p.final_norm.data_mut()[0] = f32::NAN;
    save_checkpoint(&p, &ckpt).unwrap();
    let o = run(&out, &["--config", &cfg, "discover"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
