use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cvanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvanet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cvanet(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"{
  "epochs": 1,
  "learning_rate": 1e-3,
  "backbone": {"height": 32, "width": 32, "stem_channels": 4, "stem_stride": 2, "channels": [4, 8, 8], "d": 8},
  "head": {"d": 8, "heads": 2, "encoder_layers": 1, "decoder_layers": 1, "ffn_dim": 16, "queries": 4}
}"#;

fn gen_data(dir: &Path) -> String {
    let data = dir.join("data");
    let d = data.to_str().unwrap();
    let out = ok(&["gen-data", "--out", d, "--videos", "4", "--frames", "4", "--res", "32,32", "--seed", "5", "--test-fraction", "0.5"]);
    assert!(out.contains("4 videos (2 train, 2 test)"), "{out}");
    d.to_string()
}

#[test]
fn train_eval_predict_render() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path());
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    let out = ok(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--data", &data]);
    assert!(out.contains("AP50"), "{out}");
    for f in ["checkpoint.bin", "record.json", "predictions.jsonl"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
    let trained_ap = record["report"]["ap"].as_f64().unwrap();

    let ckpt = run.join("checkpoint.bin");
    let report = tmp.path().join("report.json");
    ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--report", report.to_str().unwrap()]);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["ap"].as_f64().unwrap(), trained_ap);
    ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--mode", "class-aware"]);

    let preds = tmp.path().join("all.jsonl");
    let out = ok(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--out", preds.to_str().unwrap(), "--all"]);
    assert!(out.contains("wrote 16 frame records"), "{out}");

    let frames = tmp.path().join("frames");
    let out = ok(&["render", "--preds", preds.to_str().unwrap(), "--data", &data, "--out", frames.to_str().unwrap(), "--min-score", "0"]);
    assert!(out.contains("rendered 16 frames"), "{out}");
    let img = image::open(frames.join("video_000").join("frame_0000.ppm")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}

#[test]
fn ablate_writes_records_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path());
    let entry = |variant: &str| TINY.replacen('{', &format!("{{\n  \"variant\": \"{variant}\","), 1);
    let grid = format!(r#"{{"runs": [{}, {}]}}"#, entry("basic"), entry("full"));
    let grid_path = tmp.path().join("grid.json");
    fs::write(&grid_path, grid).unwrap();
    let out_dir = tmp.path().join("ablation");
    let out = ok(&["ablate", "--grid", grid_path.to_str().unwrap(), "--seeds", "1", "--out", out_dir.to_str().unwrap(), "--data", &data]);
    assert!(out.contains("basic") && out.contains("full"), "{out}");
    assert!(out_dir.join("records/basic_seed1.json").is_file());
    assert!(out_dir.join("records/full_seed1.json").is_file());
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("table.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cvanet(&["gen-data", "--out", tmp.path().to_str().unwrap(), "--res", "32x32"]);
    assert!(!out.status.success());

    let cfg = tmp.path().join("typo.json");
    fs::write(&cfg, r#"{"learning_rat": 1e-3}"#).unwrap();
    let out = cvanet(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let out = cvanet(&["eval", "--checkpoint", tmp.path().join("none.bin").to_str().unwrap(), "--data", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
}
