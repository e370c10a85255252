use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "synth": { "trajectory": [[0, 8], [0, 0], [0, -4]] },
  "image_tokenizer": { "width": 16, "heads": 2, "k": 16 },
  "map_tokenizer": { "width": 16, "heads": 2, "k": 16 },
  "stage2": {
    "fusion": { "d": 16 },
    "mapper": {
      "d": 16, "heads": 2, "tasks": ["power", "delay"],
      "token_moe": { "expert_hidden": 16 },
      "task_moe": { "expert_hidden": 16 }
    }
  },
  "train": { "epochs": 1, "batch_size": 4, "val_fraction": 0.0 }
}"#;

fn mpgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpgen"))
        .args(["--config", dir.join("run.json").to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mpgen(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.json"), TINY).unwrap();
    let d = dir.to_str().unwrap();

    let s = ok(dir, &["synth", "--scenario", "crossroad", "--seed", "0", "--altitudes", "60", "--freqs", "1.6e9,28e9"]);
    assert!(s.contains("wrote 6 snapshots"), "{s}");
    assert!(dir.join("manifest.json").exists());

    ok(dir, &["train-stage1", "--data", d, "--domain", "image"]);
    let img = dir.join("tokenizer_image.ckpt");
    for task in ["power", "delay"] {
        ok(dir, &["train-stage1", "--data", d, "--domain", task, "--init-codebook", img.to_str().unwrap()]);
        assert!(dir.join(format!("tokenizer_{task}.ckpt")).exists());
    }
    let curves = fs::read_to_string(dir.join("stage1_power_curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,component,value\n1,total,"));

    let s = ok(dir, &["train-stage2", "--data", d]);
    assert!(s.contains("train NMSE power"), "{s}");
    let ck = dir.join("stage2.ckpt");
    let ck = ck.to_str().unwrap();

    ok(dir, &["eval", "--checkpoint", ck, "--data", d]);
    let first = fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert!(first.starts_with("dataset,task,path_index,nmse,denominator,seed,checkpoint\n"));
    assert!(first.contains("crossroad_a60_f1.6GHz,power,1,"));
    assert!(first.contains("\nall,average,,"));
    ok(dir, &["eval", "--checkpoint", ck, "--data", d]);
    assert_eq!(fs::read_to_string(dir.join("eval.csv")).unwrap(), first, "eval is not deterministic");
    assert!(dir.join("eval.md").exists() && dir.join("eval.json").exists());

    let s = ok(dir, &["finetune", "--checkpoint", ck, "--data", d, "--mode", "task-wise-only", "--budget", "2"]);
    assert!(s.contains("trainable under TaskWiseOnly"), "{s}");
    assert!(dir.join("finetuned.ckpt").exists());

    ok(dir, &["finetune", "--checkpoint", ck, "--data", d, "--budgets", "1,2", "--seeds", "0", "--test", d, "--method", "ours"]);
    let fs_csv = fs::read_to_string(dir.join("ours_few_shot.csv")).unwrap();
    assert_eq!(fs_csv.lines().count(), 3);

    let dec = dir.join("tokenizer_power.ckpt");
    let s = ok(dir, &["add-param", "--checkpoint", ck, "--task", "aod_az", "--decoder", dec.to_str().unwrap()]);
    assert!(s.contains("trainable under NewTask"), "{s}");
    assert!(dir.join("stage2_with_aod_az.ckpt").exists());

    ok(dir, &["topn", "--checkpoint", ck, "--data", d, "--n", "1"]);
    assert!(dir.join("topn_datasets.svg").exists() && dir.join("topn_datasets.csv").exists());

    let report = dir.join("eval.json");
    ok(dir, &["plot", "--reports", report.to_str().unwrap(), "--few-shot", dir.join("ours_few_shot.json").to_str().unwrap()]);
    assert!(dir.join("few_shot.svg").exists() && dir.join("eval_datasets.svg").exists());

    ok(dir, &["ablate", "--data", d, "--variants", "full,no_freq"]);
    let table = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    assert!(table.contains("full") && table.contains("no_freq"), "{table}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.json"), r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = mpgen(tmp.path(), &["synth", "--scenario", "crossroad", "--altitudes", "60", "--freqs", "28e9"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn missing_tokenizer_reports_path() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.json"), TINY).unwrap();
    let d = tmp.path().to_str().unwrap();
    ok(tmp.path(), &["synth", "--scenario", "wide-lane", "--altitudes", "60", "--freqs", "28e9"]);
    let out = mpgen(tmp.path(), &["train-stage2", "--data", d]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tokenizer_power.ckpt"));
}
