//! End-to-end runs of the `sclnet` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sclnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sclnet")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sclnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small, fast settings shared by the training runs below.
const TINY: &[&str] = &[
    "--set", "synth_width=32",
    "--set", "synth_height=32",
    "--set", "synth_categories=2",
    "--set", "synth_objects_min=1",
    "--set", "synth_objects_max=3",
    "--set", "synth_scale_min=4.0",
    "--set", "synth_scale_max=14.0",
    "--set", "channels=8",
    "--set", "backbone_widths=[8, 8, 8, 8]",
    "--set", "head_hidden=16",
    "--set", "roi_size=3",
    "--set", "rois_per_image=8",
    "--set", "anchor_scale=2.0",
    "--set", "num_proposals=50",
    "--set", "infer_num_proposals=50",
];

fn with_tiny<'a>(base: &[&'a str]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn gen_tiny(dir: &Path, images: usize) -> PathBuf {
    let out = dir.join("data");
    let n = images.to_string();
    ok(&with_tiny(&["gen-data", "--out", s(&out), "--images", &n, "--seed", "7"]));
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["gen-data", "--images", "6", "--seed", "7", "--out", s(&d.path().join("d"))]);
    }
    let ann = |d: &tempfile::TempDir| fs::read(d.path().join("d/annotations.json")).unwrap();
    assert_eq!(ann(&a), ann(&b));
    let img = |d: &tempfile::TempDir| fs::read(d.path().join("d/images/000003.png")).unwrap();
    assert_eq!(img(&a), img(&b));
}

#[test]
fn zero_images_gives_valid_empty_dataset() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen-data", "--images", "0", "--out", s(&d)]);
    let v = read_json(&d.join("annotations.json"));
    assert_eq!(v["images"].as_array().unwrap().len(), 0);
    assert_eq!(v["annotations"].as_array().unwrap().len(), 0);
    assert_eq!(v["categories"].as_array().unwrap().len(), 10);
    let st: Value = serde_json::from_slice(&ok(&["stats", "--data", s(&d)]).stdout).unwrap();
    assert_eq!(st["fraction_gt_2x"].as_f64(), Some(0.0));
}

#[test]
fn non_empty_output_needs_force() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen-data", "--images", "1", "--out", s(&d)]);
    assert_eq!(sclnet(&["gen-data", "--images", "1", "--out", s(&d)]).status.code(), Some(2));
    ok(&["gen-data", "--images", "1", "--out", s(&d), "--force"]);
}

#[test]
fn config_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let d = s(&t.path().join("d")).to_string();
    let out = sclnet(&["gen-data", "--out", &d, "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "synth_images = 2\nbogus = true\n").unwrap();
    assert_eq!(sclnet(&["gen-data", "--out", &d, "--config", s(&cfg)]).status.code(), Some(2));
    assert_eq!(sclnet(&["gen-data", "--out", &d, "--set", "synth_objects_min=9"]).status.code(), Some(2));
}

#[test]
fn stats_reports_forced_fraction() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen-data", "--images", "5", "--out", s(&d), "--set", "synth_forced_scales=[8.0, 40.0]"]);
    let st: Value = serde_json::from_slice(&ok(&["stats", "--data", s(&d)]).stdout).unwrap();
    assert_eq!(st["fraction_gt_2x"].as_f64(), Some(1.0));
    assert_eq!(st["per_image_ratio"], serde_json::json!([5.0, 5.0, 5.0, 5.0, 5.0]));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen-data", "--images", "3", "--seed", "4", "--out", s(&d), "--set", "synth_width=96"]);
    let e = t.path().join("e");
    ok(&["gen-data", "--out", s(&e), "--config", s(&d.join("config.toml"))]);
    assert_eq!(fs::read(d.join("annotations.json")).unwrap(), fs::read(e.join("annotations.json")).unwrap());
    assert_eq!(fs::read(d.join("config.toml")).unwrap(), fs::read(e.join("config.toml")).unwrap());
}

#[test]
fn train_then_eval_and_visualize() {
    let t = tempfile::tempdir().unwrap();
    let data = gen_tiny(t.path(), 4);
    let run = t.path().join("run");
    ok(&with_tiny(&["train", "--data", s(&data), "--out", s(&run), "--steps", "2", "--seed", "1"]));
    assert!(run.join("config.toml").exists());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["l_cls", "l_reg", "l_contra_feat", "l_contra_label", "l_comple", "l_detect", "l_total"] {
        assert!(lines[1][key].as_f64().unwrap().is_finite(), "{key}");
    }
    let ckpt = run.join("model.ckpt");
    let (params, _) = sclnet::checkpoint::load(&ckpt).unwrap();
    assert!(params.all_finite() && !params.is_empty());

    let ev = t.path().join("ev");
    ok(&with_tiny(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&ev)]));
    let m = read_json(&ev.join("metrics.json"));
    for key in ["ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "ar_s", "ar_m", "ar_l", "false_alarm_rate"] {
        let v = m[key].as_f64().unwrap();
        assert!(v == -1.0 || (0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(m["per_category_ap"].is_object());

    let mut outs = Vec::new();
    for name in ["v1", "v2"] {
        let v = t.path().join(name);
        ok(&["visualize", "--data", s(&data), "--checkpoint", s(&ckpt), "--image", "1", "--out", s(&v)]);
        let mut pngs: Vec<PathBuf> = fs::read_dir(&v)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        pngs.sort();
        assert_eq!(pngs.len(), 2 * 3);
        outs.push(pngs.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn ablation_flags_zero_the_complement_terms() {
    let t = tempfile::tempdir().unwrap();
    let data = gen_tiny(t.path(), 4);
    let run = t.path().join("run");
    ok(&with_tiny(&["train", "--data", s(&data), "--out", s(&run), "--steps", "3", "--disable-cscl", "--disable-iccl"]));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    for l in log.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["l_comple"].as_f64(), Some(0.0));
        assert_eq!(v["l_contra_feat"].as_f64(), Some(0.0));
        assert_eq!(v["l_contra_label"].as_f64(), Some(0.0));
    }
    let echo = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echo.contains("enable_cscl = false") && echo.contains("enable_iccl = false"));
}

#[test]
fn divergence_exits_3_with_breakdown() {
    let t = tempfile::tempdir().unwrap();
    let data = gen_tiny(t.path(), 2);
    let run = t.path().join("run");
    let mut args = with_tiny(&["train", "--data", s(&data), "--out", s(&run), "--steps", "20"]);
    args.extend_from_slice(&["--set", "lr=1e30", "--set", "grad_clip=0", "--set", "warmup_steps=0"]);
    let out = sclnet(&args);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("l_total"), "{err}");
}

#[test]
fn eval_of_injected_detections() {
    let t = tempfile::tempdir().unwrap();
    let data = gen_tiny(t.path(), 4);
    let ann = read_json(&data.join("annotations.json"));
    let perfect: Vec<Value> = ann["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| serde_json::json!({"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 0.9}))
        .collect();
    let pf = t.path().join("perfect.json");
    fs::write(&pf, serde_json::to_string(&perfect).unwrap()).unwrap();
    let out = t.path().join("p");
    ok(&["eval", "--data", s(&data), "--detections-file", s(&pf), "--out", s(&out)]);
    let m = read_json(&out.join("metrics.json"));
    for key in ["ap", "ap50", "ap75", "ap_s"] {
        assert_eq!(m[key].as_f64(), Some(1.0), "{key}");
    }
    assert_eq!(m["false_alarm_rate"].as_f64(), Some(0.0));

    let ef = t.path().join("empty.json");
    fs::write(&ef, "[]").unwrap();
    let out = t.path().join("e");
    ok(&["eval", "--data", s(&data), "--detections-file", s(&ef), "--out", s(&out)]);
    assert_eq!(read_json(&out.join("metrics.json"))["ap"].as_f64(), Some(0.0));
}

#[test]
fn malformed_annotation_is_runtime_error_naming_record() {
    let t = tempfile::tempdir().unwrap();
    let data = gen_tiny(t.path(), 2);
    let p = data.join("annotations.json");
    let mut v = read_json(&p);
    v["annotations"][0]["bbox"][2] = serde_json::json!(0.0);
    let id = v["annotations"][0]["id"].as_u64().unwrap();
    fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    let out = sclnet(&["stats", "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("annotation {id}")));
}
