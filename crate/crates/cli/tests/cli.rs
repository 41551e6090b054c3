use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pbnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(
        out.status.success(),
        "failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn error_kind(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is json");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn phantoms(dir: &Path, count: &str) {
    ok_json(pbnet(dir, &["phantoms", "--out", "ph", "--count", count]));
}

#[test]
fn scan_and_split_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    phantoms(d, "6");
    let scan = ok_json(pbnet(d, &["scan", "--preset", "tiny", "--root", "ph"]));
    assert_eq!(scan["samples"], 6);
    assert_eq!(scan["categories"]["lesion"], 6);
    let args = |out: &'static str| {
        ["split", "--preset", "tiny", "--root", "ph", "--set", "data.k=3", "--seed", "7", "--out", out]
    };
    let a = ok_json(pbnet(d, &args("a")));
    assert_eq!(a["fold_sizes"], serde_json::json!([2, 2, 2]));
    ok_json(pbnet(d, &args("b")));
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/manifest.json"), read("b/manifest.json"));
}

#[test]
fn train_then_infer_and_visualize() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    phantoms(d, "4");
    let common = ["--preset", "tiny", "--root", "ph", "--set", "data.k=2", "--set", "train.epochs=1"];
    let mut args = vec!["train", "--fold", "1", "--out", "run"];
    args.extend(common);
    let train = ok_json(pbnet(d, &args));
    assert_eq!(train["steps"], 1);
    assert_eq!(train["train"], 2);
    for f in ["best.safetensors", "last.safetensors", "runlog.jsonl", "config.toml", "manifest.json"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }

    let inf = ok_json(pbnet(
        d,
        &["infer", "--checkpoint", "run/best.safetensors", "--input", "ph/images", "--masks", "ph/masks", "--out", "inf"],
    ));
    assert_eq!(inf["images"].as_array().unwrap().len(), 4);
    assert!(inf["summary"]["pooled"]["metrics"]["dice"]["mean"].is_number());
    for s in ["pred", "prob", "overlay"] {
        assert!(d.join(format!("inf/phantom_000_{s}.png")).is_file());
    }

    let vis = ok_json(pbnet(
        d,
        &["visualize", "--checkpoint", "run/best.safetensors", "--image", "ph/images/phantom_001.png", "--mask", "ph/masks/phantom_001.png", "--out", "vis"],
    ));
    assert_eq!(vis["files"].as_array().unwrap().len(), 14);

    let info = ok_json(pbnet(d, &["info", "--checkpoint", "run/best.safetensors"]));
    let fresh = ok_json(pbnet(d, &["info", "--preset", "tiny"]));
    assert_eq!(info["params"], fresh["params"]);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let bad = pbnet(d, &["info", "--preset", "tiny", "--set", "model.modules.bgm=false"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(error_kind(&bad), "config");

    let bad = pbnet(d, &["info", "--preset", "tiny", "--set", "train.epochz=3"]);
    assert_eq!(bad.status.code(), Some(2));

    let missing = pbnet(d, &["scan", "--preset", "tiny", "--root", "absent"]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(error_kind(&missing), "data");

    phantoms(d, "2");
    let again = pbnet(d, &["phantoms", "--out", "ph", "--count", "2"]);
    assert_eq!(again.status.code(), Some(2));
    ok_json(pbnet(d, &["phantoms", "--out", "ph", "--count", "2", "--overwrite"]));

    let fold = pbnet(d, &["train", "--preset", "tiny", "--root", "ph", "--fold", "9", "--out", "x"]);
    assert_eq!(fold.status.code(), Some(2));
}
