use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn herdcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_herdcount"))
        .args(args)
        .env_remove("REVIEW_TOKEN")
        .env_remove("DATA_ROOT")
        .env_remove("PORT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = herdcount(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON in {text}"));
    serde_json::from_str(line).unwrap()
}

#[test]
fn usage_errors_exit_2_with_json() {
    for args in [
        vec!["tile"],
        vec!["no-such-command"],
        vec!["split", "--data", "x", "--out", "y", "--ratios", "0.5,0.5"],
        vec!["train", "--data", "x", "--split", "y", "--out", "z", "--stage", "3"],
    ] {
        let out = herdcount(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = stderr_error(&out);
        assert_eq!(err["error"]["kind"], "usage", "{args:?}");
        assert!(err["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    assert_eq!(herdcount(&["--help"]).status.code(), Some(0));
}

#[test]
fn input_errors_exit_1_and_still_write_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("m.jsonl");
    let out = herdcount(&["tile", "--data", s(&dir.path().join("missing")), "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_error(&out)["error"]["kind"].is_string());
    let run = read_json(&dir.path().join("m.jsonl.run.json"));
    assert_eq!(run["command"], "tile");
    assert_eq!(run["status"], "failed");
    assert!(run["error"].is_object() || run["error"].is_string());
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--suite", "sparse_edge", "--seed", "3", "--out", s(&a)]);
    ok(&["synth", "--suite", "sparse_edge", "--seed", "3", "--out", s(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("annotations.csv")));
    assert!(ta.contains_key(Path::new("manifest.json")));
    assert_eq!(ta, tb);
    let run = read_json(&dir.path().join("a.run.json"));
    assert_eq!(run["status"], "ok");
    assert_eq!(run["details"]["scenes"], 60);

    let c = dir.path().join("c");
    ok(&["synth", "--suite", "sparse_edge", "--seed", "4", "--out", s(&c)]);
    assert_ne!(tree(&c), ta);
}

#[test]
fn tile_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("dense");
    ok(&["synth", "--suite", "dense", "--out", s(&data)]);
    let manifest = dir.path().join("patches.jsonl");
    ok(&["tile", "--data", s(&data), "--out", s(&manifest)]);
    let run = read_json(&dir.path().join("patches.jsonl.run.json"));
    assert_eq!(run["details"]["tiling"]["patch_size"], 512);
    assert_eq!(run["details"]["tiling"]["overlap_px"], 78);
    assert_eq!(run["details"]["images"], 4);
    assert_eq!(run["details"]["patches"], 4);
    let records: Vec<Value> = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let points: u64 = records
        .iter()
        .map(|r| r["points"].as_array().unwrap().len() as u64)
        .sum();
    assert_eq!(points, 60 + 140 + 210 + 250);

    let small = dir.path().join("small.jsonl");
    let pngs = dir.path().join("pngs");
    ok(&[
        "tile",
        "--data",
        s(&data),
        "--out",
        s(&small),
        "--patch-size",
        "256",
        "--overlap",
        "56",
        "--patches-dir",
        s(&pngs),
    ]);
    let run = read_json(&dir.path().join("small.jsonl.run.json"));
    assert_eq!(run["details"]["patches"], 4 * 9);
    assert_eq!(fs::read_dir(&pngs).unwrap().count(), 4 * 9);

    let bad = herdcount(&[
        "tile",
        "--data",
        s(&data),
        "--out",
        s(&small),
        "--patch-size",
        "64",
        "--overlap",
        "64",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn evaluate_scores_detections() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.csv");
    let det = dir.path().join("det.csv");
    fs::write(&ann, "image_id,x,y\na,10,10\na,50,50\nb,5,5\n").unwrap();
    // one hit within 4 px, one 5 px away, one on an image without animals
    fs::write(&det, "image_id,x,y,confidence\na,12,13,0.9\na,55,50,0.8\nc,1,1,0.7\n").unwrap();
    let out = dir.path().join("metrics.json");
    ok(&[
        "evaluate",
        "--detections",
        s(&det),
        "--annotations",
        s(&ann),
        "--out",
        s(&out),
        "--replicates",
        "200",
    ]);
    let m = read_json(&out);
    let text = m.to_string();
    assert!(text.contains("\"tp\":1"), "{text}");
    assert!(text.contains("\"fp\":2"), "{text}");
    assert!(text.contains("\"fn\":2"), "{text}");

    let wide = dir.path().join("wide.json");
    ok(&[
        "evaluate",
        "--detections",
        s(&det),
        "--annotations",
        s(&ann),
        "--out",
        s(&wide),
        "--radius",
        "6",
        "--replicates",
        "0",
    ]);
    assert!(read_json(&wide).to_string().contains("\"tp\":2"));
}

#[test]
fn serve_needs_a_token() {
    let dir = tempfile::tempdir().unwrap();
    let out = herdcount(&["serve", "--data-root", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["error"]["kind"], "config");
    assert!(stderr_error(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("REVIEW_TOKEN"));
}

/// Every command once, on a tiny model and one epoch per stage.
#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let data = path("data");
    let patches = path("patches.jsonl");
    let split = path("split.json");
    let ppn_dir = path("ppn");
    let det_dir = path("det");
    let hnps = path("hnps.jsonl");
    let val_hnps = path("val_hnps.jsonl");
    let flagged = path("flagged.jsonl");
    let infer_dir = path("infer");
    let metrics = path("metrics.json");
    let report_dir = path("report");
    let annotations = format!("{data}/annotations.csv");
    let detections = format!("{infer_dir}/detections.csv");
    let ppn_ckpt = format!("{ppn_dir}/ppn.safetensors");
    let stage1 = format!("{det_dir}/detector_stage1.safetensors");
    let stage2 = format!("{det_dir}/detector_stage2.safetensors");
    let exists = |p: &str| Path::new(p).exists();

    ok(&["synth", "--suite", "separable", "--seed", "1", "--out", &data]);
    ok(&["tile", "--data", &data, "--out", &patches]);
    ok(&["split", "--data", &data, "--out", &split, "--manifest", &patches]);
    assert!(read_json(Path::new(&split)).to_string().contains("train"));

    let quick = ["--model", "tiny", "--epochs", "1", "--batch-size", "8"];
    let mut args = vec!["pretrain", "--data", &data, "--split", &split, "--out", &ppn_dir];
    args.extend(quick);
    ok(&args);
    assert!(exists(&ppn_ckpt));
    assert!(exists(&format!("{ppn_dir}/ppn.json")));
    assert!(exists(&format!("{ppn_dir}/pretrain.run.json")));

    let mut args = vec![
        "train",
        "--data",
        &data,
        "--split",
        &split,
        "--out",
        &det_dir,
        "--init",
        "ppn",
        "--weights",
        &ppn_ckpt,
    ];
    args.extend(quick);
    ok(&args);
    let meta = read_json(Path::new(&format!("{det_dir}/detector_stage1.json")));
    assert_eq!(meta["lineage"], serde_json::json!(["scratch", "ppn_transfer"]));

    ok(&[
        "mine-hnp",
        "--data",
        &data,
        "--split",
        &split,
        "--checkpoint",
        &stage1,
        "--out",
        &hnps,
        "--val-out",
        &val_hnps,
        "--threshold",
        "0.0",
    ]);
    let mined = fs::read_to_string(&hnps).unwrap();
    assert!(mined.lines().all(|l| l.contains("\"empty\"")));

    let mut args = vec![
        "train",
        "--stage",
        "2",
        "--data",
        &data,
        "--split",
        &split,
        "--out",
        &det_dir,
        "--stage1",
        &stage1,
        "--hnps",
        &hnps,
        "--val-hnps",
        &val_hnps,
    ];
    args.extend(quick);
    ok(&args);
    assert!(exists(&stage2));

    ok(&[
        "prescreen",
        "--checkpoint",
        &ppn_ckpt,
        "--data",
        &data,
        "--out",
        &flagged,
        "--tau",
        "0.0",
    ]);
    assert_eq!(fs::read_to_string(&flagged).unwrap().lines().count(), 200);

    ok(&["infer", "--checkpoint", &stage2, "--data", &data, "--out", &infer_dir]);
    assert!(exists(&detections));
    let summary = read_json(Path::new(&format!("{infer_dir}/summary.json")));
    assert_eq!(summary.as_array().map(Vec::len), Some(200));

    ok(&[
        "evaluate",
        "--detections",
        &detections,
        "--annotations",
        &annotations,
        "--out",
        &metrics,
        "--replicates",
        "50",
    ]);
    let label = format!("tiny:separable={metrics}");
    ok(&[
        "report",
        "--out",
        &report_dir,
        "--manifest",
        &patches,
        "--split",
        &split,
        "--metrics",
        &label,
        "--detections",
        &detections,
        "--annotations",
        &annotations,
    ]);
    for f in [
        "density.json",
        "density.png",
        "stratification.json",
        "table.csv",
        "scatter.csv",
        "report.run.json",
    ] {
        assert!(exists(&format!("{report_dir}/{f}")), "{f}");
    }
    for run in [
        format!("{patches}.run.json"),
        format!("{det_dir}/train.run.json"),
        format!("{infer_dir}/infer.run.json"),
        format!("{metrics}.run.json"),
    ] {
        assert_eq!(read_json(Path::new(&run))["status"], "ok", "{run}");
    }
}
