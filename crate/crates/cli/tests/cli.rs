use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn svflab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svflab")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = svflab(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn error_of(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    serde_json::from_str::<Value>(&line).expect("stderr is json")["error"].clone()
}

fn read(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn small_config(dir: &Path) -> String {
    let cfg = json!({
        "model": { "seed": 3 },
        "train": { "steps": 60, "checkpoint_every": 20, "batch_keys": 64 },
    });
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p.display().to_string()
}

#[test]
fn train_then_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let rs = run.to_str().unwrap();
    let out = tmp.path().join("reports");
    let os = out.to_str().unwrap();
    let cfg = small_config(tmp.path());

    let summary = ok(&["train", "--config", &cfg, "--out", rs]);
    assert_eq!(summary["summary"]["step"], 60);
    assert!(run.join("ckpt_60.bin").exists() && run.join("losses.csv").exists());

    ok(&["analyze", "alignment", "--run", rs, "--step", "20", "--out", os]);
    let a = read(&out.join("alignment.json"));
    assert_eq!(a["schema_version"], 1);
    assert_eq!(a["data"]["step"], 20);
    assert_eq!(a["data"]["report"]["pair_assignment"].as_array().unwrap().len(), 4);

    let d = ok(&["analyze", "decompose", "--run", rs, "--out", os, "--contexts", "10", "--rotate"]);
    let csv = fs::read_to_string(out.join("decomposition.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with("rotated,stratum"));
    assert_eq!(csv.lines().count() - 1, d["summary"]["rows"].as_u64().unwrap() as usize);

    ok(&["analyze", "sparsity", "--run", rs, "--out", os, "--contexts", "20"]);
    assert_eq!(read(&out.join("sparsity.json"))["data"].as_array().unwrap().len(), 4 * 3);

    ok(&["analyze", "dynamics", "--run", rs, "--out", os, "--kind", "sv-self", "--index", "1"]);
    let m = &read(&out.join("dynamics.json"))["data"]["matrix"];
    assert_eq!(m["rows"], 4);

    let bad = svflab(&["analyze", "alignment", "--run", rs, "--step", "7", "--out", os]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(error_of(&bad)["kind"], "missing-checkpoint");
}

#[test]
fn resume_continues_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let rs = run.to_str().unwrap();
    let cfg = small_config(tmp.path());
    ok(&["train", "--config", &cfg, "--out", rs]);
    let before = fs::read(run.join("ckpt_60.bin")).unwrap();
    fs::remove_file(run.join("ckpt_60.bin")).unwrap();
    ok(&["train", "--out", rs, "--resume"]);
    assert_eq!(fs::read(run.join("ckpt_60.bin")).unwrap(), before);

    let changed = svflab(&["train", "--config", &cfg, "--out", rs, "--resume", "--steps", "80"]);
    assert_eq!(changed.status.code(), Some(2));
    assert_eq!(error_of(&changed)["kind"], "config");
}

#[test]
fn verify_lemma3_only() {
    let tmp = tempfile::tempdir().unwrap();
    let v = ok(&["verify-theorems", "--only", "lemma3", "--samples", "1e5", "--out", tmp.path().to_str().unwrap()]);
    let verdicts = v.as_array().unwrap();
    assert_eq!(verdicts.len(), 3);
    assert!(verdicts.iter().all(|x| x["theorem_id"] == "lemma3" && x["bound_satisfied"] == true));
    assert_eq!(read(&tmp.path().join("verdicts.json")), v);
}

#[test]
fn errors_are_json_with_exit_codes() {
    let unknown = svflab(&["verify-theorems", "--only", "lemma9"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert_eq!(error_of(&unknown)["kind"], "unknown-name");

    let flag = svflab(&["train", "--bogus"]);
    assert_eq!(flag.status.code(), Some(2));
    assert_eq!(error_of(&flag)["kind"], "usage");

    let samples = svflab(&["verify-theorems", "--samples", "0.5"]);
    assert_eq!(error_of(&samples)["kind"], "usage");

    let missing = svflab(&["analyze", "alignment", "--run", "/nonexistent/run", "--out", "/tmp"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(error_of(&missing)["kind"], "io");

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"model\": {\"n_features\": \"many\"}}").unwrap();
    let schema = svflab(&["train", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(error_of(&schema)["kind"], "schema");
}

#[test]
fn sweep_writes_one_row_per_pair_and_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "base": { "train": { "steps": 40, "checkpoint_every": 40, "batch_keys": 64 } },
        "axis": "seed",
        "values": [0.0, 1.0, 2.0],
        "replicates": 1,
        "escalate_steps": null,
    });
    let sp = tmp.path().join("spec.json");
    fs::write(&sp, spec.to_string()).unwrap();
    let out = tmp.path().join("sweep");
    let s = ok(&["sweep", "--spec", sp.to_str().unwrap(), "--workers", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(s["summary"]["cells"], 3);
    let csv = fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    let cells: Vec<_> = fs::read_dir(out.join("cells")).unwrap().collect();
    assert_eq!(cells.len(), 3);
    for c in cells {
        let c = c.unwrap().path();
        assert!(c.join("cell.json").exists() && c.join("final.json").exists());
    }
}

fn write_f32(path: &Path, values: &[f32]) {
    fs::write(path, values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
}

#[test]
fn lm_decompose_on_handmade_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // One-dimensional head reading coordinate 0 of a 3-dim residual.
    write_f32(&d.join("wq.f32"), &[1.0, 0.0, 0.0]);
    write_f32(&d.join("wk.f32"), &[2.0, 0.0, 0.0]);
    write_f32(&d.join("resid.f32"), &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let array = |name: &str, shape: [usize; 2]| json!({ "name": name, "dtype": "f32", "shape": shape, "file": format!("{name}.f32"), "byte_offset": 0 });
    let manifest = json!({
        "model_name": "hand",
        "layer": 0, "head": 1, "d_model": 3, "d_head": 1,
        "prompt": "a b c d", "tokens": ["a", "b", "c", "d"],
        "checkpoint_step": 5, "scale_folded": true,
        "arrays": [array("wq", [1, 3]), array("wk", [1, 3]), array("resid", [4, 3])],
    });
    let mp = d.join("manifest.json");
    fs::write(&mp, manifest.to_string()).unwrap();
    let pairs = json!({ "pairs": [
        { "head": "L0H1", "dest": 3, "source": 2 },
        { "head": "L0H1", "dest": 1, "source": 3 },
        { "head": "L5H5", "dest": 1, "source": 0 },
    ]});
    let pp = d.join("pairs.json");
    fs::write(&pp, pairs.to_string()).unwrap();
    let out = d.join("out");
    let s = ok(&["lm", "decompose", "--dump", mp.to_str().unwrap(), "--pairs", pp.to_str().unwrap(), "--rotate", "--out", out.to_str().unwrap()]);
    assert_eq!(s["summary"]["records"], 1);
    assert_eq!(s["summary"]["skipped"], 2);

    let rec = &read(&out.join("lm_records.json"))["data"]["records"][0];
    // Query logits 2·x₀ over keys x₀ = (1, 0.5, 2, 1); key 2 minus the mean of the rest.
    let expected = 2.0 * (2.0 - (1.0 + 0.5 + 1.0) / 3.0);
    assert!((rec["record"]["relative_attention"].as_f64().unwrap() - expected).abs() < 1e-9);
    assert_eq!(rec["record"]["n_recon"], 1);
    let csv = fs::read_to_string(out.join("lm_decomposition.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let mut m = manifest.clone();
    m["scale_folded"] = json!(false);
    fs::write(&mp, m.to_string()).unwrap();
    let bad = svflab(&["lm", "decompose", "--dump", mp.to_str().unwrap(), "--pairs", pp.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(error_of(&bad)["kind"], "dump");
}
