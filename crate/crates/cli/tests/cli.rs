// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pti(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pti"))
        .current_dir(dir)
        .env_remove("PTI_LOG")
        .args(args)
        .output()
        .expect("spawn pti")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = pti(dir, args);
    assert!(
        out.status.success(),
        "pti {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Model, dataset and directions in a fresh directory.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-model", "-o", "m.bin", "--seed", "2", "--layers", "2", "--heads", "2", "--head-dim", "4", "--vocab", "32"]);
    ok(d, &["make-synth", "--model", "m.bin", "-o", "d.json", "--samples", "4", "--seed", "9"]);
    ok(d, &["extract", "--model", "m.bin", "--data", "d.json", "-o", "dirs.json"]);
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn init_model_header_fields() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-model", "-o", "m.bin", "--seed", "1", "--layers", "2", "--heads", "2", "--head-dim", "4", "--vocab", "32", "--max-seq-len", "64"]);
    let bytes = read(d, "m.bin");
    assert_eq!(&bytes[..4], b"PTIW");
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    // version, layers, heads, head_dim, hidden, vocab, max_seq_len
    assert_eq!((1..7).map(field).collect::<Vec<_>>(), [2, 2, 4, 8, 32, 64]);
    assert!(d.join("m.bin.tensors.txt").is_file());
    let manifest: serde_json::Value = serde_json::from_slice(&read(d, "m.bin.manifest.json")).unwrap();
    assert_eq!(manifest["command"], "init-model");
    assert_eq!(manifest["rng_seed"], 1);
}

#[test]
fn generation_is_deterministic() {
    let dir = workspace();
    let d = dir.path();
    for out in ["a.json", "b.json"] {
        ok(d, &["generate", "--model", "m.bin", "--input", "d.json", "--sample", "1", "--directions", "dirs.json", "--lambda-k", "0.4", "--lambda-v", "0.6", "-o", out]);
    }
    assert_eq!(read(d, "a.json"), read(d, "b.json"));
    let tokens: serde_json::Value = serde_json::from_slice(&read(d, "a.json")).unwrap();
    assert!(!tokens["tokens"].as_array().unwrap().is_empty());
}

#[test]
fn zero_strength_matches_no_intervention() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["generate", "--model", "m.bin", "--input", "d.json", "--sample", "0", "--no-intervention", "-o", "v.json", "--trace", "v.csv"]);
    ok(d, &["generate", "--model", "m.bin", "--input", "d.json", "--sample", "0", "--directions", "dirs.json", "--lambda-k", "0", "--lambda-v", "0", "-o", "z.json", "--trace", "z.csv"]);
    assert_eq!(read(d, "v.json"), read(d, "z.json"));
    assert_eq!(read(d, "v.csv"), read(d, "z.csv"));
}

/// `P_img` per step from raw trace rows: visual mass over total mass,
/// averaged over (layer, head).
fn visual_share_by_step(csv: &str, visual: &[usize]) -> Vec<f64> {
    let mut cells: BTreeMap<(usize, usize, usize), (f64, f64)> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let key = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
        let pos: usize = f[3].parse().unwrap();
        let w: f64 = f[4].parse().unwrap();
        let e = cells.entry(key).or_default();
        e.1 += w;
        if visual.contains(&pos) {
            e.0 += w;
        }
    }
    let steps = cells.keys().map(|k| k.0).max().unwrap() + 1;
    let mut sum = vec![0.0; steps];
    let mut count = vec![0usize; steps];
    for ((s, _, _), (vis, all)) in cells {
        sum[s] += vis / (all + 1e-9);
        count[s] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

#[test]
fn analyze_reports_relative_change_per_stage() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["generate", "--model", "m.bin", "--input", "d.json", "--sample", "2", "--no-intervention", "-o", "v.json", "--trace", "v.csv"]);
    ok(d, &["generate", "--model", "m.bin", "--input", "d.json", "--sample", "2", "--directions", "dirs.json", "--lambda-k", "0.8", "--lambda-v", "0.8", "-o", "s.json", "--trace", "s.csv"]);
    ok(d, &["analyze", "--before", "v.csv", "--after", "s.csv", "-o", "a.csv"]);

    let segments: serde_json::Value = serde_json::from_slice(&read(d, "v.csv.segments.json")).unwrap();
    let visual: Vec<usize> = serde_json::from_value(segments["visual_indices"].clone()).unwrap();
    let before = visual_share_by_step(&String::from_utf8(read(d, "v.csv")).unwrap(), &visual);
    let after = visual_share_by_step(&String::from_utf8(read(d, "s.csv")).unwrap(), &visual);

    let report = String::from_utf8(read(d, "a.csv")).unwrap();
    let rows: Vec<Vec<&str>> = report.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    let n = before.len();
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), 25 * k);
        let t = (k * n / 4).min(n - 1);
        assert_eq!(row[2].parse::<usize>().unwrap(), t);
        let m = after.len();
        let t_after = (k * m / 4).min(m - 1);
        assert_eq!(row[3].parse::<usize>().unwrap(), t_after);
        let expected = 100.0 * (after[t_after] - before[t]) / (before[t].abs() + 1e-9);
        let got: f64 = row[6].parse().unwrap();
        assert!((got - expected).abs() < 1e-9, "stage {k}: {got} vs {expected}");
    }

    let mask: Vec<u8> = (0..visual.len()).map(|i| (i % 2 == 0) as u8).collect();
    fs::write(d.join("mask.json"), serde_json::to_vec(&mask).unwrap()).unwrap();
    ok(d, &["analyze", "--before", "v.csv", "--after", "s.csv", "-o", "a2.csv", "--mask", "mask.json", "--heatmap", "h.csv"]);
    let heatmap = String::from_utf8(read(d, "h.csv")).unwrap();
    assert_eq!(heatmap.lines().next(), Some("layer,head,delta"));
    // 2 layers × 2 heads
    assert_eq!(heatmap.lines().count(), 5);
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let d = dir.path();

    // usage
    assert_eq!(code(&pti(d, &["no-such-command"])), 2);
    assert_eq!(code(&pti(d, &["generate", "--model", "m.bin", "--input", "d.json", "--sample", "0", "-o", "x.json"])), 2);
    let bad_log = Command::new(env!("CARGO_BIN_EXE_pti"))
        .current_dir(d)
        .env("PTI_LOG", "verbose")
        .args(["eval", "--chair", "c.jsonl", "-o", "e.json"])
        .output()
        .unwrap();
    assert_eq!(code(&bad_log), 2);

    // missing input
    let missing = pti(d, &["extract", "--model", "absent.bin", "--data", "d.json", "-o", "x.json"]);
    assert_eq!(code(&missing), 3);
    assert_eq!(String::from_utf8_lossy(&missing.stderr).lines().count(), 1);

    // fingerprint mismatch
    ok(d, &["init-model", "-o", "other.bin", "--seed", "3", "--layers", "2", "--heads", "2", "--head-dim", "4", "--vocab", "32"]);
    assert_eq!(code(&pti(d, &["extract", "--model", "other.bin", "--data", "d.json", "-o", "x.json"])), 4);
    assert!(!d.join("x.json").exists());

    // existing output, then --force
    let before = read(d, "dirs.json");
    assert_eq!(code(&pti(d, &["extract", "--model", "m.bin", "--data", "d.json", "-o", "dirs.json", "--pca-rank", "1"])), 5);
    assert_eq!(read(d, "dirs.json"), before);
    ok(d, &["extract", "--model", "m.bin", "--data", "d.json", "-o", "dirs.json", "--pca-rank", "1", "--force"]);
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = pti(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("generate"));
}

#[test]
fn eval_scores_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("c.jsonl"),
        "{\"mentioned_objects\":[\"cat\",\"dog\"],\"ground_truth_objects\":[\"cat\"]}\n\
         {\"mentioned_objects\":[\"car\"],\"ground_truth_objects\":[\"car\"]}\n",
    )
    .unwrap();
    ok(d, &["eval", "--chair", "c.jsonl", "-o", "e.json"]);
    let v: serde_json::Value = serde_json::from_slice(&read(d, "e.json")).unwrap();
    let chair_s = v["chair"]["chair_s"].as_f64().unwrap();
    let chair_i = v["chair"]["chair_i"].as_f64().unwrap();
    assert!((chair_s - 0.5).abs() < 1e-12);
    assert!((chair_i - 1.0 / 3.0).abs() < 1e-12);
    assert!(v.get("pope").is_none());
}
