use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dcac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcac")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn analyze_reports_footprint_and_orders_presets() {
    let paper = json(&dcac(&["analyze", "--preset", "paper"]));
    let params = paper["total_params"].as_u64().unwrap();
    let macs = paper["macs"].as_u64().unwrap();
    assert!((1_400_000..=1_800_000).contains(&params), "{params}");
    assert!((260_000_000..=390_000_000).contains(&macs), "{macs}");
    let tiny = json(&dcac(&["analyze", "--preset", "tiny"]));
    assert!(tiny["total_params"].as_u64().unwrap() < params);
    let sized = json(&dcac(&["analyze", "--preset", "paper", "--input-size", "320", "320"]));
    // the head's 512 MACs do not grow with the input
    assert_eq!(sized["macs"].as_u64().unwrap(), 4 * (macs - 512) + 512);
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"branches\": 3").unwrap();
    let out = dcac(&["analyze", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());

    let out = dcac(&["analyze"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dcac(&["split", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

fn synthetic_manifest(path: &Path, patients: usize) {
    let mut text = String::from("image_name,patient_id,sex,age_approx,anatom_site_general_challenge,diagnosis,benign_malignant,target\n");
    let mut k = 0;
    for pt in 0..patients {
        for _ in 0..(1 + (pt * 7) % 5) {
            let target = (k % 23 == 0) as u8;
            let bm = if target == 1 { "malignant" } else { "benign" };
            text.push_str(&format!("ISIC_{k:07},IP_{pt:05},female,45.0,torso,unknown,{bm},{target}\n"));
            k += 1;
        }
    }
    std::fs::write(path, text).unwrap();
}

fn patients_of(csv: &Path) -> HashSet<String> {
    let mut r = csv::Reader::from_path(csv).unwrap();
    r.records().map(|row| row.unwrap()[1].to_string()).collect()
}

#[test]
fn split_is_patient_disjoint_sized_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("train.csv");
    synthetic_manifest(&manifest, 600);
    let dups = dir.path().join("dups.txt");
    std::fs::write(&dups, "image_name\nISIC_0000001\nISIC_0000002\nISIC_9999999\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| {
        dcac(&["split", "--manifest", p(&manifest), "--duplicates", p(&dups), "--val-frac", "0.3", "--seed", "9", "--out", p(out)])
    };
    let report = json(&args(&a));
    assert_eq!(report["dedup"]["removed"], 2);
    assert_eq!(report["dedup"]["absent"], serde_json::json!(["ISIC_9999999"]));
    let n = report["records_after_dedup"].as_f64().unwrap();
    let val = report["split"]["val"]["images"].as_f64().unwrap();
    assert!((val / n - 0.3).abs() <= 0.02, "{}", val / n);
    assert!(patients_of(&a.join("train.csv")).is_disjoint(&patients_of(&a.join("val.csv"))));
    assert!(a.join("run_manifest.json").exists());

    json(&args(&b));
    for f in ["train.csv", "val.csv", "split_summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn toy_train_evaluate_resume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    json(&dcac(&["make-toy", "--out", p(&data), "--seed", "3"]));

    let full = dir.path().join("full");
    let summary = json(&dcac(&["train", "--preset", "toy", "--seed", "5", "--data", p(&data), "--out", p(&full)]));
    assert_eq!(summary["complete"], true);
    assert_eq!(summary["global_step"], 160);
    let log = std::fs::read_to_string(full.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 20);

    let eval_dir = dir.path().join("eval");
    let report = json(&dcac(&[
        "evaluate",
        "--checkpoint",
        p(&full.join("final.dcac")),
        "--manifest",
        p(&data.join("train.csv")),
        "--images",
        p(&data.join("images")),
        "--seed",
        "0",
        "--out",
        p(&eval_dir),
    ]));
    assert!(report["auroc_full"].as_f64().unwrap() >= 0.99, "{report}");
    assert!(eval_dir.join("scores.csv").exists());

    let again = dir.path().join("again");
    json(&dcac(&["train", "--preset", "toy", "--seed", "5", "--data", p(&data), "--out", p(&again)]));
    assert_eq!(std::fs::read(full.join("final.dcac")).unwrap(), std::fs::read(again.join("final.dcac")).unwrap());

    let split = dir.path().join("split");
    let first = json(&dcac(&["train", "--preset", "toy", "--seed", "5", "--data", p(&data), "--out", p(&split), "--max-epochs", "13"]));
    assert_eq!(first["complete"], false);
    assert!(!split.join("final.dcac").exists());
    let latest = split.join("latest.dcac");
    json(&dcac(&["train", "--resume", p(&latest), "--data", p(&data), "--out", p(&split)]));
    assert_eq!(std::fs::read(full.join("final.dcac")).unwrap(), std::fs::read(split.join("final.dcac")).unwrap());
}

#[test]
fn evaluate_rejects_a_corrupted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    json(&dcac(&["make-toy", "--out", p(&data), "--n", "8"]));
    let ckpt = dir.path().join("broken.dcac");
    let mut bytes = b"DCAC\x01\x00\x00\x00".to_vec();
    bytes.extend((0..64u8).map(|i| i.wrapping_mul(37)));
    std::fs::write(&ckpt, bytes).unwrap();
    let out = dcac(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&data.join("train.csv")),
        "--images",
        p(&data.join("images")),
        "--seed",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CRC"));
}

#[test]
fn gradcheck_exit_code_reflects_outcome() {
    let ok = dcac(&["gradcheck", "--preset", "tiny"]);
    assert_eq!(ok.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(v["passed"], true);
    let bad = dcac(&["gradcheck", "--preset", "tiny", "--inject-fault", "--format", "text"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
    assert_eq!(dcac(&["gradcheck", "--preset", "huge"]).status.code(), Some(2));
}

#[test]
fn augment_preview_writes_k_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    json(&dcac(&["make-toy", "--out", p(&data), "--n", "2", "--size", "48"]));
    let img = data.join("images").join("toy_0001.png");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        json(&dcac(&["augment-preview", "--image", p(&img), "--seed", "4", "--n", "3", "--out", p(out)]));
    }
    for k in 0..3 {
        let name = format!("aug_{k:03}.png");
        let decoded = image::open(a.join(&name)).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (160, 160));
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    assert_ne!(std::fs::read(a.join("aug_000.png")).unwrap(), std::fs::read(a.join("aug_001.png")).unwrap());

    // identity preview at the source size reproduces the source pixels
    let id = dir.path().join("id");
    json(&dcac(&["augment-preview", "--image", p(&img), "--seed", "4", "--n", "1", "--size", "48", "--identity", "--out", p(&id)]));
    let src = image::open(&img).unwrap().to_rgb8();
    let got = image::open(id.join("aug_000.png")).unwrap().to_rgb8();
    assert_eq!(src, got);
}

#[test]
fn threads_flag_and_env_are_accepted() {
    let out = Command::new(env!("CARGO_BIN_EXE_dcac"))
        .args(["analyze", "--preset", "tiny"])
        .env("DCAC_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(manifest["threads"], 2);
    assert_eq!(manifest["command"], "analyze");
    assert_eq!(dcac(&["--threads", "0", "analyze", "--preset", "tiny"]).status.code(), Some(2));
}
