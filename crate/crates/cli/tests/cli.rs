use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmpattern::dataio::{export_mask_pgm, read_mask_pgm, read_pgm, Volume};
use mmpattern::optimizer::TrainState;
use mmpattern::probmask::topk_extract;
use mmpattern::recon::zero_filled;
use mmpattern::fourier::fft2_real;
use mmpattern::BinaryMask;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_mmpattern");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MMPATTERN_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small phantom dataset: 6 subjects of 3 slices at 32x32.
fn phantom(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-phantom", "--subjects", "6", "--slices", "3", "--size", "32", "--seed", "4", "--out-dir", s(&data)]);
    data.join("manifest.json")
}

const QUICK: [&str; 6] = ["--min-epochs", "3", "--max-epochs", "3", "--lr", "1e-2"];

fn pipeline(manifest: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["pipeline", "--manifest", s(manifest), "--out-dir", s(out)];
    args.extend(QUICK);
    args.extend(extra);
    ok(&args)
}

#[test]
fn center_pattern_count() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c.pgm");
    let stdout = ok(&["generate-pattern", "--kind", "center", "--size", "192", "--r", "0.25", "--out", s(&out)]);
    assert!(stdout.contains("seed: 0"));
    let mask = read_mask_pgm(&out).unwrap();
    assert_eq!(mask.shape(), (192, 192));
    assert_eq!(mask.count(), 9216);
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    assert_eq!(sidecar["count"], 9216);
    assert_eq!(sidecar["kind"], "center");
    assert_eq!(sidecar["r"], 0.25);
}

#[test]
fn poisson_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    for p in [&a, &b] {
        ok(&["generate-pattern", "--kind", "poisson", "--size", "48", "--seed", "7", "--out", s(p)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(read_mask_pgm(&a).unwrap().count(), 576);
}

#[test]
fn learned_needs_checkpoint() {
    let out = run(&["generate-pattern", "--kind", "learned", "--size", "32"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_factor_is_config_error_before_work() {
    let dir = TempDir::new().unwrap();
    let manifest = phantom(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(&["pipeline", "--manifest", s(&manifest), "--r", "0", "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    let out = run(&["pipeline", "--manifest", s(&dir.path().join("missing.json")), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_3_with_marker() {
    let dir = TempDir::new().unwrap();
    let manifest = phantom(dir.path());
    fs::write(dir.path().join("data/phantom_002_B.raw"), [0u8; 8]).unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&["pipeline", "--manifest", s(&manifest), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out_dir.join("FAILED").exists());
}

#[test]
fn pipeline_reports_all_patterns_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let manifest = phantom(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = pipeline(&manifest, &a, &["--baselines", "all", "--seed", "3"]);
    assert!(stdout.contains("seed: 3"));
    pipeline(&manifest, &b, &["--baselines", "all", "--seed", "3"]);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    for name in ["ours", "gaussian1d", "center", "poisson"] {
        let entry = &summary["patterns"][name];
        assert!(entry["psnr_mean"].as_f64().unwrap().is_finite(), "{name}");
        assert!(entry["ssim_mean"].as_f64().unwrap() <= 1.0, "{name}");
    }

    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 10);
    for name in names {
        let (x, y) = (fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        // config.json records the output directory
        if name != "config.json" {
            assert!(x == y, "{name:?} differs");
        }
    }
}

#[test]
fn learned_pattern_matches_library() {
    let dir = TempDir::new().unwrap();
    let manifest = phantom(dir.path());
    let run_dir = dir.path().join("run");
    pipeline(&manifest, &run_dir, &["--baselines", "none"]);
    let out = dir.path().join("l.pgm");
    let ckpt = run_dir.join("checkpoint.json");
    ok(&["generate-pattern", "--kind", "learned", "--checkpoint", s(&ckpt), "--out", s(&out)]);
    let (cfg, state) = TrainState::load(&ckpt).unwrap();
    let expected = topk_extract(&state.best.unwrap().p, cfg.r).unwrap();
    assert_eq!(read_mask_pgm(&out).unwrap(), expected);
    assert_eq!(fs::read(&out).unwrap(), fs::read(run_dir.join("learned_pattern.pgm")).unwrap());
}

#[test]
fn evaluate_matches_pipeline_metrics() {
    let dir = TempDir::new().unwrap();
    let manifest = phantom(dir.path());
    let run_dir = dir.path().join("run");
    pipeline(&manifest, &run_dir, &["--seed", "9"]);
    let config = run_dir.join("config.json");
    let ev = dir.path().join("ev");
    for name in ["ours", "center", "poisson", "gaussian1d"] {
        let mask = if name == "ours" {
            run_dir.join("learned_pattern.pgm")
        } else {
            run_dir.join(format!("pattern_{name}.pgm"))
        };
        ok(&["evaluate", "--config", s(&config), "--mask", s(&mask), "--name", name, "--out-dir", s(&ev)]);
        let file = format!("metrics_{name}.csv");
        assert_eq!(fs::read(ev.join(&file)).unwrap(), fs::read(run_dir.join(&file)).unwrap(), "{name}");
    }
}

fn metric_rows(path: &Path) -> Vec<(f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn full_and_empty_masks() {
    let dir = TempDir::new().unwrap();
    let manifest = phantom(dir.path());
    let full = dir.path().join("full.pgm");
    let empty = dir.path().join("empty.pgm");
    export_mask_pgm(&BinaryMask::full(32, 32), &full).unwrap();
    export_mask_pgm(&BinaryMask::empty(32, 32), &empty).unwrap();
    let ev = dir.path().join("ev");
    ok(&["evaluate", "--manifest", s(&manifest), "--mask", s(&full), "--out-dir", s(&ev)]);
    let rows = metric_rows(&ev.join("metrics_full.csv"));
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|(p, s)| p.is_infinite() && *p > 0.0 && (*s - 1.0).abs() < 1e-12));

    ok(&["evaluate", "--manifest", s(&manifest), "--mask", s(&empty), "--out-dir", s(&ev)]);
    let rows = metric_rows(&ev.join("metrics_empty.csv"));
    let labels: Vec<String> = fs::read_to_string(ev.join("metrics_empty.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    let manifest_v = mmpattern::dataio::Manifest::load(&manifest).unwrap();
    for ((p, _), label) in rows.iter().zip(&labels) {
        let (id, slice) = label.split_once(':').unwrap();
        let subject = manifest_v.subject(id).unwrap();
        let volume = manifest_v.load_volume(subject, "B").unwrap();
        let (slices, _) = mmpattern::dataio::preprocess(&volume, 32).unwrap();
        let x = &slices[slice.parse::<usize>().unwrap()];
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let expected = 10.0 * (1024.0 * x.max() / energy).log10();
        assert!((p - expected).abs() < 1e-9, "{label}: {p} vs {expected}");
    }
}

#[test]
fn step_commands_reproduce_pipeline() {
    let dir = TempDir::new().unwrap();
    let manifest = phantom(dir.path());
    let run_dir = dir.path().join("run");
    pipeline(&manifest, &run_dir, &["--baselines", "none", "--seed", "2"]);
    let config = run_dir.join("config.json");
    let steps = dir.path().join("steps");
    let common = ["--config", s(&config), "--out-dir", s(&steps)];
    for cmd in ["fit-translator", "residual", "optimize"] {
        let mut args = vec![cmd];
        args.extend(common);
        ok(&args);
    }
    for file in ["translator.json", "checkpoint.json", "training.csv", "learned_pattern.pgm", "prob_mask.pgm"] {
        assert_eq!(fs::read(steps.join(file)).unwrap(), fs::read(run_dir.join(file)).unwrap(), "{file}");
    }

    // a finished run resumes to the same state; changed settings are refused
    let mut args = vec!["optimize", "--resume"];
    args.extend(common);
    ok(&args);
    assert_eq!(fs::read(steps.join("checkpoint.json")).unwrap(), fs::read(run_dir.join("checkpoint.json")).unwrap());
    args.extend(["--lr", "1"]);
    assert_eq!(run(&args).status.code(), Some(2));
}

#[test]
fn interrupted_optimize_resumes_to_same_result() {
    let dir = TempDir::new().unwrap();
    let manifest = phantom(dir.path());
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    for out in [&full, &part] {
        ok(&["fit-translator", "--manifest", s(&manifest), "--out-dir", s(out)]);
        ok(&["residual", "--manifest", s(&manifest), "--out-dir", s(out)]);
    }
    let base = ["optimize", "--manifest", s(&manifest), "--lr", "1e-2", "--min-epochs", "2", "--patience", "100"];
    ok(&[&base[..], &["--max-epochs", "6", "--out-dir", s(&full)]].concat());
    ok(&[&base[..], &["--max-epochs", "3", "--out-dir", s(&part)]].concat());
    ok(&["optimize", "--manifest", s(&manifest), "--resume", "--max-epochs", "6", "--out-dir", s(&part)]);
    for file in ["checkpoint.json", "training.csv", "learned_pattern.pgm"] {
        assert_eq!(fs::read(full.join(file)).unwrap(), fs::read(part.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn env_sets_default_output_dir() {
    let dir = TempDir::new().unwrap();
    let target = dir.path().join("envout");
    let out = Command::new(BIN)
        .args(["generate-pattern", "--kind", "center", "--size", "16"])
        .env("MMPATTERN_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("pattern_center.pgm").exists());
    assert!(target.join("pattern_center.json").exists());
}

#[test]
fn undersample_then_reconstruct_matches_library() {
    let dir = TempDir::new().unwrap();
    phantom(dir.path());
    let volume = dir.path().join("data/phantom_001_B.raw");
    let mask_path = dir.path().join("m.pgm");
    ok(&["generate-pattern", "--kind", "poisson", "--size", "32", "--seed", "1", "--out", s(&mask_path)]);
    let k = dir.path().join("k.raw");
    let rec = dir.path().join("rec.raw");
    ok(&["undersample", "--volume", s(&volume), "--dims", "3,32,32", "--mask", s(&mask_path), "--out", s(&k)]);
    ok(&["reconstruct", "--kspace", s(&k), "--dims", "3,32,32", "--mask", s(&mask_path), "--out", s(&rec)]);

    let mask = read_mask_pgm(&mask_path).unwrap();
    let input = Volume::load(&volume, [3, 32, 32]).unwrap();
    let output = Volume::load(&rec, [3, 32, 32]).unwrap();
    for i in 0..3 {
        let expected = zero_filled(&mask.apply(&fft2_real(&input.slice(i))).unwrap());
        for (a, b) in output.slice(i).data().iter().zip(expected.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    let wrong = dir.path().join("w.pgm");
    export_mask_pgm(&BinaryMask::full(16, 16), &wrong).unwrap();
    let out = run(&["undersample", "--volume", s(&volume), "--dims", "3,32,32", "--mask", s(&wrong), "--out", s(&k)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn augment_motion_is_deterministic_and_logged() {
    let dir = TempDir::new().unwrap();
    phantom(dir.path());
    let volume = dir.path().join("data/phantom_000_A.raw");
    let (a, b) = (dir.path().join("a.raw"), dir.path().join("b.raw"));
    for out in [&a, &b] {
        ok(&["augment-motion", "--volume", s(&volume), "--dims", "3,32,32", "--seed", "5", "--out", s(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    let transforms = log["transforms"].as_array().unwrap();
    assert_eq!(transforms.len(), 3);
    for t in transforms {
        assert!(t["dx"].as_f64().unwrap().abs() <= 5.0);
        assert!(t["theta"].as_f64().unwrap().abs() <= 5.0);
    }
    assert_ne!(fs::read(&a).unwrap(), fs::read(&volume).unwrap());
}

#[test]
fn graymap_exports_are_readable() {
    let dir = TempDir::new().unwrap();
    let manifest = phantom(dir.path());
    let run_dir = dir.path().join("run");
    pipeline(&manifest, &run_dir, &["--baselines", "center"]);
    let residual = read_pgm(&run_dir.join("residual_map.pgm")).unwrap();
    assert_eq!((residual.height, residual.width, residual.maxval), (32, 32, 65535));
    assert_eq!(residual.pixels.iter().copied().max(), Some(65535));
    assert_eq!(read_mask_pgm(&run_dir.join("learned_pattern.pgm")).unwrap().count(), 256);
}
