//! Subcommand wiring: file formats, flag behavior and error paths, driven
//! through the real binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stme_core::signal::{load_wav, save_wav, synth_noise, synth_surrogate_speech, NoiseKind,
    WavEncoding};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_stme")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("stme_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin()).args(args).output().expect("spawn stme");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_clip(dir: &Path, name: &str, seed: u64, seconds: f64, class: usize) {
    let w = synth_surrogate_speech(seed, seconds, class).unwrap();
    save_wav(&w, &dir.join(name), WavEncoding::Float32).unwrap();
}

#[test]
fn kernels_roundtrip_and_export() {
    let dir = tmp("kernels");
    let bank = dir.join("bank.json");
    let (code, stdout, _) = run(&[
        "kernels",
        "make-random",
        "--seed",
        "7",
        "--n",
        "60",
        "--out",
        bank.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("resolved config"));
    let loaded = stme_core::modulation::load_bank(&bank).unwrap();
    assert_eq!(loaded.len(), 60);

    let csv_dir = dir.join("csv");
    let (code, _, _) = run(&[
        "kernels",
        "export-csv",
        "--bank",
        bank.to_str().unwrap(),
        "--out-dir",
        csv_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let matrices: Vec<_> = std::fs::read_dir(&csv_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("kernel_"))
        .collect();
    assert_eq!(matrices.len(), 60);
    let one = std::fs::read_to_string(csv_dir.join("kernel_000.csv")).unwrap();
    assert_eq!(one.lines().count(), 30);
    assert_eq!(one.lines().next().unwrap().split(',').count(), 20);
}

#[test]
fn mix_builds_cartesian_corpus_with_verified_snrs() {
    let dir = tmp("mix");
    let clean_dir = dir.join("clean");
    let noise_dir = dir.join("noise");
    std::fs::create_dir_all(&clean_dir).unwrap();
    std::fs::create_dir_all(&noise_dir).unwrap();
    write_clip(&clean_dir, "a.wav", 1, 1.0, 0);
    write_clip(&clean_dir, "b.wav", 2, 1.0, 1);
    for (i, name) in ["n1.wav", "n2.wav"].iter().enumerate() {
        let n = synth_noise(NoiseKind::White, 50 + i as u64, 2.0).unwrap();
        save_wav(&n, &noise_dir.join(name), WavEncoding::Float32).unwrap();
    }
    let out_dir = dir.join("mixed");
    let (code, _, _) = run(&[
        "mix",
        "--clean-dir",
        clean_dir.to_str().unwrap(),
        "--noise-dir",
        noise_dir.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--snr-db",
        "-6,0,6",
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0);
    let manifest = std::fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 12); // 2 clean x 2 noise x 3 snrs

    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        let noisy = load_wav(&out_dir.join(fields[0])).unwrap();
        let clean = load_wav(Path::new(fields[1])).unwrap();
        let snr_requested: f64 = fields[3].parse().unwrap();
        let noise: Vec<f64> = noisy
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(n, c)| n - c)
            .collect();
        let p_clean = clean.power();
        let p_noise = noise.iter().map(|s| s * s).sum::<f64>() / noise.len() as f64;
        let measured = 10.0 * (p_clean / p_noise).log10();
        assert!(
            (measured - snr_requested).abs() < 0.01,
            "{}: requested {snr_requested} dB, measured {measured} dB",
            fields[0]
        );
    }
}

#[test]
fn train_wires_loss_modes_into_history() {
    let dir = tmp("train_modes");
    let bank = dir.join("bank.json");
    run(&["kernels", "make-random", "--seed", "1", "--n", "3", "--out", bank.to_str().unwrap()]);

    let tfe_dir = dir.join("tfe");
    let (code, _, _) = run(&[
        "train", "--loss", "tfe", "--synthetic",
        "--out-dir", tfe_dir.to_str().unwrap(),
        "--steps", "6", "--batch-size", "2", "--seed", "9", "--eval-every", "0",
    ]);
    assert_eq!(code, 0);
    let history = std::fs::read_to_string(tfe_dir.join("history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        let stme_col = row.split(',').nth(3).unwrap();
        assert_eq!(stme_col, "0.00000e0", "tfe run must log a zero STME column");
    }

    let comb_dir = dir.join("comb");
    let (code, _, _) = run(&[
        "train", "--loss", "tfe+stme", "--bank", bank.to_str().unwrap(), "--synthetic",
        "--out-dir", comb_dir.to_str().unwrap(),
        "--steps", "6", "--batch-size", "2", "--seed", "9", "--eval-every", "0",
    ]);
    assert_eq!(code, 0);
    let history = std::fs::read_to_string(comb_dir.join("history.csv")).unwrap();
    for row in history.lines().skip(1) {
        let stme_col: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!(stme_col > 0.0, "combined run must log a nonzero STME column");
    }

    // stme-only mode without a bank is a validation failure
    let (code, _, stderr) = run(&[
        "train", "--loss", "stme", "--synthetic",
        "--out-dir", dir.join("bad").to_str().unwrap(),
        "--steps", "1",
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("bank"));
}

#[test]
fn train_accepts_config_file_with_flag_overrides() {
    let dir = tmp("train_config");
    let cfg_path = dir.join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"steps": 4, "batch_size": 2, "seed": 5, "loss_mode": "tfe", "eval_every": 0}"#,
    )
    .unwrap();
    let out = dir.join("run");
    let (code, stdout, _) = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--synthetic",
        "--out-dir",
        out.to_str().unwrap(),
        "--steps",
        "3",
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("\"steps\":3"), "flag must override config file");
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4); // header + 3 rows
}

#[test]
fn enhance_streaming_matches_batch_output() {
    let dir = tmp("enhance");
    let run_dir = dir.join("run");
    let (code, _, _) = run(&[
        "train", "--loss", "tfe", "--synthetic",
        "--out-dir", run_dir.to_str().unwrap(),
        "--steps", "4", "--batch-size", "2", "--seed", "2", "--eval-every", "0",
    ]);
    assert_eq!(code, 0);
    let checkpoint = run_dir.join("checkpoint_final.bin");

    let clean = synth_surrogate_speech(5, 1.0, 3).unwrap();
    let noise = synth_noise(NoiseKind::White, 6, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (noisy, _) = stme_core::signal::mix_at_snr(&clean, &noise, 0.0, &mut rng).unwrap();
    let input = dir.join("noisy.wav");
    save_wav(&noisy, &input, WavEncoding::Float32).unwrap();

    let batch_out = dir.join("batch.wav");
    let stream_out = dir.join("stream.wav");
    let (code, _, _) = run(&[
        "enhance", "--checkpoint", checkpoint.to_str().unwrap(),
        "--input", input.to_str().unwrap(), "--output", batch_out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let (code, _, _) = run(&[
        "enhance", "--checkpoint", checkpoint.to_str().unwrap(),
        "--input", input.to_str().unwrap(), "--output", stream_out.to_str().unwrap(),
        "--streaming",
    ]);
    assert_eq!(code, 0);
    let a = load_wav(&batch_out).unwrap();
    let b = load_wav(&stream_out).unwrap();
    assert_eq!(a.len(), b.len());
    let max_diff = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-4, "streaming/batch differ by {max_diff}");

    // missing checkpoint: clear error, exit 1
    let (code, _, stderr) = run(&[
        "enhance", "--checkpoint", dir.join("nope.bin").to_str().unwrap(),
        "--input", input.to_str().unwrap(), "--output", dir.join("x.wav").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("error"));
}

#[test]
fn evaluate_identity_corpus_and_errors() {
    let dir = tmp("evaluate");
    let clean_dir = dir.join("clean");
    let proc_dir = dir.join("processed");
    std::fs::create_dir_all(&clean_dir).unwrap();
    std::fs::create_dir_all(&proc_dir).unwrap();
    for i in 0..2 {
        let name = format!("f{i}.wav");
        write_clip(&clean_dir, &name, 30 + i, 3.5, i as usize);
        write_clip(&proc_dir, &name, 30 + i, 3.5, i as usize);
    }
    let bank = dir.join("bank.json");
    run(&["kernels", "make-random", "--seed", "4", "--n", "4", "--out", bank.to_str().unwrap()]);
    let report = dir.join("report.csv");
    let (code, _, _) = run(&[
        "evaluate",
        "--clean-dir", clean_dir.to_str().unwrap(),
        "--processed-dir", proc_dir.to_str().unwrap(),
        "--bank", bank.to_str().unwrap(),
        "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    for row in csv.lines().skip(1).take(2) {
        let fields: Vec<&str> = row.split(',').collect();
        let stoi: f64 = fields[2].parse().unwrap();
        let stmi: f64 = fields[3].parse().unwrap();
        assert!((stoi - 1.0).abs() < 1e-6);
        assert!((stmi - 1.0).abs() < 1e-9);
    }
    // aggregate equals recomputation from rows
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("AGGREGATE"))
        .map(|l| l.split(',').skip(1).take(3).map(|v| v.parse().unwrap()).collect())
        .collect();
    let agg: Vec<f64> = csv
        .lines()
        .last()
        .unwrap()
        .split(',')
        .skip(1)
        .take(3)
        .map(|v| v.parse().unwrap())
        .collect();
    for m in 0..3 {
        let mean = rows.iter().map(|r| r[m]).sum::<f64>() / rows.len() as f64;
        assert!((agg[m] - mean).abs() < 1e-6 * mean.abs().max(1.0));
    }

    // missing bank file: error that names the problem
    let (code, _, stderr) = run(&[
        "evaluate",
        "--clean-dir", clean_dir.to_str().unwrap(),
        "--processed-dir", proc_dir.to_str().unwrap(),
        "--bank", dir.join("missing_bank.json").to_str().unwrap(),
        "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(!stderr.is_empty());
}

#[test]
fn out_dir_env_override_applies_to_relative_paths() {
    let dir = tmp("env_override");
    let out = Command::new(bin())
        .args(["kernels", "make-random", "--seed", "1", "--n", "2", "--out", "env_bank.json"])
        .env("STME_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("env_bank.json").exists());
}

#[test]
fn spectrogram_export_writes_csv_matrix() {
    let dir = tmp("spectrogram");
    write_clip(&dir, "x.wav", 3, 1.0, 2);
    let out = dir.join("spec.csv");
    let (code, stdout, _) = run(&[
        "spectrogram",
        "--input", dir.join("x.wav").to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("99 frames x 257 bins"));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 99);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 257);
}

#[test]
fn unknown_flags_are_usage_errors() {
    let (code, _, _) = run(&["kernels", "make-random", "--definitely-not-a-flag"]);
    assert_eq!(code, 2);
}
