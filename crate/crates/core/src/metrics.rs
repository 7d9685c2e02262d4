//! Objective evaluation: SI-SDR, STOI and STMI over files and corpora.

use std::collections::BTreeMap;
use std::path::Path;

use realfft::RealFftPlanner;

use crate::error::{Error, Result};
use crate::modulation::{mel_log_power, stmi_template, MelFilterbank, StrfKernelBank};
use crate::signal::{load_wav, Waveform};
use crate::spectral::{stft, StftConfig};
use crate::trainer::fmt6;

/// Cap applied symmetrically so numerically perfect (or fully orthogonal)
/// pairs stay finite in reports.
pub const SI_SDR_CAP_DB: f64 = 80.0;

/// Scale-invariant signal-to-distortion ratio in dB. The estimate is
/// projected onto the reference, so any global scaling of the estimate
/// leaves the result unchanged.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!(
            "length mismatch: {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.len() < 1600 {
        return Err(Error::TooShort {
            len: reference.len(),
            win_len: 1600,
        });
    }
    let rr: f64 = reference.samples.iter().map(|r| r * r).sum();
    if rr <= 0.0 {
        return Err(Error::ZeroPower("reference"));
    }
    let er: f64 = estimate
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| e * r)
        .sum();
    let alpha = er / rr;
    let target_power = alpha * alpha * rr;
    let distortion: f64 = estimate
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    if distortion <= 0.0 || target_power / distortion >= 10f64.powf(SI_SDR_CAP_DB / 10.0) {
        return Ok(SI_SDR_CAP_DB);
    }
    if target_power <= 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target_power / distortion).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

// STOI parameterization at 16 kHz: 512-sample Hann frames with 50%
// overlap (16 ms hop), 15 one-third-octave bands from 150 Hz, short-time
// segments of 24 frames = 384 ms, silent frames 40 dB below the loudest
// removed, clipped normalized correlation averaged over bands and
// segments.
const STOI_FRAME: usize = 512;
const STOI_HOP: usize = 256;
const STOI_BANDS: usize = 15;
const STOI_FIRST_CF_HZ: f64 = 150.0;
const STOI_SEGMENT_FRAMES: usize = 24;
const STOI_SILENCE_RANGE_DB: f64 = 40.0;
const STOI_CLIP_DB: f64 = -15.0;
const STOI_MIN_SECONDS: f64 = 3.0;

fn stoi_band_edges() -> Vec<(f64, f64)> {
    (0..STOI_BANDS)
        .map(|j| {
            let cf = STOI_FIRST_CF_HZ * 2f64.powf(j as f64 / 3.0);
            (cf / 2f64.powf(1.0 / 6.0), cf * 2f64.powf(1.0 / 6.0))
        })
        .collect()
}

/// Hann-windowed one-sided spectra of all frames.
fn stoi_frames(w: &Waveform) -> Vec<Vec<realfft::num_complex::Complex<f64>>> {
    let window: Vec<f64> = (0..STOI_FRAME)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / STOI_FRAME as f64).cos())
        .collect();
    let n_frames = if w.len() < STOI_FRAME {
        0
    } else {
        (w.len() - STOI_FRAME) / STOI_HOP + 1
    };
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(STOI_FRAME);
    let mut scratch = fft.make_scratch_vec();
    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * STOI_HOP;
        let mut buf: Vec<f64> = w.samples[start..start + STOI_FRAME]
            .iter()
            .zip(&window)
            .map(|(s, h)| s * h)
            .collect();
        let mut spec = fft.make_output_vec();
        fft.process_with_scratch(&mut buf, &mut spec, &mut scratch)
            .expect("fixed stoi frame length");
        out.push(spec);
    }
    out
}

/// Short-time objective intelligibility of `degraded` against
/// `reference`; close to 1 for transparent processing.
pub fn stoi(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    if reference.sample_rate_hz != 16_000 || degraded.sample_rate_hz != 16_000 {
        return Err(Error::RateMismatch {
            left: reference.sample_rate_hz,
            right: degraded.sample_rate_hz,
        });
    }
    if reference.len() != degraded.len() {
        return Err(Error::ShapeMismatch(format!(
            "length mismatch: {} vs {}",
            reference.len(),
            degraded.len()
        )));
    }
    let min_len = (STOI_MIN_SECONDS * 16_000.0) as usize;
    if reference.len() < min_len {
        return Err(Error::TooShort {
            len: reference.len(),
            win_len: min_len,
        });
    }

    let ref_spec = stoi_frames(reference);
    let deg_spec = stoi_frames(degraded);

    // drop frames 40 dB below the loudest reference frame
    let energies: Vec<f64> = ref_spec
        .iter()
        .map(|f| f.iter().map(|c| c.norm_sqr()).sum::<f64>())
        .collect();
    let max_e = energies.iter().fold(0.0f64, |a, &b| a.max(b));
    if max_e <= 0.0 {
        return Err(Error::ZeroPower("reference (all-silent input)"));
    }
    let thresh = max_e * 10f64.powf(-STOI_SILENCE_RANGE_DB / 10.0);
    let kept: Vec<usize> = (0..ref_spec.len())
        .filter(|&t| energies[t] >= thresh)
        .collect();
    if kept.len() < STOI_SEGMENT_FRAMES {
        return Err(Error::TooShort {
            len: kept.len(),
            win_len: STOI_SEGMENT_FRAMES,
        });
    }

    // one-third-octave band envelopes over the kept frames
    let edges = stoi_band_edges();
    let bin_hz = 16_000.0 / STOI_FRAME as f64;
    let band_bins: Vec<Vec<usize>> = edges
        .iter()
        .map(|&(lo, hi)| {
            (0..STOI_FRAME / 2 + 1)
                .filter(|&k| {
                    let f = k as f64 * bin_hz;
                    f >= lo && f < hi
                })
                .collect()
        })
        .collect();
    let envelope = |spec: &[Vec<realfft::num_complex::Complex<f64>>]| -> Vec<Vec<f64>> {
        band_bins
            .iter()
            .map(|bins| {
                kept.iter()
                    .map(|&t| {
                        bins.iter()
                            .map(|&k| spec[t][k].norm_sqr())
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            })
            .collect()
    };
    let x_env = envelope(&ref_spec);
    let y_env = envelope(&deg_spec);

    let clip_gain = 1.0 + 10f64.powf(STOI_CLIP_DB / 20.0);
    let n = STOI_SEGMENT_FRAMES;
    let mut acc = 0.0;
    let mut count = 0usize;
    for (x_band, y_band) in x_env.iter().zip(&y_env) {
        for m in n..=x_band.len() {
            let x = &x_band[m - n..m];
            let y = &y_band[m - n..m];
            let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if y_norm > 0.0 { x_norm / y_norm } else { 0.0 };
            let y_clipped: Vec<f64> = y
                .iter()
                .zip(x)
                .map(|(yv, xv)| (yv * scale).min(xv * clip_gain))
                .collect();
            let mx = x.iter().sum::<f64>() / n as f64;
            let my = y_clipped.iter().sum::<f64>() / n as f64;
            let mut num = 0.0;
            let mut dx = 0.0;
            let mut dy = 0.0;
            for (xv, yv) in x.iter().zip(&y_clipped) {
                num += (xv - mx) * (yv - my);
                dx += (xv - mx) * (xv - mx);
                dy += (yv - my) * (yv - my);
            }
            let den = (dx * dy).sqrt();
            if den > 0.0 {
                acc += num / den;
            }
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Metrics for one file pair; `None` marks a metric that does not apply
/// (too short, wrong rate).
#[derive(Clone, Debug)]
pub struct FileMetrics {
    pub filename: String,
    pub si_sdr_db: Option<f64>,
    pub stoi: Option<f64>,
    pub stmi: Option<f64>,
    pub duration_s: f64,
}

/// Per-file rows plus deterministic aggregates.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<FileMetrics>,
    /// Filenames present in only one of the two directories.
    pub unmatched: Vec<String>,
}

/// Mean over rows where the metric applies, with the contributing count.
pub fn aggregate(values: impl Iterator<Item = Option<f64>>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (if n > 0 { sum / n as f64 } else { f64::NAN }, n)
}

impl MetricReport {
    pub fn mean_si_sdr(&self) -> (f64, usize) {
        aggregate(self.rows.iter().map(|r| r.si_sdr_db))
    }

    pub fn mean_stoi(&self) -> (f64, usize) {
        aggregate(self.rows.iter().map(|r| r.stoi))
    }

    pub fn mean_stmi(&self) -> (f64, usize) {
        aggregate(self.rows.iter().map(|r| r.stmi))
    }

    /// CSV with one row per file and a trailing aggregate row; floats
    /// carry six significant digits.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("NA".to_string(), fmt6);
        let mut out = String::from("filename,si_sdr_db,stoi,stmi,duration_s\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.filename,
                fmt_opt(r.si_sdr_db),
                fmt_opt(r.stoi),
                fmt_opt(r.stmi),
                fmt6(r.duration_s)
            ));
        }
        let (si, _) = self.mean_si_sdr();
        let (st, _) = self.mean_stoi();
        let (sm, _) = self.mean_stmi();
        let dur: f64 = self.rows.iter().map(|r| r.duration_s).sum();
        out.push_str(&format!(
            "AGGREGATE_MEAN,{},{},{},{}\n",
            fmt6(si),
            fmt6(st),
            fmt6(sm),
            fmt6(dur)
        ));
        out
    }
}

fn wav_names(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "wav") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Evaluate matching filenames across a clean and a processed directory.
/// Pairs are truncated to their common length; rows are ordered by
/// filename so reports are deterministic.
pub fn evaluate_corpus(
    clean_dir: &Path,
    processed_dir: &Path,
    bank: &StrfKernelBank,
) -> Result<MetricReport> {
    let clean_files = wav_names(clean_dir)?;
    let processed_files = wav_names(processed_dir)?;
    let mut report = MetricReport::default();
    for name in clean_files.keys() {
        if !processed_files.contains_key(name) {
            report.unmatched.push(format!("{name} (clean only)"));
        }
    }
    for name in processed_files.keys() {
        if !clean_files.contains_key(name) {
            report.unmatched.push(format!("{name} (processed only)"));
        }
    }
    let matched: Vec<&String> = clean_files
        .keys()
        .filter(|n| processed_files.contains_key(*n))
        .collect();
    if matched.is_empty() {
        return Err(Error::Corpus(
            "no filenames shared between clean and processed directories".into(),
        ));
    }

    let cfg = StftConfig::default_16k();
    let mel = MelFilterbank::default_16k();
    for name in matched {
        let clean = load_wav(&clean_files[name])?;
        let processed = load_wav(&processed_files[name])?;
        let n = clean.len().min(processed.len());
        let clean_cut = Waveform {
            samples: clean.samples[..n].to_vec(),
            sample_rate_hz: clean.sample_rate_hz,
        };
        let proc_cut = Waveform {
            samples: processed.samples[..n].to_vec(),
            sample_rate_hz: processed.sample_rate_hz,
        };
        let rate_ok = clean.sample_rate_hz == 16_000 && processed.sample_rate_hz == 16_000;
        let si = if rate_ok {
            si_sdr(&clean_cut, &proc_cut).ok()
        } else {
            None
        };
        let st = if rate_ok {
            stoi(&clean_cut, &proc_cut).ok()
        } else {
            None
        };
        let sm = if rate_ok {
            compute_stmi(&clean_cut, &proc_cut, &cfg, &mel, bank).ok()
        } else {
            None
        };
        report.rows.push(FileMetrics {
            filename: name.clone(),
            si_sdr_db: si,
            stoi: st,
            stmi: sm,
            duration_s: clean.duration_s(),
        });
    }
    Ok(report)
}

/// STMI between two waveforms through the default spectral front-end.
pub fn compute_stmi(
    clean: &Waveform,
    degraded: &Waveform,
    cfg: &StftConfig,
    mel: &MelFilterbank,
    bank: &StrfKernelBank,
) -> Result<f64> {
    let mel_clean = mel_log_power(&stft(clean, cfg)?, mel, crate::spectral::LOG_POWER_FLOOR)?;
    let mel_deg = mel_log_power(&stft(degraded, cfg)?, mel, crate::spectral::LOG_POWER_FLOOR)?;
    stmi_template(&mel_clean, &mel_deg, bank, crate::modulation::DEFAULT_STME_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::sample_random_bank;
    use crate::signal::{mix_at_snr, save_wav, synth_noise, synth_surrogate_speech, NoiseKind,
        WavEncoding};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn si_sdr_scaled_copy_hits_cap() {
        let r = random_wave(0, 4000);
        let e = Waveform::new(r.samples.iter().map(|s| 2.5 * s).collect(), 16_000).unwrap();
        assert_eq!(si_sdr(&r, &e).unwrap(), SI_SDR_CAP_DB);
    }

    #[test]
    fn si_sdr_orthogonal_equal_power_noise_is_zero_db() {
        let r = random_wave(1, 8000);
        let raw = random_wave(2, 8000);
        // remove the projection onto r, then match the power of r
        let rr: f64 = r.samples.iter().map(|v| v * v).sum();
        let nr: f64 = raw.samples.iter().zip(&r.samples).map(|(n, v)| n * v).sum();
        let alpha = nr / rr;
        let orth: Vec<f64> = raw
            .samples
            .iter()
            .zip(&r.samples)
            .map(|(n, v)| n - alpha * v)
            .collect();
        let oo: f64 = orth.iter().map(|v| v * v).sum();
        let gain = (rr / oo).sqrt();
        let est = Waveform::new(
            r.samples
                .iter()
                .zip(&orth)
                .map(|(v, o)| v + gain * o)
                .collect(),
            16_000,
        )
        .unwrap();
        let got = si_sdr(&r, &est).unwrap();
        assert!(got.abs() < 1e-9, "expected 0 dB, got {got}");

        // pure orthogonal estimate: strongly negative
        let est_orth =
            Waveform::new(orth.iter().map(|o| gain * o).collect(), 16_000).unwrap();
        let got = si_sdr(&r, &est_orth).unwrap();
        assert!(got <= -40.0, "orthogonal estimate gave {got}");
    }

    #[test]
    fn si_sdr_invariant_to_estimate_scaling() {
        let r = random_wave(3, 5000);
        let e = random_wave(4, 5000);
        let a = si_sdr(&r, &e).unwrap();
        let scaled = Waveform::new(e.samples.iter().map(|v| 7.3 * v).collect(), 16_000).unwrap();
        let b = si_sdr(&r, &scaled).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn si_sdr_preconditions() {
        let r = random_wave(5, 4000);
        let short = random_wave(6, 100);
        assert!(matches!(
            si_sdr(&short, &short),
            Err(Error::TooShort { .. })
        ));
        let mismatched = random_wave(7, 4001);
        assert!(si_sdr(&r, &mismatched).is_err());
        let zero = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        assert!(matches!(si_sdr(&zero, &r), Err(Error::ZeroPower(_))));
    }

    #[test]
    fn stoi_identity_is_one() {
        let w = synth_surrogate_speech(10, 3.5, 2).unwrap();
        let v = stoi(&w, &w).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "identity stoi {v}");
    }

    #[test]
    fn stoi_separates_noise_from_mixtures_and_identity() {
        // the standard clipping step lets a flat noise envelope track the
        // reference dips, so coherently AM'd surrogates never score near
        // zero against pure noise; the discriminative ordering is what
        // holds
        let w = synth_surrogate_speech(11, 3.5, 3).unwrap();
        let n = synth_noise(NoiseKind::White, 99, 4.5).unwrap();
        let deg = Waveform::new(n.samples[..w.len()].to_vec(), 16_000).unwrap();
        let noise_only = stoi(&w, &deg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mixed, _) = mix_at_snr(&w, &n, 0.0, &mut rng).unwrap();
        let mixed_score = stoi(&w, &mixed).unwrap();
        let identity = stoi(&w, &w).unwrap();
        assert!(
            noise_only < mixed_score && mixed_score < identity,
            "ordering violated: noise {noise_only}, mixed {mixed_score}, identity {identity}"
        );
        assert!(noise_only < 0.85, "noise-only stoi {noise_only}");
    }

    #[test]
    fn stoi_decreases_with_snr() {
        let clean = synth_surrogate_speech(12, 3.5, 1).unwrap();
        let noise = synth_noise(NoiseKind::White, 13, 4.5).unwrap();
        let mut prev = f64::INFINITY;
        for &snr in &[20.0, 0.0, -10.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let (noisy, _) = mix_at_snr(&clean, &noise, snr, &mut rng).unwrap();
            let v = stoi(&clean, &noisy).unwrap();
            assert!(v < prev, "stoi not decreasing at {snr} dB: {v} vs {prev}");
            prev = v;
        }
    }

    #[test]
    fn stoi_preconditions() {
        let short = synth_surrogate_speech(14, 1.0, 0).unwrap();
        assert!(matches!(stoi(&short, &short), Err(Error::TooShort { .. })));
        let silent = Waveform::new(vec![0.0; 60_000], 16_000).unwrap();
        assert!(stoi(&silent, &silent).is_err());
    }

    #[test]
    fn zero_db_corpus_reports_near_zero_si_sdr() {
        let base = std::env::temp_dir().join("stme_metrics_zero_db");
        let clean_dir = base.join("clean");
        let proc_dir = base.join("processed");
        std::fs::create_dir_all(&clean_dir).unwrap();
        std::fs::create_dir_all(&proc_dir).unwrap();
        for i in 0..10u64 {
            let clean = synth_surrogate_speech(40 + i, 1.0, (i % 8) as usize).unwrap();
            let noise = synth_noise(NoiseKind::White, 80 + i, 2.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let (noisy, _) = mix_at_snr(&clean, &noise, 0.0, &mut rng).unwrap();
            let name = format!("m{i}.wav");
            save_wav(&clean, &clean_dir.join(&name), WavEncoding::Float32).unwrap();
            save_wav(&noisy, &proc_dir.join(&name), WavEncoding::Float32).unwrap();
        }
        let bank = sample_random_bank(5, 4, 100.0).unwrap();
        let report = evaluate_corpus(&clean_dir, &proc_dir, &bank).unwrap();
        let (mean_si, n) = report.mean_si_sdr();
        assert_eq!(n, 10);
        // mixing pins SNR, and SI-SDR of clean + orthogonal-ish noise sits
        // near that SNR
        assert!(mean_si.abs() < 0.5, "mean SI-SDR {mean_si} dB");
    }

    #[test]
    fn corpus_identity_hits_caps_and_error_paths() {
        let base = std::env::temp_dir().join("stme_metrics_corpus");
        let clean_dir = base.join("clean");
        let proc_dir = base.join("processed");
        std::fs::create_dir_all(&clean_dir).unwrap();
        std::fs::create_dir_all(&proc_dir).unwrap();
        for i in 0..3 {
            let w = synth_surrogate_speech(20 + i, 3.5, i as usize).unwrap();
            let name = format!("clip{i}.wav");
            save_wav(&w, &clean_dir.join(&name), WavEncoding::Float32).unwrap();
            save_wav(&w, &proc_dir.join(&name), WavEncoding::Float32).unwrap();
        }
        // one unmatched file on each side
        save_wav(
            &synth_surrogate_speech(30, 3.5, 0).unwrap(),
            &clean_dir.join("only_clean.wav"),
            WavEncoding::Float32,
        )
        .unwrap();
        let bank = sample_random_bank(2, 4, 100.0).unwrap();
        let report = evaluate_corpus(&clean_dir, &proc_dir, &bank).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.unmatched.len(), 1);
        for row in &report.rows {
            assert_eq!(row.si_sdr_db.unwrap(), SI_SDR_CAP_DB);
            assert!((row.stoi.unwrap() - 1.0).abs() < 1e-6);
            assert!((row.stmi.unwrap() - 1.0).abs() < 1e-12);
        }
        // aggregates equal recomputation from rows
        let (mean_si, n_si) = report.mean_si_sdr();
        let manual: f64 =
            report.rows.iter().map(|r| r.si_sdr_db.unwrap()).sum::<f64>() / 3.0;
        assert_eq!(n_si, 3);
        assert_eq!(mean_si, manual);
        let csv = report.to_csv();
        assert!(csv.lines().count() == 5); // header + 3 rows + aggregate
        assert!(csv.contains("AGGREGATE_MEAN"));

        // disjoint directories are an error
        let empty = base.join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        assert!(matches!(
            evaluate_corpus(&clean_dir, &empty, &bank),
            Err(Error::Corpus(_))
        ));
    }
}
