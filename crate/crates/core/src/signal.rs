//! Audio I/O, synthetic test signals and SNR-controlled additive mixing.

use std::path::Path;

use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};

/// Default pipeline rate; downstream modules enforce it where required.
pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 16_000;

/// Fixed table of surrogate-speech source classes: (fundamental Hz,
/// amplitude-modulation rate Hz). Eight classes spanning 90-220 Hz and
/// 2-8 Hz respectively.
pub const SURROGATE_CLASSES: [(f64, f64); 8] = [
    (90.0, 2.0),
    (102.0, 2.9),
    (116.0, 3.7),
    (132.0, 4.6),
    (150.0, 5.4),
    (170.0, 6.3),
    (194.0, 7.1),
    (220.0, 8.0),
];

/// Mono waveform: finite samples, nominal range [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean square of the samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    fn peak_normalize(&mut self, peak: f64) {
        let max = self
            .samples
            .iter()
            .fold(0.0f64, |acc, &s| acc.max(s.abs()));
        if max > 0.0 {
            let g = peak / max;
            for s in &mut self.samples {
                *s *= g;
            }
        }
    }
}

/// Sample encoding for [`save_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Read a WAV file. Multichannel input is averaged down to mono, PCM16
/// samples are scaled by 1/32768 and the sample rate is preserved.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(msg) => Error::MalformedWav {
            path: path.to_path_buf(),
            reason: msg.to_string(),
        },
        other => Error::MalformedWav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedWav {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedWav {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedWav {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
        (fmt, bits) => {
            return Err(Error::UnsupportedWav {
                path: path.to_path_buf(),
                reason: format!("{fmt:?} at {bits} bits (expected PCM16 or float32)"),
            })
        }
    };

    let frames = interleaved.len() / channels;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let frame = &interleaved[f * channels..(f + 1) * channels];
        samples.push(frame.iter().sum::<f64>() / channels as f64);
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Write a WAV file. Under PCM16, out-of-range samples are clipped and the
/// clip count is returned (always 0 for float32).
pub fn save_wav(w: &Waveform, path: &Path, encoding: WavEncoding) -> Result<usize> {
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("waveform samples"));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::MalformedWav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let mut clipped = 0usize;
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in &w.samples {
                let scaled = (s * 32768.0).round();
                let q = if scaled > 32767.0 {
                    clipped += 1;
                    32767
                } else if scaled < -32768.0 {
                    clipped += 1;
                    -32768
                } else {
                    scaled as i16
                };
                writer.write_sample(q).map_err(wav_write_err)?;
            }
        }
        WavEncoding::Float32 => {
            for &s in &w.samples {
                writer.write_sample(s as f32).map_err(wav_write_err)?;
            }
        }
    }
    writer.finalize().map_err(wav_write_err)?;
    Ok(clipped)
}

fn wav_write_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::InvalidArgument(other.to_string()),
    }
}

/// Scale `noise` so that `clean + alpha * noise` sits at `snr_db`, cropping
/// the noise at a seeded uniformly random offset. Returns the mixture and
/// the scaled noise so that `noisy - scaled_noise == clean` exactly.
pub fn mix_at_snr(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<(Waveform, Waveform)> {
    mix_at_snr_with_offset(clean, noise, snr_db, rng).map(|(a, b, _)| (a, b))
}

/// [`mix_at_snr`] plus the noise crop offset, for manifests.
pub fn mix_at_snr_with_offset(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<(Waveform, Waveform, usize)> {
    if clean.sample_rate_hz != noise.sample_rate_hz {
        return Err(Error::RateMismatch {
            left: clean.sample_rate_hz,
            right: noise.sample_rate_hz,
        });
    }
    if noise.len() < clean.len() {
        return Err(Error::NoiseTooShort {
            noise_len: noise.len(),
            clean_len: clean.len(),
        });
    }
    let p_clean = clean.power();
    if p_clean <= 0.0 {
        return Err(Error::ZeroPower("clean"));
    }
    let max_offset = noise.len() - clean.len();
    let offset = if max_offset == 0 {
        0
    } else {
        rng.random_range(0..=max_offset)
    };
    let segment = &noise.samples[offset..offset + clean.len()];
    let p_noise = segment.iter().map(|s| s * s).sum::<f64>() / segment.len() as f64;
    if p_noise <= 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    let alpha = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = segment.iter().map(|s| s * alpha).collect();
    let noisy: Vec<f64> = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(c, n)| c + n)
        .collect();
    Ok((
        Waveform {
            samples: noisy,
            sample_rate_hz: clean.sample_rate_hz,
        },
        Waveform {
            samples: scaled,
            sample_rate_hz: clean.sample_rate_hz,
        },
        offset,
    ))
}

/// Deterministic harmonic complex standing in for speech: per-class
/// fundamental and AM rate from [`SURROGATE_CLASSES`], seeded harmonic
/// phases, a slow formant-like spectral tilt sweep, peak-normalized to 0.5.
pub fn synth_surrogate_speech(seed: u64, duration_s: f64, class_id: usize) -> Result<Waveform> {
    if duration_s <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let (f0_base, am_rate) = SURROGATE_CLASSES[class_id % SURROGATE_CLASSES.len()];
    let fs = DEFAULT_SAMPLE_RATE_HZ as f64;
    let n = (duration_s * fs).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class_id as u64) << 32));
    let f0 = f0_base * (1.0 + 0.01 * rng.random_range(-1.0..1.0));
    let n_harm = ((7600.0 / f0).floor() as usize).min(40).max(1);
    let phases: Vec<f64> = (0..n_harm)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let am_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        // slow sweep of the spectral tilt exponent in [0.5, 1.5]
        let tilt = 1.0 + 0.5 * (std::f64::consts::TAU * 0.25 * t + tilt_phase).sin();
        let mut v = 0.0;
        for (h, phase) in phases.iter().enumerate() {
            let k = (h + 1) as f64;
            let amp = k.powf(-tilt);
            v += amp * (std::f64::consts::TAU * k * f0 * t + phase).sin();
        }
        let am = 1.0 + 0.8 * (std::f64::consts::TAU * am_rate * t + am_phase).sin();
        samples.push(v * am);
    }
    let mut w = Waveform {
        samples,
        sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
    };
    w.peak_normalize(0.5);
    Ok(w)
}

/// Noise color for [`synth_noise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// -3 dB/octave spectral shaping of white noise.
    Pink,
    /// White noise with 4 Hz sinusoidal amplitude modulation.
    Modulated,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "modulated" => Ok(NoiseKind::Modulated),
            other => Err(Error::InvalidArgument(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Deterministic-in-seed noise at 16 kHz, peak-normalized to 0.5.
pub fn synth_noise(kind: NoiseKind, seed: u64, duration_s: f64) -> Result<Waveform> {
    if duration_s <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let fs = DEFAULT_SAMPLE_RATE_HZ as f64;
    let n = (duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    // Gaussian white noise via Box-Muller.
    let mut white = Vec::with_capacity(n + 1);
    while white.len() < n {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        white.push(r * (std::f64::consts::TAU * u2).cos());
        white.push(r * (std::f64::consts::TAU * u2).sin());
    }
    white.truncate(n);

    let samples = match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => pink_shape(&white),
        NoiseKind::Modulated => {
            let mut am_phase_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
            let phase = am_phase_rng.random_range(0.0..std::f64::consts::TAU);
            white
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let t = i as f64 / fs;
                    w * (1.0 + 0.8 * (std::f64::consts::TAU * 4.0 * t + phase).sin())
                })
                .collect()
        }
    };
    let mut w = Waveform {
        samples,
        sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
    };
    w.peak_normalize(0.5);
    Ok(w)
}

/// Exact 1/f power shaping in the frequency domain (-3 dB per octave).
fn pink_shape(white: &[f64]) -> Vec<f64> {
    let n = white.len();
    if n < 2 {
        return white.to_vec();
    }
    // realfft wants an even length; shape on n rounded down and carry the
    // last sample through unshaped if n is odd (durations used in practice
    // give even counts).
    let even = n - (n % 2);
    let mut planner = realfft::RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(even);
    let ifft = planner.plan_fft_inverse(even);
    let mut buf = white[..even].to_vec();
    let mut spec = fft.make_output_vec();
    fft.process(&mut buf, &mut spec).expect("fft length fixed");
    spec[0] = realfft::num_complex::Complex::new(0.0, 0.0);
    for (k, s) in spec.iter_mut().enumerate().skip(1) {
        *s = *s / (k as f64).sqrt();
    }
    let mut out = vec![0.0; even];
    ifft.process(&mut spec, &mut out).expect("fft length fixed");
    let scale = 1.0 / even as f64;
    let mut shaped: Vec<f64> = out.into_iter().map(|v| v * scale).collect();
    if even < n {
        shaped.push(*white.last().unwrap());
    }
    shaped
}
