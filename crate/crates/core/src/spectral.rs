//! STFT analysis/synthesis and the normalized log-power-spectrum feature.
//!
//! Frames are taken without centering or edge padding so that the causal
//! streaming path sees exactly the same data as batch analysis; edge
//! frames are simply fewer. Synthesis is weighted overlap-add with the
//! same window, normalized per sample by the accumulated squared window.

use realfft::num_complex::Complex;
use realfft::RealFftPlanner;

use crate::error::{Error, Result};
use crate::signal::Waveform;
use crate::tensor::Tensor;

pub const DEFAULT_WIN_LEN: usize = 320;
pub const DEFAULT_HOP: usize = 160;
pub const DEFAULT_N_FFT: usize = 512;
pub const LOG_POWER_FLOOR: f64 = 1e-10;
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_NORMALIZER_DECAY: f64 = 0.996;

/// Analysis parameters: 20 ms periodic Hamming window, 50% overlap,
/// 512-point transform at 16 kHz by default.
#[derive(Clone, Debug, PartialEq)]
pub struct StftConfig {
    pub sample_rate_hz: u32,
    pub win_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    window: Vec<f64>,
}

impl StftConfig {
    pub fn new(sample_rate_hz: u32, win_len: usize, hop: usize, n_fft: usize) -> Result<Self> {
        if hop * 2 != win_len {
            return Err(Error::InvalidArgument(format!(
                "hop must be win_len/2 for 50% overlap (got win {win_len}, hop {hop})"
            )));
        }
        if n_fft < win_len {
            return Err(Error::InvalidArgument(format!(
                "n_fft {n_fft} must be at least win_len {win_len}"
            )));
        }
        // periodic Hamming: constant overlap sum of 1.08 at 50% overlap
        let window = (0..win_len)
            .map(|n| 0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / win_len as f64).cos())
            .collect();
        Ok(StftConfig {
            sample_rate_hz,
            win_len,
            hop,
            n_fft,
            window,
        })
    }

    pub fn default_16k() -> Self {
        Self::new(16_000, DEFAULT_WIN_LEN, DEFAULT_HOP, DEFAULT_N_FFT).expect("default config")
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop as f64
    }

    /// Number of full frames available in a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win_len {
            0
        } else {
            (len - self.win_len) / self.hop + 1
        }
    }
}

/// One-sided STFT, frames by bins, row-major.
#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    pub data: Vec<Complex<f64>>,
    pub frames: usize,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    pub fn at(&self, t: usize, k: usize) -> Complex<f64> {
        self.data[t * self.bins() + k]
    }

    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        let k = self.bins();
        &self.data[t * k..(t + 1) * k]
    }

    /// Magnitudes as a frames-by-bins tensor.
    pub fn magnitude(&self) -> Tensor {
        Tensor::from_vec(
            &[self.frames, self.bins()],
            self.data.iter().map(|c| c.norm()).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Forward STFT. Frame `t` covers samples `[t*hop, t*hop + win_len)`,
/// Hamming-windowed and zero-padded to `n_fft`.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    if w.sample_rate_hz != cfg.sample_rate_hz {
        return Err(Error::RateMismatch {
            left: w.sample_rate_hz,
            right: cfg.sample_rate_hz,
        });
    }
    if w.len() < cfg.win_len {
        return Err(Error::TooShort {
            len: w.len(),
            win_len: cfg.win_len,
        });
    }
    let frames = cfg.frame_count(w.len());
    let bins = cfg.bins();
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut scratch = fft.make_scratch_vec();
    let mut buf = vec![0.0f64; cfg.n_fft];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * cfg.hop;
        for (b, (s, wn)) in buf
            .iter_mut()
            .zip(w.samples[start..start + cfg.win_len].iter().zip(&cfg.window))
        {
            *b = s * wn;
        }
        buf[cfg.win_len..].fill(0.0);
        let mut spec = fft.make_output_vec();
        fft.process_with_scratch(&mut buf, &mut spec, &mut scratch)
            .expect("buffer sizes fixed by plan");
        data.extend_from_slice(&spec);
    }
    Ok(ComplexSpectrogram {
        data,
        frames,
        config: cfg.clone(),
    })
}

/// Inverse STFT by weighted overlap-add with the analysis window,
/// normalized per sample by the accumulated squared window. Output length
/// is `(frames-1)*hop + win_len`.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    if !spec.is_finite() {
        return Err(Error::NonFinite("spectrogram"));
    }
    let cfg = &spec.config;
    let out_len = if spec.frames == 0 {
        0
    } else {
        (spec.frames - 1) * cfg.hop + cfg.win_len
    };
    let mut out = vec![0.0f64; out_len];
    let mut wsum = vec![0.0f64; out_len];
    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(cfg.n_fft);
    let mut scratch = ifft.make_scratch_vec();
    let inv_n = 1.0 / cfg.n_fft as f64;
    for t in 0..spec.frames {
        let mut frame = spec.frame(t).to_vec();
        let mut time = ifft.make_output_vec();
        ifft.process_with_scratch(&mut frame, &mut time, &mut scratch)
            .expect("buffer sizes fixed by plan");
        let start = t * cfg.hop;
        for n in 0..cfg.win_len {
            let wn = cfg.window[n];
            out[start + n] += wn * time[n] * inv_n;
            wsum[start + n] += wn * wn;
        }
    }
    for (o, ws) in out.iter_mut().zip(&wsum) {
        if *ws > 1e-12 {
            *o /= ws;
        }
    }
    Waveform::new(out, cfg.sample_rate_hz)
}

/// Natural log of the power spectrum, floored: `ln(max(|X|^2, floor))`.
pub fn log_power(spec: &ComplexSpectrogram, floor: f64) -> Tensor {
    assert!(floor > 0.0, "log_power: floor must be positive");
    Tensor::from_vec(
        &[spec.frames, spec.bins()],
        spec.data
            .iter()
            .map(|c| c.norm_sqr().max(floor).ln())
            .collect(),
    )
}

/// Per-bin exponential moving estimates of mean and variance of the LPS.
/// Strictly causal: the state evolves frame by frame, so streaming and
/// batch execution produce identical outputs.
#[derive(Clone, Debug)]
pub struct NormalizerState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub decay: f64,
    pub frames_seen: u64,
}

impl NormalizerState {
    pub fn new(bins: usize, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!(
                "normalizer decay must be in [0,1), got {decay}"
            )));
        }
        Ok(NormalizerState {
            mean: vec![0.0; bins],
            var: vec![1.0; bins],
            decay,
            frames_seen: 0,
        })
    }

    pub fn default_for(bins: usize) -> Self {
        Self::new(bins, DEFAULT_NORMALIZER_DECAY).expect("default decay valid")
    }
}

/// Frequency-dependent online normalization of a frames-by-bins matrix.
/// Per frame and bin: the running mean is updated first, then the running
/// variance against the updated mean, then the output is
/// `(x - mean) / sqrt(max(var, floor))`.
pub fn online_normalize(lps: &Tensor, state: &mut NormalizerState) -> Tensor {
    let (frames, bins) = (lps.rows(), lps.cols());
    assert_eq!(
        bins,
        state.mean.len(),
        "online_normalize: bin count {} does not match state {}",
        bins,
        state.mean.len()
    );
    let d = state.decay;
    let mut out = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let row = lps.row(t);
        for k in 0..bins {
            let x = row[k];
            let mean = d * state.mean[k] + (1.0 - d) * x;
            let dev = x - mean;
            let var = (d * state.var[k] + (1.0 - d) * dev * dev).max(VARIANCE_FLOOR);
            state.mean[k] = mean;
            state.var[k] = var;
            out.push(dev / var.sqrt());
        }
        state.frames_seen += 1;
    }
    Tensor::from_vec(&[frames, bins], out)
}
