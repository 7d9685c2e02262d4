//! Mel integration, Gabor STRF kernels and the modulation-domain measures.
//!
//! A spectro-temporal receptive field is a small time-frequency template
//! selective for one combination of temporal modulation (rate, Hz) and
//! spectral modulation (scale, cycles per Mel channel). Responses come
//! from valid-mode 2-D cross-correlation of a log-Mel spectrogram with
//! each kernel; the STME loss and template STMI are ratios of squared
//! distances between such response stacks.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::xcorr2d_valid_direct;
use crate::spectral::ComplexSpectrogram;
use crate::tensor::Tensor;

pub const DEFAULT_MEL_BANDS: usize = 64;
pub const DEFAULT_BANK_SIZE: usize = 60;
pub const DEFAULT_KERNEL_FRAMES: usize = 30;
pub const DEFAULT_KERNEL_CHANNELS: usize = 20;
pub const DEFAULT_FRAME_RATE_HZ: f64 = 100.0;
pub const DEFAULT_STME_EPS: f64 = 1e-8;
pub const RATE_MAX_HZ: f64 = 50.0;
pub const SCALE_MAX_CPC: f64 = 0.5;

const BANK_FORMAT_VERSION: u32 = 1;

/// Triangular filters on the Mel scale, bands by STFT bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Tensor,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    /// Triangles spanning 0 Hz to Nyquist on the Mel scale.
    pub fn new(bands: usize, bins: usize, sample_rate_hz: u32, n_fft: usize) -> Result<Self> {
        if bands == 0 || bins == 0 {
            return Err(Error::InvalidArgument("empty filterbank".into()));
        }
        let f_hi = sample_rate_hz as f64 / 2.0;
        let mel_hi = hz_to_mel(f_hi);
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(mel_hi * i as f64 / (bands + 1) as f64))
            .collect();
        let mut weights = Tensor::zeros(&[bands, bins]);
        for b in 0..bands {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..bins {
                let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
                let rising = (f - lo) / (mid - lo);
                let falling = (hi - f) / (hi - mid);
                let w = rising.min(falling).max(0.0);
                if w > 0.0 {
                    weights.set(b, k, w);
                }
            }
        }
        Self::from_weights(weights)
    }

    /// Wrap an explicit weight matrix; every band must have positive sum.
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::ShapeMismatch("filterbank weights must be rank 2".into()));
        }
        for b in 0..weights.rows() {
            let row = weights.row(b);
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidArgument(format!("band {b} has negative weight")));
            }
            if row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidArgument(format!("band {b} covers no bin")));
            }
        }
        Ok(MelFilterbank { weights })
    }

    pub fn default_16k() -> Self {
        Self::new(DEFAULT_MEL_BANDS, 257, 16_000, 512).expect("default filterbank")
    }

    pub fn bands(&self) -> usize {
        self.weights.rows()
    }

    pub fn bins(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Bins-by-bands copy, the right operand shape for `power x weights`.
    pub fn weights_transposed(&self) -> Tensor {
        let (b, k) = (self.bands(), self.bins());
        let mut out = Tensor::zeros(&[k, b]);
        for bi in 0..b {
            for ki in 0..k {
                out.set(ki, bi, self.weights.at(bi, ki));
            }
        }
        out
    }
}

/// Log of Mel-integrated power, frames by channels.
#[derive(Clone, Debug)]
pub struct MelLogSpectrogram {
    pub data: Tensor,
    pub frame_rate_hz: f64,
}

impl MelLogSpectrogram {
    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

/// `out[t,b] = ln(max(sum_k w[b,k] |X[t,k]|^2, floor))`
pub fn mel_log_power(
    spec: &ComplexSpectrogram,
    bank: &MelFilterbank,
    floor: f64,
) -> Result<MelLogSpectrogram> {
    if bank.bins() != spec.bins() {
        return Err(Error::ShapeMismatch(format!(
            "filterbank has {} bins, spectrogram has {}",
            bank.bins(),
            spec.bins()
        )));
    }
    assert!(floor > 0.0, "mel_log_power: floor must be positive");
    let (frames, bins, bands) = (spec.frames, spec.bins(), bank.bands());
    let mut power = vec![0.0f64; bins];
    let mut data = Vec::with_capacity(frames * bands);
    for t in 0..frames {
        for (p, c) in power.iter_mut().zip(spec.frame(t)) {
            *p = c.norm_sqr();
        }
        for b in 0..bands {
            let acc: f64 = bank
                .weights()
                .row(b)
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            data.push(acc.max(floor).ln());
        }
    }
    Ok(MelLogSpectrogram {
        data: Tensor::from_vec(&[frames, bands], data),
        frame_rate_hz: spec.config.frame_rate_hz(),
    })
}

/// Same integration as [`mel_log_power`], starting from a frames-by-bins
/// magnitude matrix instead of a complex spectrogram.
pub fn mel_log_power_from_magnitude(
    magnitude: &Tensor,
    bank: &MelFilterbank,
    floor: f64,
    frame_rate_hz: f64,
) -> Result<MelLogSpectrogram> {
    if bank.bins() != magnitude.cols() {
        return Err(Error::ShapeMismatch(format!(
            "filterbank has {} bins, magnitude has {}",
            bank.bins(),
            magnitude.cols()
        )));
    }
    assert!(floor > 0.0, "mel_log_power_from_magnitude: floor must be positive");
    let (frames, bands) = (magnitude.rows(), bank.bands());
    let mut data = Vec::with_capacity(frames * bands);
    for t in 0..frames {
        let mag_row = magnitude.row(t);
        for b in 0..bands {
            let acc: f64 = bank
                .weights()
                .row(b)
                .iter()
                .zip(mag_row)
                .map(|(w, m)| w * m * m)
                .sum();
            data.push(acc.max(floor).ln());
        }
    }
    Ok(MelLogSpectrogram {
        data: Tensor::from_vec(&[frames, bands], data),
        frame_rate_hz,
    })
}

/// Orientation of the spectro-temporal sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepDirection {
    Up,
    Down,
}

/// Parameters of one Gabor STRF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaborStrfParams {
    /// Temporal modulation frequency, Hz; in [0, 50).
    pub rate_hz: f64,
    /// Spectral modulation frequency, cycles per Mel channel; in [0, 0.5).
    pub scale_cpc: f64,
    pub direction: SweepDirection,
    pub phase_rad: f64,
    /// Temporal envelope width, seconds.
    pub t_sigma: f64,
    /// Spectral envelope width, channels.
    pub f_sigma: f64,
}

impl GaborStrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..RATE_MAX_HZ).contains(&self.rate_hz) {
            return Err(Error::InvalidArgument(format!(
                "rate {} Hz outside [0, {RATE_MAX_HZ})",
                self.rate_hz
            )));
        }
        if !(0.0..SCALE_MAX_CPC).contains(&self.scale_cpc) {
            return Err(Error::InvalidArgument(format!(
                "scale {} cpc outside [0, {SCALE_MAX_CPC})",
                self.scale_cpc
            )));
        }
        if self.t_sigma <= 0.0 || self.f_sigma <= 0.0 {
            return Err(Error::InvalidArgument("envelope sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// Kernel geometry shared by a bank: 300 ms of time support and a span of
/// 20 Mel channels at the default 100 Hz frame rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelGeometry {
    pub frames: usize,
    pub channels: usize,
    pub frame_rate_hz: f64,
}

impl Default for KernelGeometry {
    fn default() -> Self {
        KernelGeometry {
            frames: DEFAULT_KERNEL_FRAMES,
            channels: DEFAULT_KERNEL_CHANNELS,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
        }
    }
}

impl KernelGeometry {
    /// Frame count covering 300 ms at the given frame rate, 20 channels.
    pub fn for_frame_rate(frame_rate_hz: f64) -> Self {
        KernelGeometry {
            frames: (0.3 * frame_rate_hz).round().max(1.0) as usize,
            channels: DEFAULT_KERNEL_CHANNELS,
            frame_rate_hz,
        }
    }

    /// Spec sigma defaults: a sixth of each support dimension.
    pub fn default_t_sigma(&self) -> f64 {
        self.frames as f64 / 6.0 / self.frame_rate_hz
    }

    pub fn default_f_sigma(&self) -> f64 {
        self.channels as f64 / 6.0
    }
}

/// One realized kernel: zero-mean, unit-Frobenius-norm matrix plus the
/// parameters it was generated from.
#[derive(Clone, Debug)]
pub struct StrfKernel {
    pub matrix: Tensor,
    pub params: GaborStrfParams,
}

/// `raw[tau,c] = env_t(tau) env_f(c) cos(2 pi rate tau / fr + sgn 2 pi scale c + phase)`
/// with Gaussian envelopes centered on the kernel, then mean-subtracted
/// and Frobenius-normalized.
pub fn make_gabor_kernel(p: &GaborStrfParams, geom: &KernelGeometry) -> Result<StrfKernel> {
    p.validate()?;
    let (tk, ck) = (geom.frames, geom.channels);
    let center_t = (tk as f64 - 1.0) / 2.0;
    let center_f = (ck as f64 - 1.0) / 2.0;
    let t_sigma_frames = p.t_sigma * geom.frame_rate_hz;
    let sgn = match p.direction {
        SweepDirection::Up => 1.0,
        SweepDirection::Down => -1.0,
    };
    let mut data = Vec::with_capacity(tk * ck);
    for tau in 0..tk {
        let dt = tau as f64 - center_t;
        let env_t = (-dt * dt / (2.0 * t_sigma_frames * t_sigma_frames)).exp();
        let omega_t = std::f64::consts::TAU * p.rate_hz * tau as f64 / geom.frame_rate_hz;
        for c in 0..ck {
            let df = c as f64 - center_f;
            let env_f = (-df * df / (2.0 * p.f_sigma * p.f_sigma)).exp();
            let arg = omega_t + sgn * std::f64::consts::TAU * p.scale_cpc * c as f64 + p.phase_rad;
            data.push(env_t * env_f * arg.cos());
        }
    }
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    for v in &mut data {
        *v -= mean;
    }
    let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::NonFinite("gabor kernel normalization"));
    }
    for v in &mut data {
        *v /= norm;
    }
    Ok(StrfKernel {
        matrix: Tensor::from_vec(&[tk, ck], data),
        params: p.clone(),
    })
}

/// Bank of STRF kernels with shared geometry.
#[derive(Clone, Debug)]
pub struct StrfKernelBank {
    pub geometry: KernelGeometry,
    pub kernels: Vec<StrfKernel>,
}

impl StrfKernelBank {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// Uniformly sampled bank per the random-kernel baseline: rate over
/// [0, 50) Hz, scale over [0, 0.5) cycles per channel, random direction
/// and phase, default envelope widths. Deterministic in the seed.
pub fn sample_random_bank(seed: u64, n: usize, frame_rate_hz: f64) -> Result<StrfKernelBank> {
    if n == 0 {
        return Err(Error::InvalidArgument("bank must hold at least one kernel".into()));
    }
    let geom = KernelGeometry::for_frame_rate(frame_rate_hz);
    sample_random_bank_with_geometry(seed, n, geom)
}

pub fn sample_random_bank_with_geometry(
    seed: u64,
    n: usize,
    geom: KernelGeometry,
) -> Result<StrfKernelBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = Vec::with_capacity(n);
    for _ in 0..n {
        let params = GaborStrfParams {
            rate_hz: rng.random_range(0.0..RATE_MAX_HZ),
            scale_cpc: rng.random_range(0.0..SCALE_MAX_CPC),
            direction: if rng.random_bool(0.5) {
                SweepDirection::Up
            } else {
                SweepDirection::Down
            },
            phase_rad: rng.random_range(0.0..std::f64::consts::TAU),
            t_sigma: geom.default_t_sigma(),
            f_sigma: geom.default_f_sigma(),
        };
        kernels.push(make_gabor_kernel(&params, &geom)?);
    }
    Ok(StrfKernelBank {
        geometry: geom,
        kernels,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    version: u32,
    frame_rate_hz: f64,
    kernel_frames: usize,
    kernel_channels: usize,
    kernels: Vec<GaborStrfParams>,
}

/// Write a bank as parameters-only JSON; matrices are regenerated on load.
pub fn save_bank(bank: &StrfKernelBank, path: &Path) -> Result<()> {
    let file = BankFile {
        version: BANK_FORMAT_VERSION,
        frame_rate_hz: bank.geometry.frame_rate_hz,
        kernel_frames: bank.geometry.frames,
        kernel_channels: bank.geometry.channels,
        kernels: bank.kernels.iter().map(|k| k.params.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<StrfKernelBank> {
    let text = std::fs::read_to_string(path)?;
    let file: BankFile = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if file.version != BANK_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: file.version,
            expected: BANK_FORMAT_VERSION,
        });
    }
    if file.kernels.is_empty() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            reason: "bank holds no kernels".into(),
        });
    }
    let geom = KernelGeometry {
        frames: file.kernel_frames,
        channels: file.kernel_channels,
        frame_rate_hz: file.frame_rate_hz,
    };
    let kernels = file
        .kernels
        .iter()
        .map(|p| make_gabor_kernel(p, &geom))
        .collect::<Result<Vec<_>>>()?;
    Ok(StrfKernelBank {
        geometry: geom,
        kernels,
    })
}

/// Response of a log-Mel spectrogram to one kernel.
#[derive(Clone, Debug)]
pub struct ResponseMap {
    pub data: Tensor,
}

/// Valid-mode 2-D cross-correlation, no flipping, no padding:
/// `out[t,c] = sum_{tau,gam} kernel[tau,gam] mel[t+tau, c+gam]`.
pub fn stmr(mel: &MelLogSpectrogram, kernel: &StrfKernel) -> Result<ResponseMap> {
    let (t, b) = (mel.frames(), mel.channels());
    let (tk, ck) = (kernel.matrix.rows(), kernel.matrix.cols());
    if t < tk || b < ck {
        return Err(Error::ShapeMismatch(format!(
            "input {t}x{b} smaller than kernel {tk}x{ck}"
        )));
    }
    Ok(ResponseMap {
        data: xcorr2d_valid_direct(&mel.data, &kernel.matrix),
    })
}

fn check_same_shape(a: &MelLogSpectrogram, b: &MelLogSpectrogram) -> Result<()> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mel spectrograms differ: {:?} vs {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    Ok(())
}

/// Modulation-domain error between two response stacks, flattened without
/// time integration:
/// `sum_i ||R_i(clean) - R_i(enh)||^2 / (sum_i ||R_i(clean)||^2 + eps)`.
pub fn stme(
    mel_clean: &MelLogSpectrogram,
    mel_enh: &MelLogSpectrogram,
    bank: &StrfKernelBank,
    eps: f64,
) -> Result<f64> {
    check_same_shape(mel_clean, mel_enh)?;
    assert!(eps > 0.0, "stme: eps must be positive");
    let mut num = 0.0;
    let mut den = 0.0;
    for kernel in &bank.kernels {
        let rc = stmr(mel_clean, kernel)?;
        let re = stmr(mel_enh, kernel)?;
        for (c, e) in rc.data.data().iter().zip(re.data.data()) {
            let d = c - e;
            num += d * d;
            den += c * c;
        }
    }
    Ok(num / (den + eps))
}

/// Template STMI with responses averaged over the time axis before
/// vectorization; 1 at identity.
pub fn stmi_template(
    mel_clean: &MelLogSpectrogram,
    mel_degraded: &MelLogSpectrogram,
    bank: &StrfKernelBank,
    eps: f64,
) -> Result<f64> {
    check_same_shape(mel_clean, mel_degraded)?;
    assert!(eps > 0.0, "stmi_template: eps must be positive");
    let mut num = 0.0;
    let mut den = 0.0;
    for kernel in &bank.kernels {
        let rc = time_average(&stmr(mel_clean, kernel)?);
        let rd = time_average(&stmr(mel_degraded, kernel)?);
        for (c, d) in rc.iter().zip(&rd) {
            let diff = c - d;
            num += diff * diff;
            den += c * c;
        }
    }
    Ok(1.0 - num / (den + eps))
}

fn time_average(resp: &ResponseMap) -> Vec<f64> {
    let (t, c) = (resp.data.rows(), resp.data.cols());
    let mut out = vec![0.0f64; c];
    for ti in 0..t {
        for (o, v) in out.iter_mut().zip(resp.data.row(ti)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= t as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{stft, StftConfig};
    use rand::RngExt;
    use realfft::num_complex::Complex;

    fn random_mel(seed: u64, frames: usize, channels: usize) -> MelLogSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelLogSpectrogram {
            data: Tensor::from_vec(
                &[frames, channels],
                (0..frames * channels)
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect(),
            ),
            frame_rate_hz: 100.0,
        }
    }

    fn default_params() -> GaborStrfParams {
        let geom = KernelGeometry::default();
        GaborStrfParams {
            rate_hz: 8.0,
            scale_cpc: 0.2,
            direction: SweepDirection::Up,
            phase_rad: 0.7,
            t_sigma: geom.default_t_sigma(),
            f_sigma: geom.default_f_sigma(),
        }
    }

    #[test]
    fn mel_bands_cover_and_order() {
        let fb = MelFilterbank::default_16k();
        assert_eq!(fb.bands(), 64);
        assert_eq!(fb.bins(), 257);
        // band centers must be ordered: compare weighted mean bin per band
        let mut last = -1.0;
        for b in 0..fb.bands() {
            let row = fb.weights().row(b);
            let wsum: f64 = row.iter().sum();
            assert!(wsum > 0.0, "band {b} empty");
            let center: f64 =
                row.iter().enumerate().map(|(k, w)| k as f64 * w).sum::<f64>() / wsum;
            assert!(center > last, "band {b} out of order");
            last = center;
        }
    }

    #[test]
    fn mel_log_power_matches_two_loop_oracle() {
        let cfg = StftConfig::default_16k();
        let w = crate::signal::synth_surrogate_speech(4, 0.3, 1).unwrap();
        let spec = stft(&w, &cfg).unwrap();
        let fb = MelFilterbank::default_16k();
        let got = mel_log_power(&spec, &fb, 1e-10).unwrap();
        for t in [0usize, 5, spec.frames - 1] {
            for b in [0usize, 17, 63] {
                let mut acc = 0.0;
                for k in 0..spec.bins() {
                    acc += fb.weights().at(b, k) * spec.at(t, k).norm_sqr();
                }
                let expect = acc.max(1e-10).ln();
                assert!(
                    (got.data.at(t, b) - expect).abs() < 1e-12,
                    "t={t} b={b}: {} vs {}",
                    got.data.at(t, b),
                    expect
                );
            }
        }
    }

    #[test]
    fn mel_log_power_unit_power_and_zero() {
        let cfg = StftConfig::default_16k();
        let frames = 3;
        let unit = ComplexSpectrogram {
            data: vec![Complex::new(1.0, 0.0); frames * cfg.bins()],
            frames,
            config: cfg.clone(),
        };
        let fb = MelFilterbank::default_16k();
        let out = mel_log_power(&unit, &fb, 1e-10).unwrap();
        for b in 0..fb.bands() {
            let expect = fb.weights().row(b).iter().sum::<f64>().ln();
            assert!((out.data.at(1, b) - expect).abs() < 1e-12);
        }
        let zero = ComplexSpectrogram {
            data: vec![Complex::new(0.0, 0.0); frames * cfg.bins()],
            frames,
            config: cfg,
        };
        let out = mel_log_power(&zero, &fb, 1e-10).unwrap();
        assert!(out.data.data().iter().all(|&v| v == (1e-10f64).ln()));
    }

    #[test]
    fn gabor_kernel_zero_mean_unit_norm() {
        let geom = KernelGeometry::default();
        let k = make_gabor_kernel(&default_params(), &geom).unwrap();
        assert_eq!(k.matrix.shape(), &[30, 20]);
        assert!(k.matrix.sum().abs() < 1e-9, "kernel mean {}", k.matrix.sum());
        assert!((k.matrix.sq_norm() - 1.0).abs() < 1e-9);

        // dc kernel: pure positive envelope before mean removal
        let p = GaborStrfParams {
            rate_hz: 0.0,
            scale_cpc: 0.0,
            phase_rad: 0.0,
            ..default_params()
        };
        let k = make_gabor_kernel(&p, &geom).unwrap();
        assert!(k.matrix.sum().abs() < 1e-9);
    }

    #[test]
    fn up_down_kernels_mirror_across_channels() {
        // with a channel-symmetric envelope, the down kernel at phase
        // phi + 2 pi scale (C-1) is the channel-flip of the up kernel
        let geom = KernelGeometry::default();
        let scale = 0.17;
        let up = make_gabor_kernel(
            &GaborStrfParams {
                scale_cpc: scale,
                direction: SweepDirection::Up,
                ..default_params()
            },
            &geom,
        )
        .unwrap();
        let down_phase = default_params().phase_rad
            + std::f64::consts::TAU * scale * (geom.channels as f64 - 1.0);
        let down = make_gabor_kernel(
            &GaborStrfParams {
                scale_cpc: scale,
                direction: SweepDirection::Down,
                phase_rad: down_phase,
                ..default_params()
            },
            &geom,
        )
        .unwrap();
        for tau in 0..geom.frames {
            for c in 0..geom.channels {
                let a = up.matrix.at(tau, c);
                let b = down.matrix.at(tau, geom.channels - 1 - c);
                assert!((a - b).abs() < 1e-9, "mismatch at ({tau},{c}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let geom = KernelGeometry::default();
        let bad = GaborStrfParams {
            rate_hz: 50.0,
            ..default_params()
        };
        assert!(make_gabor_kernel(&bad, &geom).is_err());
        let bad = GaborStrfParams {
            scale_cpc: -0.1,
            ..default_params()
        };
        assert!(make_gabor_kernel(&bad, &geom).is_err());
    }

    #[test]
    fn random_bank_deterministic_and_valid() {
        let a = sample_random_bank(7, 60, 100.0).unwrap();
        let b = sample_random_bank(7, 60, 100.0).unwrap();
        assert_eq!(a.len(), 60);
        for (ka, kb) in a.kernels.iter().zip(&b.kernels) {
            assert_eq!(ka.params, kb.params);
            assert_eq!(ka.matrix.data(), kb.matrix.data());
            ka.params.validate().unwrap();
        }
        let c = sample_random_bank(8, 60, 100.0).unwrap();
        assert_ne!(a.kernels[0].params, c.kernels[0].params);
    }

    #[test]
    fn bank_roundtrip_and_schema_errors() {
        let dir = std::env::temp_dir().join("stme_modulation_bank");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.json");
        let bank = sample_random_bank(3, 5, 100.0).unwrap();
        save_bank(&bank, &path).unwrap();
        let loaded = load_bank(&path).unwrap();
        assert_eq!(loaded.geometry, bank.geometry);
        for (a, b) in bank.kernels.iter().zip(&loaded.kernels) {
            assert_eq!(a.params, b.params);
            // matrices regenerated from parameters must match exactly
            assert_eq!(a.matrix.data(), b.matrix.data());
        }

        let no_version = path.with_file_name("no_version.json");
        std::fs::write(
            &no_version,
            r#"{"frame_rate_hz":100.0,"kernel_frames":30,"kernel_channels":20,"kernels":[]}"#,
        )
        .unwrap();
        assert!(matches!(load_bank(&no_version), Err(Error::Schema { .. })));

        let bad_version = path.with_file_name("bad_version.json");
        std::fs::write(
            &bad_version,
            r#"{"version":9,"frame_rate_hz":100.0,"kernel_frames":30,"kernel_channels":20,"kernels":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_bank(&bad_version),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn stmr_rejects_constant_input() {
        let geom = KernelGeometry::default();
        let kernel = make_gabor_kernel(&default_params(), &geom).unwrap();
        let mel = MelLogSpectrogram {
            data: Tensor::filled(&[40, 25], 3.7),
            frame_rate_hz: 100.0,
        };
        let resp = stmr(&mel, &kernel).unwrap();
        assert_eq!(resp.data.shape(), &[11, 6]);
        for &v in resp.data.data() {
            assert!(v.abs() < 1e-7 * 3.7, "dc leak {v}");
        }
    }

    #[test]
    fn stmr_matches_brute_force_oracle() {
        let geom = KernelGeometry::default();
        let kernel = make_gabor_kernel(&default_params(), &geom).unwrap();
        let mel = random_mel(1, 40, 25);
        let resp = stmr(&mel, &kernel).unwrap();
        assert_eq!(resp.data.shape(), &[11, 6]);
        for t in 0..11 {
            for c in 0..6 {
                let mut acc = 0.0;
                for tau in 0..30 {
                    for gam in 0..20 {
                        acc += kernel.matrix.at(tau, gam) * mel.data.at(t + tau, c + gam);
                    }
                }
                assert!(
                    (resp.data.at(t, c) - acc).abs() < 1e-12,
                    "({t},{c}): {} vs {}",
                    resp.data.at(t, c),
                    acc
                );
            }
        }
    }

    #[test]
    fn stmr_matched_filter_peaks_at_embedded_offset() {
        let geom = KernelGeometry::default();
        let kernel = make_gabor_kernel(&default_params(), &geom).unwrap();
        let mut mel = random_mel(5, 45, 30);
        // scale down the background and embed the kernel at a known offset
        let (t0, c0) = (9, 4);
        for v in mel.data.data_mut() {
            *v *= 0.05;
        }
        for tau in 0..30 {
            for gam in 0..20 {
                let v = mel.data.at(t0 + tau, c0 + gam) + kernel.matrix.at(tau, gam);
                mel.data.set(t0 + tau, c0 + gam, v);
            }
        }
        let resp = stmr(&mel, &kernel).unwrap();
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for t in 0..resp.data.rows() {
            for c in 0..resp.data.cols() {
                if resp.data.at(t, c) > best_v {
                    best_v = resp.data.at(t, c);
                    best = (t, c);
                }
            }
        }
        assert_eq!(best, (t0, c0));
    }

    #[test]
    fn stmr_too_small_input_rejected() {
        let geom = KernelGeometry::default();
        let kernel = make_gabor_kernel(&default_params(), &geom).unwrap();
        let mel = random_mel(0, 10, 10);
        assert!(stmr(&mel, &kernel).is_err());
    }

    #[test]
    fn stmr_is_linear_and_shift_invariant() {
        let geom = KernelGeometry::default();
        let kernel = make_gabor_kernel(&default_params(), &geom).unwrap();
        let m1 = random_mel(20, 40, 25);
        let m2 = random_mel(21, 40, 25);
        let (a, b) = (1.7, -0.4);
        let combo = MelLogSpectrogram {
            data: Tensor::from_vec(
                &[40, 25],
                m1.data
                    .data()
                    .iter()
                    .zip(m2.data.data())
                    .map(|(x, y)| a * x + b * y)
                    .collect(),
            ),
            frame_rate_hz: 100.0,
        };
        let r1 = stmr(&m1, &kernel).unwrap();
        let r2 = stmr(&m2, &kernel).unwrap();
        let rc = stmr(&combo, &kernel).unwrap();
        for i in 0..rc.data.numel() {
            let expect = a * r1.data.data()[i] + b * r2.data.data()[i];
            assert!((rc.data.data()[i] - expect).abs() < 1e-9);
        }

        let c = 11.3;
        let shifted = MelLogSpectrogram {
            data: m1.data.map(|v| v + c),
            frame_rate_hz: 100.0,
        };
        let rs = stmr(&shifted, &kernel).unwrap();
        for (x, y) in rs.data.data().iter().zip(r1.data.data()) {
            assert!((x - y).abs() < 1e-7 * c.abs());
        }
    }

    #[test]
    fn stme_identity_and_silence_guard() {
        let bank = sample_random_bank(2, 3, 100.0).unwrap();
        let mel = random_mel(30, 40, 25);
        assert_eq!(stme(&mel, &mel, &bank, 1e-8).unwrap(), 0.0);

        let silent = MelLogSpectrogram {
            data: Tensor::filled(&[40, 25], (1e-10f64).ln()),
            frame_rate_hz: 100.0,
        };
        let other = random_mel(31, 40, 25);
        let v = stme(&silent, &other, &bank, 1e-8).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn stme_matches_composed_oracle() {
        let bank = sample_random_bank(40, 3, 100.0).unwrap();
        let ma = random_mel(32, 40, 25);
        let mb = random_mel(33, 40, 25);
        let got = stme(&ma, &mb, &bank, 1e-8).unwrap();

        // independent assembly from the brute-force response oracle
        let mut num = 0.0;
        let mut den = 0.0;
        for kernel in &bank.kernels {
            for t in 0..11 {
                for c in 0..6 {
                    let mut ra = 0.0;
                    let mut rb = 0.0;
                    for tau in 0..30 {
                        for gam in 0..20 {
                            ra += kernel.matrix.at(tau, gam) * ma.data.at(t + tau, c + gam);
                            rb += kernel.matrix.at(tau, gam) * mb.data.at(t + tau, c + gam);
                        }
                    }
                    num += (ra - rb) * (ra - rb);
                    den += ra * ra;
                }
            }
        }
        let expect = num / (den + 1e-8);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn stme_invariant_to_global_log_offset_of_both() {
        // a global power scale adds a constant in the log-Mel domain
        let bank = sample_random_bank(41, 4, 100.0).unwrap();
        let ma = random_mel(35, 40, 25);
        let mb = random_mel(36, 40, 25);
        let base = stme(&ma, &mb, &bank, 1e-8).unwrap();
        let c = 2.5;
        let ma_s = MelLogSpectrogram {
            data: ma.data.map(|v| v + c),
            frame_rate_hz: 100.0,
        };
        let mb_s = MelLogSpectrogram {
            data: mb.data.map(|v| v + c),
            frame_rate_hz: 100.0,
        };
        let shifted = stme(&ma_s, &mb_s, &bank, 1e-8).unwrap();
        assert!((base - shifted).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn stmi_identity_and_bounds() {
        let bank = sample_random_bank(50, 3, 100.0).unwrap();
        let mel = random_mel(60, 40, 25);
        assert_eq!(stmi_template(&mel, &mel, &bank, 1e-8).unwrap(), 1.0);
        let other = random_mel(61, 40, 25);
        let v = stmi_template(&mel, &other, &bank, 1e-8).unwrap();
        assert!(v <= 1.0);
    }

    #[test]
    fn stmi_of_unrelated_noise_is_low() {
        let bank = sample_random_bank(52, 60, 100.0).unwrap();
        let cfg = StftConfig::default_16k();
        let fb = MelFilterbank::default_16k();
        let speech = crate::signal::synth_surrogate_speech(8, 2.0, 3).unwrap();
        let noise = crate::signal::synth_noise(crate::signal::NoiseKind::White, 9, 2.0).unwrap();
        let mel_speech = mel_log_power(&stft(&speech, &cfg).unwrap(), &fb, 1e-10).unwrap();
        let mel_noise = mel_log_power(&stft(&noise, &cfg).unwrap(), &fb, 1e-10).unwrap();
        let v = stmi_template(&mel_speech, &mel_noise, &bank, 1e-8).unwrap();
        assert!(v < 0.5, "unrelated-noise STMI {v}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let bank = sample_random_bank(51, 2, 100.0).unwrap();
        let a = random_mel(70, 40, 25);
        let b = random_mel(71, 41, 25);
        assert!(stme(&a, &b, &bank, 1e-8).is_err());
        assert!(stmi_template(&a, &b, &bank, 1e-8).is_err());
    }
}
