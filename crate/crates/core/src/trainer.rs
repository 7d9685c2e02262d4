//! Loss assembly, Adam optimization, segment sampling, the training loop
//! and the kernel-tuning surrogate task.
//!
//! Four loss modes mirror the ablation arms: magnitude-domain error alone
//! (TFE), modulation-domain error alone (STME), their weighted sum with a
//! provided kernel bank, and the weighted sum with a randomly sampled
//! bank. The whole loss sits on the autodiff tape, so one backward pass
//! yields gradients for every network parameter.

use std::path::PathBuf;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::{
    apply_gain_complex, features_for, forward, forward_on_tape, leaf_params, EnhancerArch,
    EnhancerParams, GruState,
};
use crate::error::{Error, Result};
use crate::grad::{finite_diff_check, finite_diff_check_filtered, NodeId, Precision, Tape};
use crate::metrics::si_sdr;
use crate::modulation::{
    make_gabor_kernel, mel_log_power_from_magnitude, sample_random_bank_with_geometry,
    stmi_template, GaborStrfParams, KernelGeometry, MelFilterbank, MelLogSpectrogram,
    StrfKernelBank, SweepDirection, DEFAULT_STME_EPS,
};
use crate::signal::{mix_at_snr, synth_noise, synth_surrogate_speech, NoiseKind, Waveform};
use crate::spectral::{stft, StftConfig, LOG_POWER_FLOOR};
use crate::tensor::Tensor;

/// Which terms drive the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "tfe")]
    Tfe,
    #[serde(rename = "stme")]
    Stme,
    #[serde(rename = "tfe+stme")]
    TfePlusStme,
    #[serde(rename = "tfe+stme-random")]
    TfePlusRandomStme,
}

impl LossMode {
    pub fn uses_stme(&self) -> bool {
        !matches!(self, LossMode::Tfe)
    }

    /// Modes that require a caller-provided bank.
    pub fn needs_bank(&self) -> bool {
        matches!(self, LossMode::Stme | LossMode::TfePlusStme)
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfe" => Ok(LossMode::Tfe),
            "stme" => Ok(LossMode::Stme),
            "tfe+stme" => Ok(LossMode::TfePlusStme),
            "tfe+stme-random" => Ok(LossMode::TfePlusRandomStme),
            other => Err(Error::InvalidArgument(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub steps: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Weight of the STME term in the combined losses.
    pub stme_weight: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub snr_range_db: (f64, f64),
    pub arch: EnhancerArch,
    pub precision: Precision,
    /// Kernels in the bank sampled for the random-STME mode.
    pub random_bank_size: usize,
    pub eval_every: usize,
    pub validation_segments: usize,
    /// 0 disables periodic checkpoints; the final model is always returned.
    pub checkpoint_every: usize,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 64,
            segment_seconds: 1.0,
            steps: 1000,
            seed: 0,
            loss_mode: LossMode::Tfe,
            stme_weight: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            snr_range_db: (-6.0, 6.0),
            arch: EnhancerArch::desk(),
            precision: Precision::Single,
            random_bank_size: 60,
            eval_every: 500,
            validation_segments: 4,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Small testing profile: desk architecture, batch of 8.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.stme_weight < 0.0 {
            return Err(Error::InvalidArgument("stme weight must be nonnegative".into()));
        }
        if self.segment_seconds <= 0.0 {
            return Err(Error::InvalidArgument("segment length must be positive".into()));
        }
        self.arch.validate()
    }
}

/// One optimization step as logged to the history CSV.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub tfe: f64,
    pub stme: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Validation metrics at a checkpointed step.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub step: usize,
    pub si_sdr_db: f64,
    pub stmi: f64,
    pub stme: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub rejected_steps: usize,
}

impl TrainHistory {
    /// CSV rows: step, total, tfe, stme, grad_norm, wall_ms.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,total,tfe,stme,grad_norm,wall_ms\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.step,
                fmt6(r.total),
                fmt6(r.tfe),
                fmt6(r.stme),
                fmt6(r.grad_norm),
                r.wall_ms
            ));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from("step,val_si_sdr_db,val_stmi,val_stme\n");
        for r in &self.evals {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step,
                fmt6(r.si_sdr_db),
                fmt6(r.stmi),
                fmt6(r.stme)
            ));
        }
        out
    }
}

pub(crate) fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.5e}")
    } else {
        "NA".to_string()
    }
}

/// Mean squared error between clean and enhanced magnitudes.
pub fn tfe_loss(clean_mag: &Tensor, enh_mag: &Tensor) -> Result<f64> {
    if clean_mag.shape() != enh_mag.shape() {
        return Err(Error::ShapeMismatch(format!(
            "magnitude shapes differ: {:?} vs {:?}",
            clean_mag.shape(),
            enh_mag.shape()
        )));
    }
    let n = clean_mag.numel() as f64;
    Ok(clean_mag
        .data()
        .iter()
        .zip(enh_mag.data())
        .map(|(c, e)| (c - e) * (c - e))
        .sum::<f64>()
        / n)
}

/// Everything constant about the loss for one segment: the clean
/// magnitude, its mel responses per kernel and the normalizing
/// denominator. Only the enhanced branch varies on the tape.
pub struct LossContext {
    pub clean_mag: Tensor,
    pub mel_weights_t: Tensor,
    pub kernel_mats: Vec<Tensor>,
    pub clean_responses: Vec<Tensor>,
    pub response_den: f64,
    pub lambda: f64,
    pub mode: LossMode,
}

impl LossContext {
    /// Precompute the constant branch. `bank` may be `None` only for the
    /// TFE mode.
    pub fn build(
        clean_mag: Tensor,
        mel: &MelFilterbank,
        bank: Option<&StrfKernelBank>,
        lambda: f64,
        mode: LossMode,
    ) -> Result<Self> {
        let mut kernel_mats = Vec::new();
        let mut clean_responses = Vec::new();
        let mut den = 0.0;
        if mode.uses_stme() {
            let bank = bank.ok_or_else(|| {
                Error::InvalidArgument(format!("loss mode {mode:?} requires a kernel bank"))
            })?;
            let mel_clean =
                mel_log_power_from_magnitude(&clean_mag, mel, LOG_POWER_FLOOR, 100.0)?;
            for kernel in &bank.kernels {
                let resp = crate::grad::xcorr2d_valid_direct(&mel_clean.data, &kernel.matrix);
                den += resp.sq_norm();
                kernel_mats.push(kernel.matrix.clone());
                clean_responses.push(resp);
            }
        }
        Ok(LossContext {
            clean_mag,
            mel_weights_t: mel.weights_transposed(),
            kernel_mats,
            clean_responses,
            response_den: den,
            lambda,
            mode,
        })
    }
}

/// Loss nodes returned by [`combined_loss_on_tape`].
pub struct LossNodes {
    pub total: NodeId,
    pub tfe: Option<NodeId>,
    pub stme: Option<NodeId>,
}

/// Assemble the selected loss on the tape from the enhanced-magnitude
/// node. The clean branch enters as constants.
pub fn combined_loss_on_tape(tape: &mut Tape, ctx: &LossContext, enh_mag: NodeId) -> LossNodes {
    let tfe = if ctx.mode != LossMode::Stme {
        let clean = tape.leaf_const(ctx.clean_mag.clone());
        let diff = tape.sub(clean, enh_mag);
        let sq = tape.square(diff);
        Some(tape.mean(sq))
    } else {
        None
    };
    let stme = if ctx.mode.uses_stme() {
        let power = tape.square(enh_mag);
        let weights = tape.leaf_const(ctx.mel_weights_t.clone());
        let melpow = tape.matmul(power, weights);
        let mel_log = tape.log_guarded(melpow, LOG_POWER_FLOOR);
        let mut num: Option<NodeId> = None;
        for (mat, clean_resp) in ctx.kernel_mats.iter().zip(&ctx.clean_responses) {
            let k = tape.leaf_const(mat.clone());
            let resp = tape.xcorr2d_valid(mel_log, k);
            let rc = tape.leaf_const(clean_resp.clone());
            let diff = tape.sub(rc, resp);
            let sq = tape.square(diff);
            let s = tape.sum(sq);
            num = Some(match num {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
        let num = num.expect("stme mode requires at least one kernel");
        Some(tape.scale(num, 1.0 / (ctx.response_den + DEFAULT_STME_EPS)))
    } else {
        None
    };
    let total = match (tfe, stme) {
        (Some(t), Some(s)) => {
            let ws = tape.scale(s, ctx.lambda);
            tape.add(t, ws)
        }
        (Some(t), None) => t,
        (None, Some(s)) => s,
        (None, None) => unreachable!("loss mode produces no term"),
    };
    LossNodes { total, tfe, stme }
}

/// Value-level combined loss for a clean/enhanced magnitude pair:
/// `(total, tfe_term, stme_term)`.
pub fn combined_loss(
    clean_mag: &Tensor,
    enh_mag: &Tensor,
    mel: &MelFilterbank,
    bank: &StrfKernelBank,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
    }
    let tfe = tfe_loss(clean_mag, enh_mag)?;
    let mel_clean = mel_log_power_from_magnitude(clean_mag, mel, LOG_POWER_FLOOR, 100.0)?;
    let mel_enh = mel_log_power_from_magnitude(enh_mag, mel, LOG_POWER_FLOOR, 100.0)?;
    let stme = crate::modulation::stme(&mel_clean, &mel_enh, bank, DEFAULT_STME_EPS)?;
    Ok((tfe + lambda * stme, tfe, stme))
}

/// First and second moment estimates, one pair per parameter group.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params(params: &EnhancerParams) -> Self {
        let m = params
            .groups()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update on flat slices.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Outcome of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Non-finite gradients: moments and parameters left untouched.
    RejectedNonFinite,
}

/// Apply one Adam step over all parameter groups. Rejects the whole step
/// if any gradient entry is non-finite.
pub fn adam_step(
    params: &mut EnhancerParams,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let groups = params.groups_mut();
    if grads.len() != groups.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient tensors for {} parameter groups",
            grads.len(),
            groups.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::RejectedNonFinite);
    }
    state.step += 1;
    for (i, (_, t)) in groups.into_iter().enumerate() {
        adam_update(
            t.data_mut(),
            grads[i].data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            state.step,
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        );
    }
    Ok(StepOutcome::Applied)
}

/// Training material: clean clips plus noise clips, either synthesized or
/// loaded from directories of WAV files.
#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub clean: Vec<Waveform>,
    pub noise: Vec<Waveform>,
    /// Clips rejected at load time (wrong rate etc.), kept for reporting.
    pub skipped: usize,
}

impl LoadedCorpus {
    /// Deterministic synthetic corpus: all surrogate classes crossed with
    /// the requested clip count, plus white/pink/modulated noise.
    pub fn synthetic(seed: u64, clips_per_class: usize, clip_seconds: f64) -> Result<Self> {
        let mut clean = Vec::new();
        for class in 0..crate::signal::SURROGATE_CLASSES.len() {
            for i in 0..clips_per_class {
                let clip_seed = seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((class * 1000 + i) as u64);
                clean.push(synth_surrogate_speech(clip_seed, clip_seconds, class)?);
            }
        }
        let noise_seconds = clip_seconds + 1.0;
        let mut noise = Vec::new();
        for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::Modulated] {
            for i in 0..3u64 {
                noise.push(synth_noise(kind, seed ^ (0xBEEF + i), noise_seconds)?);
            }
        }
        Ok(LoadedCorpus {
            clean,
            noise,
            skipped: 0,
        })
    }

    /// Load every 16 kHz WAV below the two directories.
    pub fn from_dirs(clean_dir: &std::path::Path, noise_dir: &std::path::Path) -> Result<Self> {
        let mut skipped = 0usize;
        let mut load_all = |dir: &std::path::Path| -> Result<Vec<Waveform>> {
            let mut out = Vec::new();
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "wav"))
                .collect();
            paths.sort();
            for p in paths {
                match crate::signal::load_wav(&p) {
                    Ok(w) if w.sample_rate_hz == 16_000 && !w.is_empty() => out.push(w),
                    Ok(_) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok(out)
        };
        let clean = load_all(clean_dir)?;
        let noise = load_all(noise_dir)?;
        if clean.is_empty() || noise.is_empty() {
            return Err(Error::Corpus("empty clean or noise directory".into()));
        }
        Ok(LoadedCorpus {
            clean,
            noise,
            skipped,
        })
    }
}

/// Draw one (clean, noisy) pair: a uniformly random window of a random
/// clip, mixed with a random noise clip at a random SNR from the
/// configured range. Deterministic under the caller's RNG.
pub fn sample_segment(
    corpus: &LoadedCorpus,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Waveform, Waveform)> {
    let seg_len = (cfg.segment_seconds * 16_000.0).round() as usize;
    let eligible_clean: Vec<&Waveform> =
        corpus.clean.iter().filter(|c| c.len() >= seg_len).collect();
    let eligible_noise: Vec<&Waveform> =
        corpus.noise.iter().filter(|n| n.len() >= seg_len).collect();
    if eligible_clean.is_empty() || eligible_noise.is_empty() {
        return Err(Error::Corpus(format!(
            "no clip long enough for {}s segments (skipped {} short clips)",
            cfg.segment_seconds,
            corpus.clean.len() + corpus.noise.len()
        )));
    }
    let clip = eligible_clean[rng.random_range(0..eligible_clean.len())];
    let offset = rng.random_range(0..=clip.len() - seg_len);
    let clean = Waveform {
        samples: clip.samples[offset..offset + seg_len].to_vec(),
        sample_rate_hz: clip.sample_rate_hz,
    };
    let noise = eligible_noise[rng.random_range(0..eligible_noise.len())];
    let snr = if cfg.snr_range_db.0 == cfg.snr_range_db.1 {
        cfg.snr_range_db.0
    } else {
        rng.random_range(cfg.snr_range_db.0..cfg.snr_range_db.1)
    };
    let (noisy, _) = mix_at_snr(&clean, noise, snr, rng)?;
    Ok((clean, noisy))
}

/// Per-item loss values (batch means are logged).
#[derive(Clone, Copy, Debug, Default)]
struct LossValues {
    total: f64,
    tfe: f64,
    stme: f64,
}

/// Interleave per-item frame matrices into one tensor whose row
/// `t*B + b` is frame `t` of item `b`, matching the batched recurrence.
fn interleave_rows(items: &[Tensor]) -> Tensor {
    let b = items.len();
    let (frames, cols) = (items[0].rows(), items[0].cols());
    let mut data = Vec::with_capacity(b * frames * cols);
    for t in 0..frames {
        for item in items {
            data.extend_from_slice(item.row(t));
        }
    }
    Tensor::from_vec(&[b * frames, cols], data)
}

/// Forward + backward for a whole batch on one tape; returns batch-mean
/// loss values and batch-averaged gradients in parameter-group order.
fn batch_pass(
    batch: &[(Waveform, Waveform)],
    params: &EnhancerParams,
    mel: &MelFilterbank,
    bank: Option<&StrfKernelBank>,
    cfg: &TrainConfig,
    stft_cfg: &StftConfig,
) -> Result<(LossValues, Vec<Tensor>)> {
    let b = batch.len();
    let mut feature_items = Vec::with_capacity(b);
    let mut noisy_items = Vec::with_capacity(b);
    let mut clean_items = Vec::with_capacity(b);
    for (clean, noisy) in batch {
        let noisy_spec = stft(noisy, stft_cfg)?;
        let mut norm = crate::spectral::NormalizerState::default_for(noisy_spec.bins());
        feature_items.push(features_for(&noisy_spec, &mut norm));
        noisy_items.push(noisy_spec.magnitude());
        clean_items.push(stft(clean, stft_cfg)?.magnitude());
    }
    let frames = feature_items[0].rows();
    let features = interleave_rows(&feature_items);
    let noisy_mag = interleave_rows(&noisy_items);
    let clean_mag = interleave_rows(&clean_items);

    let mut tape = Tape::new(cfg.precision);
    let nodes = leaf_params(&mut tape, params);
    let x = tape.leaf_const(features);
    let h1 = tape.leaf_const(Tensor::zeros(&[b, params.arch.gru_hidden]));
    let h2 = tape.leaf_const(Tensor::zeros(&[b, params.arch.gru_hidden]));
    let (gain, _, _) = forward_on_tape(&mut tape, x, &nodes, h1, h2);
    let noisy_node = tape.leaf_const(noisy_mag);
    let clean_node = tape.leaf_const(clean_mag);
    let enh = tape.mul(gain, noisy_node);

    let tfe = if cfg.loss_mode != LossMode::Stme {
        let diff = tape.sub(clean_node, enh);
        let sq = tape.square(diff);
        Some(tape.mean(sq))
    } else {
        None
    };

    let stme = if cfg.loss_mode.uses_stme() {
        let bank = bank.ok_or_else(|| {
            Error::InvalidArgument(format!("loss mode {:?} requires a kernel bank", cfg.loss_mode))
        })?;
        let weights = tape.leaf_const(mel.weights_transposed());
        let mel_log = |tape: &mut Tape, mag: NodeId| {
            let pow = tape.square(mag);
            let melpow = tape.matmul(pow, weights);
            tape.log_guarded(melpow, LOG_POWER_FLOOR)
        };
        // the clean chain is constant end to end: backward never enters it
        let mel_enh = mel_log(&mut tape, enh);
        let mel_clean = mel_log(&mut tape, clean_node);
        let kernel_nodes: Vec<NodeId> = bank
            .kernels
            .iter()
            .map(|k| tape.leaf_const(k.matrix.clone()))
            .collect();
        let mut stme_mean: Option<NodeId> = None;
        for bi in 0..b {
            let indices: Vec<usize> = (0..frames).map(|t| t * b + bi).collect();
            let enh_b = tape.gather_rows(mel_enh, &indices);
            let clean_b = tape.gather_rows(mel_clean, &indices);
            let mut num: Option<NodeId> = None;
            let mut den = 0.0;
            for &k in &kernel_nodes {
                let resp = tape.xcorr2d_valid(enh_b, k);
                let rc = tape.xcorr2d_valid(clean_b, k);
                den += tape.value(rc).sq_norm();
                let diff = tape.sub(rc, resp);
                let sq = tape.square(diff);
                let s = tape.sum(sq);
                num = Some(match num {
                    Some(acc) => tape.add(acc, s),
                    None => s,
                });
            }
            let num = num.expect("bank holds at least one kernel");
            let item = tape.scale(num, 1.0 / (b as f64 * (den + DEFAULT_STME_EPS)));
            stme_mean = Some(match stme_mean {
                Some(acc) => tape.add(acc, item),
                None => item,
            });
        }
        stme_mean
    } else {
        None
    };

    let total = match (tfe, stme) {
        (Some(t), Some(s)) => {
            let ws = tape.scale(s, cfg.stme_weight);
            tape.add(t, ws)
        }
        (Some(t), None) => t,
        (None, Some(s)) => s,
        (None, None) => unreachable!("loss mode produces no term"),
    };

    let values = LossValues {
        total: tape.value(total).item(),
        tfe: tfe.map_or(0.0, |n| tape.value(n).item()),
        stme: stme.map_or(0.0, |n| tape.value(n).item()),
    };
    if !values.total.is_finite() {
        return Err(Error::TrainAborted(format!(
            "non-finite loss (total={}, tfe={}, stme={})",
            values.total, values.tfe, values.stme
        )));
    }
    let mut grads = tape.backward(total)?;
    let out = nodes
        .ids
        .iter()
        .zip(params.groups())
        .map(|((_, id), (_, t))| grads.take_or_zeros(*id, t.shape()))
        .collect();
    Ok((values, out))
}

/// Fixed validation material drawn once per run.
struct ValidationSet {
    pairs: Vec<(Waveform, Waveform)>,
}

fn build_validation(
    corpus: &LoadedCorpus,
    cfg: &TrainConfig,
) -> Result<ValidationSet> {
    // independent stream so validation does not perturb training sampling
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F0F_1234_5678);
    let pairs = (0..cfg.validation_segments)
        .map(|_| sample_segment(corpus, cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationSet { pairs })
}

fn evaluate_validation(
    step: usize,
    val: &ValidationSet,
    params: &EnhancerParams,
    mel: &MelFilterbank,
    eval_bank: Option<&StrfKernelBank>,
    stft_cfg: &StftConfig,
) -> Result<EvalRecord> {
    let mut si_sum = 0.0;
    let mut stmi_sum = 0.0;
    let mut stme_sum = 0.0;
    let mut stme_n = 0usize;
    for (clean, noisy) in &val.pairs {
        let noisy_spec = stft(noisy, stft_cfg)?;
        let mut norm = crate::spectral::NormalizerState::default_for(noisy_spec.bins());
        let features = features_for(&noisy_spec, &mut norm);
        let mut state = GruState::fresh(&params.arch);
        let gain = forward(&features, params, &mut state)?;
        let enh_spec = apply_gain_complex(&noisy_spec, &gain)?;
        let enhanced = crate::spectral::istft(&enh_spec)?;
        let n = enhanced.len().min(clean.len());
        let clean_cut = Waveform {
            samples: clean.samples[..n].to_vec(),
            sample_rate_hz: clean.sample_rate_hz,
        };
        let enh_cut = Waveform {
            samples: enhanced.samples[..n].to_vec(),
            sample_rate_hz: enhanced.sample_rate_hz,
        };
        si_sum += si_sdr(&clean_cut, &enh_cut)?;
        if let Some(bank) = eval_bank {
            let mel_clean = mel_log_power_from_magnitude(
                &stft(clean, stft_cfg)?.magnitude(),
                mel,
                LOG_POWER_FLOOR,
                100.0,
            )?;
            let mel_enh = mel_log_power_from_magnitude(
                &enh_spec.magnitude(),
                mel,
                LOG_POWER_FLOOR,
                100.0,
            )?;
            stmi_sum += stmi_template(&mel_clean, &mel_enh, bank, DEFAULT_STME_EPS)?;
            stme_sum += crate::modulation::stme(&mel_clean, &mel_enh, bank, DEFAULT_STME_EPS)?;
            stme_n += 1;
        }
    }
    let n = val.pairs.len() as f64;
    Ok(EvalRecord {
        step,
        si_sdr_db: si_sum / n,
        stmi: if stme_n > 0 { stmi_sum / n } else { f64::NAN },
        stme: if stme_n > 0 { stme_sum / n } else { f64::NAN },
    })
}

/// Run the training loop: sample, forward, loss, backward, Adam.
///
/// `bank` provides the STME kernels for the modes that need one and is
/// also used for validation STME/STMI in every mode, so ablation arms
/// stay comparable. The random-STME mode samples its own training bank
/// from the run seed.
pub fn train(
    cfg: &TrainConfig,
    corpus: &LoadedCorpus,
    bank: Option<&StrfKernelBank>,
) -> Result<(EnhancerParams, TrainHistory)> {
    cfg.validate()?;
    if cfg.loss_mode.needs_bank() && bank.is_none() {
        return Err(Error::InvalidArgument(format!(
            "loss mode {:?} requires a kernel bank",
            cfg.loss_mode
        )));
    }
    let stft_cfg = StftConfig::default_16k();
    let mel = MelFilterbank::default_16k();
    let random_bank;
    let train_bank: Option<&StrfKernelBank> = match cfg.loss_mode {
        LossMode::Tfe => None,
        LossMode::TfePlusRandomStme => {
            random_bank = sample_random_bank_with_geometry(
                cfg.seed ^ 0xBA5E_BA11,
                cfg.random_bank_size,
                KernelGeometry::default(),
            )?;
            Some(&random_bank)
        }
        _ => bank,
    };

    let mut params = EnhancerParams::init(cfg.arch, cfg.seed)?;
    let mut adam = AdamState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let val = build_validation(corpus, cfg)?;

    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        let batch: Vec<(Waveform, Waveform)> = (0..cfg.batch_size)
            .map(|_| sample_segment(corpus, cfg, &mut rng))
            .collect::<Result<_>>()?;

        let (values, grads) = batch_pass(&batch, &params, &mel, train_bank, cfg, &stft_cfg)?;
        let grad_norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();

        match adam_step(&mut params, &grads, &mut adam, cfg)? {
            StepOutcome::Applied => {}
            StepOutcome::RejectedNonFinite => history.rejected_steps += 1,
        }
        history.steps.push(StepRecord {
            step,
            total: values.total,
            tfe: values.tfe,
            stme: values.stme,
            grad_norm,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        let due_eval = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if due_eval || step == cfg.steps {
            history.evals.push(evaluate_validation(
                step, &val, &params, &mel, bank, &stft_cfg,
            )?);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                crate::enhancer::save_params(&params, &dir.join(format!("checkpoint_{step}.bin")))?;
            }
        }
    }
    Ok((params, history))
}

// --- gradient-check harness ------------------------------------------------

/// One line of the gradient-check report.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::pass)
    }
}

fn tiny_arch() -> EnhancerArch {
    EnhancerArch {
        input_dim: 8,
        fc_in_dim: 6,
        gru_hidden: 5,
        fc_hidden: 6,
        output_dim: 8,
    }
}

fn tiny_mel(rng: &mut ChaCha8Rng, bands: usize, bins: usize) -> MelFilterbank {
    let weights = Tensor::from_vec(
        &[bands, bins],
        (0..bands * bins)
            .map(|_| rng.random_range(0.05..1.0))
            .collect(),
    );
    MelFilterbank::from_weights(weights).expect("positive weights")
}

fn tiny_bank(seed: u64, n: usize, frames: usize, channels: usize) -> StrfKernelBank {
    sample_random_bank_with_geometry(
        seed,
        n,
        KernelGeometry {
            frames,
            channels,
            frame_rate_hz: 100.0,
        },
    )
    .expect("tiny bank")
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Finite-difference verification of every loss path: TFE and STME with
/// respect to the gain mask, and the combined loss with respect to each
/// network parameter group through a 5-frame recurrence.
pub fn gradcheck_suite(seed: u64, rounds: usize) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut worst_tfe = 0.0f64;
    let mut worst_stme = 0.0f64;
    let mut worst_group: std::collections::BTreeMap<String, f64> = Default::default();

    for round in 0..rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(round as u64));

        // TFE w.r.t. gain on a 10 x 257 instance. The loss is exactly
        // quadratic in the gain, so central differences carry no
        // truncation error and a wide step avoids cancellation noise.
        let clean = rand_tensor(&mut rng, &[10, 257], 0.0, 2.0);
        let noisy = rand_tensor(&mut rng, &[10, 257], 0.1, 2.0);
        let gain0 = rand_tensor(&mut rng, &[10, 257], 0.05, 0.95);
        let (c1, n1) = (clean.clone(), noisy.clone());
        let err = finite_diff_check(
            move |tape, g| {
                let c = tape.leaf_const(c1.clone());
                let x = tape.leaf_const(n1.clone());
                let enh = tape.mul(g, x);
                let diff = tape.sub(c, enh);
                let sq = tape.square(diff);
                tape.mean(sq)
            },
            &gain0,
            1e-2,
        )?;
        worst_tfe = worst_tfe.max(err);

        // STME w.r.t. gain through gain -> magnitude -> mel-log -> xcorr
        let (frames, bins, bands) = (12usize, 16usize, 8usize);
        let mel = tiny_mel(&mut rng, bands, bins);
        let bank = tiny_bank(seed ^ 0xD00D + round as u64, 2, 4, 3);
        let clean = rand_tensor(&mut rng, &[frames, bins], 0.05, 2.0);
        let noisy = rand_tensor(&mut rng, &[frames, bins], 0.1, 2.0);
        let gain0 = rand_tensor(&mut rng, &[frames, bins], 0.1, 0.9);
        let ctx = LossContext::build(clean, &mel, Some(&bank), 1.0, LossMode::Stme)?;
        let noisy2 = noisy.clone();
        let err = finite_diff_check(
            move |tape, g| {
                let x = tape.leaf_const(noisy2.clone());
                let enh = tape.mul(g, x);
                combined_loss_on_tape(tape, &ctx, enh).total
            },
            &gain0,
            1e-5,
        )?;
        worst_stme = worst_stme.max(err);

        // combined loss w.r.t. every parameter group, 5-frame BPTT
        let arch = tiny_arch();
        let params = EnhancerParams::init(arch, seed ^ 0xFACE ^ round as u64)?;
        let mel = tiny_mel(&mut rng, 6, 8);
        let bank = tiny_bank(seed ^ 0xFEED + round as u64, 2, 3, 4);
        let features = rand_tensor(&mut rng, &[5, 8], -1.5, 1.5);
        let clean = rand_tensor(&mut rng, &[5, 8], 0.05, 2.0);
        let noisy = rand_tensor(&mut rng, &[5, 8], 0.1, 2.0);
        let ctx = LossContext::build(clean, &mel, Some(&bank), 1.0, LossMode::TfePlusStme)?;

        for (gi, (gname, gt)) in params.groups().iter().enumerate() {
            let params2 = params.clone();
            let features2 = features.clone();
            let noisy2 = noisy.clone();
            let ctx_ref = &ctx;
            let fd = finite_diff_check_filtered(
                move |tape, probe| {
                    // leaves for all groups; the probed one is the FD leaf
                    let ids: Vec<(&'static str, NodeId)> = params2
                        .groups()
                        .iter()
                        .enumerate()
                        .map(|(j, (name, t))| {
                            if j == gi {
                                (*name, probe)
                            } else {
                                (*name, tape.leaf_const((*t).clone()))
                            }
                        })
                        .collect();
                    let nodes = crate::enhancer::EnhancerNodes { ids };
                    let x = tape.leaf_const(features2.clone());
                    let h1 = tape.leaf_const(Tensor::zeros(&[1, 5]));
                    let h2 = tape.leaf_const(Tensor::zeros(&[1, 5]));
                    let (gain, _, _) = forward_on_tape(tape, x, &nodes, h1, h2);
                    let xm = tape.leaf_const(noisy2.clone());
                    let enh = tape.mul(gain, xm);
                    combined_loss_on_tape(tape, ctx_ref, enh).total
                },
                gt,
                1e-5,
            )?;
            let slot = worst_group.entry(gname.to_string()).or_insert(0.0);
            *slot = slot.max(fd.max_rel_err);
        }
    }

    report.entries.push(GradCheckEntry {
        name: "tfe/gain".into(),
        max_rel_err: worst_tfe,
        tolerance: 1e-6,
    });
    report.entries.push(GradCheckEntry {
        name: "stme/gain".into(),
        max_rel_err: worst_stme,
        tolerance: 1e-4,
    });
    for (name, err) in worst_group {
        report.entries.push(GradCheckEntry {
            name: format!("combined/{name}"),
            max_rel_err: err,
            tolerance: 1e-4,
        });
    }
    Ok(report)
}

// --- kernel-tuning surrogate -------------------------------------------------

/// Tuned bank plus the classification head it was trained with; the head
/// is kept only so held-out accuracy can be measured.
#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub bank: StrfKernelBank,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub epoch_loss: Vec<f64>,
}

/// Differentiable Gabor construction: rate, scale, phase and the two
/// sigmas enter as tape leaves, direction stays fixed.
#[allow(clippy::too_many_arguments)]
fn gabor_on_tape(
    tape: &mut Tape,
    rate: NodeId,
    scale: NodeId,
    phase: NodeId,
    t_sigma: NodeId,
    f_sigma: NodeId,
    direction: SweepDirection,
    geom: &KernelGeometry,
) -> NodeId {
    let (tk, ck) = (geom.frames, geom.channels);
    let center_t = (tk as f64 - 1.0) / 2.0;
    let center_f = (ck as f64 - 1.0) / 2.0;
    let sgn = match direction {
        SweepDirection::Up => 1.0,
        SweepDirection::Down => -1.0,
    };
    let mut tt = Vec::with_capacity(tk * ck);
    let mut cc = Vec::with_capacity(tk * ck);
    let mut dt = Vec::with_capacity(tk * ck);
    let mut df = Vec::with_capacity(tk * ck);
    for tau in 0..tk {
        for c in 0..ck {
            tt.push(std::f64::consts::TAU * tau as f64 / geom.frame_rate_hz);
            cc.push(sgn * std::f64::consts::TAU * c as f64);
            dt.push(tau as f64 - center_t);
            df.push(c as f64 - center_f);
        }
    }
    let shape = [tk, ck];
    let tt = tape.leaf_const(Tensor::from_vec(&shape, tt));
    let cc = tape.leaf_const(Tensor::from_vec(&shape, cc));
    let dt = tape.leaf_const(Tensor::from_vec(&shape, dt));
    let df = tape.leaf_const(Tensor::from_vec(&shape, df));

    let arg_t = tape.mul_s(tt, rate);
    let arg_c = tape.mul_s(cc, scale);
    let arg = tape.add(arg_t, arg_c);
    let arg = tape.add_s(arg, phase);
    let wave = tape.cos(arg);

    let sigma_frames = tape.scale(t_sigma, geom.frame_rate_hz);
    let zt = tape.div_s(dt, sigma_frames);
    let zt2 = tape.square(zt);
    let zt2 = tape.scale(zt2, -0.5);
    let env_t = tape.exp(zt2);
    let zf = tape.div_s(df, f_sigma);
    let zf2 = tape.square(zf);
    let zf2 = tape.scale(zf2, -0.5);
    let env_f = tape.exp(zf2);

    let env = tape.mul(env_t, env_f);
    let raw = tape.mul(env, wave);
    let mn = tape.mean(raw);
    let centered = tape.sub_s(raw, mn);
    let sq = tape.square(centered);
    let ss = tape.sum(sq);
    let nrm = tape.sqrt(ss);
    tape.div_s(centered, nrm)
}

struct TunableKernel {
    rate: f64,
    scale: f64,
    phase: f64,
    t_sigma: f64,
    f_sigma: f64,
    direction: SweepDirection,
}

const TUNE_PARAMS_PER_KERNEL: usize = 5;

fn clamp_tuned(k: &mut TunableKernel) {
    k.rate = k.rate.clamp(0.0, crate::modulation::RATE_MAX_HZ - 1e-6);
    k.scale = k.scale.clamp(0.0, crate::modulation::SCALE_MAX_CPC - 1e-6);
    k.phase = k.phase.rem_euclid(std::f64::consts::TAU);
    k.t_sigma = k.t_sigma.max(5e-3);
    k.f_sigma = k.f_sigma.max(0.2);
}

/// Precomputed log-Mel features of the labeled clips.
fn clip_mels(
    clips: &[(Waveform, usize)],
    mel: &MelFilterbank,
    stft_cfg: &StftConfig,
    min_frames: usize,
) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::with_capacity(clips.len());
    for (w, class) in clips {
        let spec = stft(w, stft_cfg)?;
        if spec.frames < min_frames {
            return Err(Error::Corpus(format!(
                "clip too short: {} frames < kernel support {}",
                spec.frames, min_frames
            )));
        }
        let m = mel_log_power_from_magnitude(
            &spec.magnitude(),
            mel,
            LOG_POWER_FLOOR,
            stft_cfg.frame_rate_hz(),
        )?;
        out.push((m.data, *class));
    }
    Ok(out)
}

/// Feature vector of one clip under the current kernels: per-kernel
/// time-averaged squared response, then a linear softmax head.
fn tune_clip_loss(
    tape: &mut Tape,
    mel_data: &Tensor,
    class: usize,
    kernel_nodes: &[NodeId],
    head_w: NodeId,
    head_b: NodeId,
    n_classes: usize,
) -> NodeId {
    let mel_node = tape.leaf_const(mel_data.clone());
    let mut feats = Vec::with_capacity(kernel_nodes.len());
    for &k in kernel_nodes {
        let resp = tape.xcorr2d_valid(mel_node, k);
        let sq = tape.square(resp);
        let e = tape.mean(sq);
        feats.push(tape.reshape(e, &[1, 1]));
    }
    let stacked = tape.concat_rows(&feats);
    let feat_row = tape.reshape(stacked, &[1, kernel_nodes.len()]);
    let logits_w = tape.matmul(feat_row, head_w);
    let logits = tape.add(logits_w, head_b);

    // cross entropy with a constant max shift; the shift does not change
    // the gradient of log-sum-exp
    let max_logit = tape
        .value(logits)
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let shifted = tape.add_const(logits, -max_logit);
    let exps = tape.exp(shifted);
    let se = tape.sum(exps);
    let lse = tape.log_guarded(se, 1e-300);
    let mut one_hot = vec![0.0; n_classes];
    one_hot[class] = 1.0;
    let oh = tape.leaf_const(Tensor::from_vec(&[1, n_classes], one_hot));
    let picked_v = tape.mul(shifted, oh);
    let picked = tape.sum(picked_v);
    tape.sub(lse, picked)
}

/// Gradient-tune Gabor parameters jointly with a linear softmax head on a
/// labeled corpus, then return the bank regenerated from the final
/// parameters. Directions are kept from the initial bank.
pub fn tune_kernel_bank(
    labeled_clips: &[(Waveform, usize)],
    init: &StrfKernelBank,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TuneOutcome> {
    let classes: std::collections::BTreeSet<usize> =
        labeled_clips.iter().map(|(_, c)| *c).collect();
    if classes.len() < 2 {
        return Err(Error::Corpus("kernel tuning needs at least two classes".into()));
    }
    let n_classes = classes.iter().max().unwrap() + 1;
    let stft_cfg = StftConfig::default_16k();
    let mel = MelFilterbank::default_16k();
    let geom = init.geometry;
    let mels = clip_mels(labeled_clips, &mel, &stft_cfg, geom.frames)?;

    let mut kernels: Vec<TunableKernel> = init
        .kernels
        .iter()
        .map(|k| TunableKernel {
            rate: k.params.rate_hz,
            scale: k.params.scale_cpc,
            phase: k.params.phase_rad,
            t_sigma: k.params.t_sigma,
            f_sigma: k.params.f_sigma,
            direction: k.params.direction,
        })
        .collect();
    let n_kernels = kernels.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (n_kernels as f64).sqrt();
    let mut head_w = Tensor::from_vec(
        &[n_kernels, n_classes],
        (0..n_kernels * n_classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    );
    let mut head_b = Tensor::zeros(&[1, n_classes]);

    // Adam state over [kernel params | head]
    let n_params = n_kernels * TUNE_PARAMS_PER_KERNEL + head_w.numel() + head_b.numel();
    let mut m = vec![0.0f64; n_params];
    let mut v = vec![0.0f64; n_params];
    let mut adam_t = 0u64;
    let minibatch = 16usize;
    let mut order: Vec<usize> = (0..mels.len()).collect();
    let mut epoch_loss = Vec::with_capacity(epochs);

    for _epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_ce = 0.0;
        for chunk in order.chunks(minibatch) {
            let mut tape = Tape::new(Precision::Double);
            let param_nodes: Vec<[NodeId; TUNE_PARAMS_PER_KERNEL]> = kernels
                .iter()
                .map(|k| {
                    [
                        tape.leaf(Tensor::scalar(k.rate)),
                        tape.leaf(Tensor::scalar(k.scale)),
                        tape.leaf(Tensor::scalar(k.phase)),
                        tape.leaf(Tensor::scalar(k.t_sigma)),
                        tape.leaf(Tensor::scalar(k.f_sigma)),
                    ]
                })
                .collect();
            let kernel_nodes: Vec<NodeId> = kernels
                .iter()
                .zip(&param_nodes)
                .map(|(k, p)| {
                    gabor_on_tape(&mut tape, p[0], p[1], p[2], p[3], p[4], k.direction, &geom)
                })
                .collect();
            let w_node = tape.leaf(head_w.clone());
            let b_node = tape.leaf(head_b.clone());

            let mut ce_sum: Option<NodeId> = None;
            for &idx in chunk {
                let (mel_data, class) = &mels[idx];
                let ce = tune_clip_loss(
                    &mut tape,
                    mel_data,
                    *class,
                    &kernel_nodes,
                    w_node,
                    b_node,
                    n_classes,
                );
                ce_sum = Some(match ce_sum {
                    Some(acc) => tape.add(acc, ce),
                    None => ce,
                });
            }
            let ce_sum = ce_sum.expect("nonempty minibatch");
            let loss = tape.scale(ce_sum, 1.0 / chunk.len() as f64);
            epoch_ce += tape.value(loss).item() * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;

            // flatten gradients in a fixed order, then one Adam step
            let mut flat_p = Vec::with_capacity(n_params);
            let mut flat_g = Vec::with_capacity(n_params);
            for (k, nodes) in kernels.iter().zip(&param_nodes) {
                flat_p.extend_from_slice(&[k.rate, k.scale, k.phase, k.t_sigma, k.f_sigma]);
                for &n in nodes {
                    flat_g.push(grads.take_or_zeros(n, &[1]).item());
                }
            }
            flat_p.extend_from_slice(head_w.data());
            flat_g.extend_from_slice(grads.take_or_zeros(w_node, head_w.shape()).data());
            flat_p.extend_from_slice(head_b.data());
            flat_g.extend_from_slice(grads.take_or_zeros(b_node, head_b.shape()).data());

            if flat_g.iter().any(|g| !g.is_finite()) {
                continue; // reject this minibatch step
            }
            adam_t += 1;
            adam_update(
                &mut flat_p, &flat_g, &mut m, &mut v, adam_t, lr, 0.9, 0.999, 1e-8,
            );

            let mut it = flat_p.iter();
            for k in &mut kernels {
                k.rate = *it.next().unwrap();
                k.scale = *it.next().unwrap();
                k.phase = *it.next().unwrap();
                k.t_sigma = *it.next().unwrap();
                k.f_sigma = *it.next().unwrap();
                clamp_tuned(k);
            }
            for w in head_w.data_mut() {
                *w = *it.next().unwrap();
            }
            for b in head_b.data_mut() {
                *b = *it.next().unwrap();
            }
        }
        epoch_loss.push(epoch_ce / mels.len() as f64);
    }

    let tuned = StrfKernelBank {
        geometry: geom,
        kernels: kernels
            .iter()
            .map(|k| {
                make_gabor_kernel(
                    &GaborStrfParams {
                        rate_hz: k.rate,
                        scale_cpc: k.scale,
                        direction: k.direction,
                        phase_rad: k.phase,
                        t_sigma: k.t_sigma,
                        f_sigma: k.f_sigma,
                    },
                    &geom,
                )
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(TuneOutcome {
        bank: tuned,
        head_w,
        head_b,
        epoch_loss,
    })
}

/// Classification accuracy of a (bank, head) pair on labeled clips.
pub fn classify_accuracy(
    bank: &StrfKernelBank,
    head_w: &Tensor,
    head_b: &Tensor,
    clips: &[(Waveform, usize)],
) -> Result<f64> {
    let stft_cfg = StftConfig::default_16k();
    let mel = MelFilterbank::default_16k();
    let mels = clip_mels(clips, &mel, &stft_cfg, bank.geometry.frames)?;
    let mut correct = 0usize;
    for (mel_data, class) in &mels {
        let mel_wrapped = MelLogSpectrogram {
            data: mel_data.clone(),
            frame_rate_hz: 100.0,
        };
        let mut logits = head_b.data().to_vec();
        for (i, kernel) in bank.kernels.iter().enumerate() {
            let resp = crate::modulation::stmr(&mel_wrapped, kernel)?;
            let e = resp.data.sq_norm() / resp.data.numel() as f64;
            for (l, w) in logits.iter_mut().zip(head_w.row(i)) {
                *l += e * w;
            }
        }
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        if pred == *class {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}
