//! Causal gain-prediction network and waveform-level enhancement.
//!
//! The network is FC -> GRU -> GRU -> FC -> FC -> FC(sigmoid), operating
//! frame by frame on the normalized log power spectrum. The sigmoid output
//! bounds the magnitude gain to (0,1); enhancement multiplies the gain
//! into the noisy STFT and resynthesizes with the original noisy phase.
//!
//! The forward pass is expressed on the autodiff tape so training and
//! inference share one implementation; inference simply never calls
//! backward. Frame-local layers run batched over all frames, only the
//! recurrences step sequentially, and the per-row arithmetic is identical
//! either way, so streaming and batch execution agree bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::{NodeId, Precision, Tape};
use crate::spectral::{
    istft, log_power, online_normalize, stft, ComplexSpectrogram, NormalizerState, StftConfig,
    LOG_POWER_FLOOR,
};
use crate::signal::Waveform;
use crate::tensor::Tensor;

const MODEL_MAGIC: &[u8; 4] = b"STME";
const MODEL_VERSION: u32 = 1;

/// Layer widths. ReLU follows every FC layer except the final sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EnhancerArch {
    pub input_dim: usize,
    pub fc_in_dim: usize,
    pub gru_hidden: usize,
    pub fc_hidden: usize,
    pub output_dim: usize,
}

impl EnhancerArch {
    /// Testing profile, roughly 100k parameters.
    pub fn desk() -> Self {
        EnhancerArch {
            input_dim: 257,
            fc_in_dim: 64,
            gru_hidden: 64,
            fc_hidden: 96,
            output_dim: 257,
        }
    }

    /// Full-scale profile, on the order of 2.8M parameters.
    pub fn full() -> Self {
        EnhancerArch {
            input_dim: 257,
            fc_in_dim: 400,
            gru_hidden: 400,
            fc_hidden: 600,
            output_dim: 257,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim != self.input_dim {
            return Err(Error::InvalidArgument(format!(
                "output dim {} must equal input dim {}",
                self.output_dim, self.input_dim
            )));
        }
        if [self.input_dim, self.fc_in_dim, self.gru_hidden, self.fc_hidden]
            .iter()
            .any(|&d| d == 0)
        {
            return Err(Error::InvalidArgument("all layer dims must be nonzero".into()));
        }
        Ok(())
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let (k, f, h, fh) = (self.input_dim, self.fc_in_dim, self.gru_hidden, self.fc_hidden);
        let fc_in = k * f + f;
        let gru1 = 3 * (f * h + h * h + h);
        let gru2 = 3 * (h * h + h * h + h);
        let fc1 = h * fh + fh;
        let fc2 = fh * fh + fh;
        let out = fh * k + k;
        fc_in + gru1 + gru2 + fc1 + fc2 + out
    }
}

/// Update/reset/candidate weights of one GRU layer. `w*` act on the layer
/// input, `u*` on the previous hidden state.
#[derive(Clone, Debug)]
pub struct GruLayerParams {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wn: Tensor,
    pub un: Tensor,
    pub bn: Tensor,
}

impl GruLayerParams {
    fn init(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> Self {
        GruLayerParams {
            wz: uniform_init(rng, in_dim, hidden),
            uz: uniform_init(rng, hidden, hidden),
            bz: Tensor::zeros(&[1, hidden]),
            wr: uniform_init(rng, in_dim, hidden),
            ur: uniform_init(rng, hidden, hidden),
            br: Tensor::zeros(&[1, hidden]),
            wn: uniform_init(rng, in_dim, hidden),
            un: uniform_init(rng, hidden, hidden),
            bn: Tensor::zeros(&[1, hidden]),
        }
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::from_vec(
        &[rows, cols],
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
}

/// All weights of the gain-prediction network.
#[derive(Clone, Debug)]
pub struct EnhancerParams {
    pub arch: EnhancerArch,
    pub fc_in_w: Tensor,
    pub fc_in_b: Tensor,
    pub gru1: GruLayerParams,
    pub gru2: GruLayerParams,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl EnhancerParams {
    pub fn init(arch: EnhancerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(EnhancerParams {
            arch,
            fc_in_w: uniform_init(&mut rng, arch.input_dim, arch.fc_in_dim),
            fc_in_b: Tensor::zeros(&[1, arch.fc_in_dim]),
            gru1: GruLayerParams::init(&mut rng, arch.fc_in_dim, arch.gru_hidden),
            gru2: GruLayerParams::init(&mut rng, arch.gru_hidden, arch.gru_hidden),
            fc1_w: uniform_init(&mut rng, arch.gru_hidden, arch.fc_hidden),
            fc1_b: Tensor::zeros(&[1, arch.fc_hidden]),
            fc2_w: uniform_init(&mut rng, arch.fc_hidden, arch.fc_hidden),
            fc2_b: Tensor::zeros(&[1, arch.fc_hidden]),
            out_w: uniform_init(&mut rng, arch.fc_hidden, arch.output_dim),
            out_b: Tensor::zeros(&[1, arch.output_dim]),
        })
    }

    pub fn zeros(arch: EnhancerArch) -> Result<Self> {
        arch.validate()?;
        Ok(EnhancerParams {
            arch,
            fc_in_w: Tensor::zeros(&[arch.input_dim, arch.fc_in_dim]),
            fc_in_b: Tensor::zeros(&[1, arch.fc_in_dim]),
            gru1: gru_zeros(arch.fc_in_dim, arch.gru_hidden),
            gru2: gru_zeros(arch.gru_hidden, arch.gru_hidden),
            fc1_w: Tensor::zeros(&[arch.gru_hidden, arch.fc_hidden]),
            fc1_b: Tensor::zeros(&[1, arch.fc_hidden]),
            fc2_w: Tensor::zeros(&[arch.fc_hidden, arch.fc_hidden]),
            fc2_b: Tensor::zeros(&[1, arch.fc_hidden]),
            out_w: Tensor::zeros(&[arch.fc_hidden, arch.output_dim]),
            out_b: Tensor::zeros(&[1, arch.output_dim]),
        })
    }

    /// Parameter groups in the fixed serialization and update order.
    pub fn groups(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("fc_in.w", &self.fc_in_w),
            ("fc_in.b", &self.fc_in_b),
            ("gru1.wz", &self.gru1.wz),
            ("gru1.uz", &self.gru1.uz),
            ("gru1.bz", &self.gru1.bz),
            ("gru1.wr", &self.gru1.wr),
            ("gru1.ur", &self.gru1.ur),
            ("gru1.br", &self.gru1.br),
            ("gru1.wn", &self.gru1.wn),
            ("gru1.un", &self.gru1.un),
            ("gru1.bn", &self.gru1.bn),
            ("gru2.wz", &self.gru2.wz),
            ("gru2.uz", &self.gru2.uz),
            ("gru2.bz", &self.gru2.bz),
            ("gru2.wr", &self.gru2.wr),
            ("gru2.ur", &self.gru2.ur),
            ("gru2.br", &self.gru2.br),
            ("gru2.wn", &self.gru2.wn),
            ("gru2.un", &self.gru2.un),
            ("gru2.bn", &self.gru2.bn),
            ("fc1.w", &self.fc1_w),
            ("fc1.b", &self.fc1_b),
            ("fc2.w", &self.fc2_w),
            ("fc2.b", &self.fc2_b),
            ("out.w", &self.out_w),
            ("out.b", &self.out_b),
        ]
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("fc_in.w", &mut self.fc_in_w),
            ("fc_in.b", &mut self.fc_in_b),
            ("gru1.wz", &mut self.gru1.wz),
            ("gru1.uz", &mut self.gru1.uz),
            ("gru1.bz", &mut self.gru1.bz),
            ("gru1.wr", &mut self.gru1.wr),
            ("gru1.ur", &mut self.gru1.ur),
            ("gru1.br", &mut self.gru1.br),
            ("gru1.wn", &mut self.gru1.wn),
            ("gru1.un", &mut self.gru1.un),
            ("gru1.bn", &mut self.gru1.bn),
            ("gru2.wz", &mut self.gru2.wz),
            ("gru2.uz", &mut self.gru2.uz),
            ("gru2.bz", &mut self.gru2.bz),
            ("gru2.wr", &mut self.gru2.wr),
            ("gru2.ur", &mut self.gru2.ur),
            ("gru2.br", &mut self.gru2.br),
            ("gru2.wn", &mut self.gru2.wn),
            ("gru2.un", &mut self.gru2.un),
            ("gru2.bn", &mut self.gru2.bn),
            ("fc1.w", &mut self.fc1_w),
            ("fc1.b", &mut self.fc1_b),
            ("fc2.w", &mut self.fc2_w),
            ("fc2.b", &mut self.fc2_b),
            ("out.w", &mut self.out_w),
            ("out.b", &mut self.out_b),
        ]
    }

    /// Actual parameter count; equals [`EnhancerArch::param_count`].
    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn gru_zeros(in_dim: usize, hidden: usize) -> GruLayerParams {
    GruLayerParams {
        wz: Tensor::zeros(&[in_dim, hidden]),
        uz: Tensor::zeros(&[hidden, hidden]),
        bz: Tensor::zeros(&[1, hidden]),
        wr: Tensor::zeros(&[in_dim, hidden]),
        ur: Tensor::zeros(&[hidden, hidden]),
        br: Tensor::zeros(&[1, hidden]),
        wn: Tensor::zeros(&[in_dim, hidden]),
        un: Tensor::zeros(&[hidden, hidden]),
        bn: Tensor::zeros(&[1, hidden]),
    }
}

/// Hidden state of both GRU layers; fresh state is all zeros.
#[derive(Clone, Debug)]
pub struct GruState {
    pub h1: Tensor,
    pub h2: Tensor,
}

impl GruState {
    pub fn fresh(arch: &EnhancerArch) -> Self {
        GruState {
            h1: Tensor::zeros(&[1, arch.gru_hidden]),
            h2: Tensor::zeros(&[1, arch.gru_hidden]),
        }
    }
}

/// Per-frame, per-bin gain in the open interval (0,1).
#[derive(Clone, Debug)]
pub struct GainMask {
    pub data: Tensor,
}

/// Tape node ids of every parameter group, in `groups()` order.
pub struct EnhancerNodes {
    pub ids: Vec<(&'static str, NodeId)>,
}

impl EnhancerNodes {
    pub fn get(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| *n == name)
            .unwrap_or_else(|| panic!("unknown parameter group {name}"))
            .1
    }
}

/// Put every parameter on the tape as a leaf.
pub fn leaf_params(tape: &mut Tape, params: &EnhancerParams) -> EnhancerNodes {
    let ids = params
        .groups()
        .iter()
        .map(|(name, t)| (*name, tape.leaf((*t).clone())))
        .collect();
    EnhancerNodes { ids }
}

struct GruNodeIds {
    wz: NodeId,
    uz: NodeId,
    bz: NodeId,
    wr: NodeId,
    ur: NodeId,
    br: NodeId,
    wn: NodeId,
    un: NodeId,
    bn: NodeId,
}

fn gru_nodes(nodes: &EnhancerNodes, layer: &str) -> GruNodeIds {
    GruNodeIds {
        wz: nodes.get(&format!("{layer}.wz")),
        uz: nodes.get(&format!("{layer}.uz")),
        bz: nodes.get(&format!("{layer}.bz")),
        wr: nodes.get(&format!("{layer}.wr")),
        ur: nodes.get(&format!("{layer}.ur")),
        br: nodes.get(&format!("{layer}.br")),
        wn: nodes.get(&format!("{layer}.wn")),
        un: nodes.get(&format!("{layer}.un")),
        bn: nodes.get(&format!("{layer}.bn")),
    }
}

/// Run one GRU layer over the frames of `input`, starting from `h0`.
/// The batch size is the row count of `h0`: input row `t*batch + b` is
/// frame `t` of stream `b`, so a whole batch advances in lockstep while
/// input-side projections stay fully batched. Returns the stacked hidden
/// states (same row convention) and the final state node.
fn gru_layer_on_tape(
    tape: &mut Tape,
    input: NodeId,
    h0: NodeId,
    ids: &GruNodeIds,
) -> (NodeId, NodeId) {
    let batch = tape.value(h0).rows();
    let total = tape.value(input).rows();
    assert_eq!(total % batch, 0, "input rows not a multiple of the batch");
    let frames = total / batch;
    let xz_all = tape.matmul(input, ids.wz);
    let xz_all = tape.add_row(xz_all, ids.bz);
    let xr_all = tape.matmul(input, ids.wr);
    let xr_all = tape.add_row(xr_all, ids.br);
    let xn_all = tape.matmul(input, ids.wn);
    let xn_all = tape.add_row(xn_all, ids.bn);

    let mut h = h0;
    let mut hs = Vec::with_capacity(frames);
    for t in 0..frames {
        let xz = tape.slice_rows(xz_all, t * batch, batch);
        let xr = tape.slice_rows(xr_all, t * batch, batch);
        let xn = tape.slice_rows(xn_all, t * batch, batch);
        let hu_z = tape.matmul(h, ids.uz);
        let z_pre = tape.add(xz, hu_z);
        let z = tape.sigmoid(z_pre);
        let hu_r = tape.matmul(h, ids.ur);
        let r_pre = tape.add(xr, hu_r);
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h);
        let rhu = tape.matmul(rh, ids.un);
        let n_pre = tape.add(xn, rhu);
        let n = tape.tanh(n_pre);
        // h' = (1-z) n + z h = n + z (h - n)
        let d = tape.sub(h, n);
        let zd = tape.mul(z, d);
        h = tape.add(n, zd);
        hs.push(h);
    }
    let stacked = tape.concat_rows(&hs);
    (stacked, h)
}

/// Full network on the tape: features -> gain, plus the final recurrent
/// state nodes. Strictly causal by construction. The recurrent states
/// `h1`/`h2` carry one row per stream; for a batch of B segments the
/// feature row `t*B + b` holds frame `t` of segment `b`.
pub fn forward_on_tape(
    tape: &mut Tape,
    features: NodeId,
    nodes: &EnhancerNodes,
    h1: NodeId,
    h2: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let a0 = tape.matmul(features, nodes.get("fc_in.w"));
    let a0 = tape.add_row(a0, nodes.get("fc_in.b"));
    let a0 = tape.relu(a0);
    let g1 = gru_nodes(nodes, "gru1");
    let (h1_all, h1_last) = gru_layer_on_tape(tape, a0, h1, &g1);
    let g2 = gru_nodes(nodes, "gru2");
    let (h2_all, h2_last) = gru_layer_on_tape(tape, h1_all, h2, &g2);
    let a1 = tape.matmul(h2_all, nodes.get("fc1.w"));
    let a1 = tape.add_row(a1, nodes.get("fc1.b"));
    let a1 = tape.relu(a1);
    let a2 = tape.matmul(a1, nodes.get("fc2.w"));
    let a2 = tape.add_row(a2, nodes.get("fc2.b"));
    let a2 = tape.relu(a2);
    let out = tape.matmul(a2, nodes.get("out.w"));
    let out = tape.add_row(out, nodes.get("out.b"));
    let gain = tape.sigmoid(out);
    (gain, h1_last, h2_last)
}

/// Predict the gain mask for `features` [T, K], continuing from `state`.
/// The state is advanced so a caller can stream frame by frame.
pub fn forward(
    features: &Tensor,
    params: &EnhancerParams,
    state: &mut GruState,
) -> Result<GainMask> {
    if features.cols() != params.arch.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} does not match network input dim {}",
            features.cols(),
            params.arch.input_dim
        )));
    }
    if state.h1.cols() != params.arch.gru_hidden || state.h2.cols() != params.arch.gru_hidden {
        return Err(Error::ShapeMismatch(format!(
            "recurrent state width {} does not match hidden size {}",
            state.h1.cols(),
            params.arch.gru_hidden
        )));
    }
    let mut tape = Tape::new(Precision::Double);
    let nodes = leaf_params(&mut tape, params);
    let x = tape.leaf(features.clone());
    let h1 = tape.leaf(state.h1.clone());
    let h2 = tape.leaf(state.h2.clone());
    let (gain, h1_last, h2_last) = forward_on_tape(&mut tape, x, &nodes, h1, h2);
    state.h1 = tape.value(h1_last).clone();
    state.h2 = tape.value(h2_last).clone();
    Ok(GainMask {
        data: tape.value(gain).clone(),
    })
}

/// `|S_hat|[t,k] = G[t,k] |X|[t,k]`
pub fn apply_gain(noisy: &ComplexSpectrogram, gain: &GainMask) -> Result<Tensor> {
    if gain.data.shape() != [noisy.frames, noisy.bins()] {
        return Err(Error::ShapeMismatch(format!(
            "gain {:?} does not match spectrogram {}x{}",
            gain.data.shape(),
            noisy.frames,
            noisy.bins()
        )));
    }
    let mag = noisy.magnitude();
    Ok(Tensor::from_vec(
        mag.shape(),
        mag.data()
            .iter()
            .zip(gain.data.data())
            .map(|(m, g)| m * g)
            .collect(),
    ))
}

/// Scale the complex spectrogram by the gain; the (noisy) phase is kept.
pub fn apply_gain_complex(noisy: &ComplexSpectrogram, gain: &GainMask) -> Result<ComplexSpectrogram> {
    if gain.data.shape() != [noisy.frames, noisy.bins()] {
        return Err(Error::ShapeMismatch("gain does not match spectrogram".into()));
    }
    let mut out = noisy.clone();
    for (c, g) in out.data.iter_mut().zip(gain.data.data()) {
        *c *= *g;
    }
    Ok(out)
}

/// Normalized-LPS features for a noisy spectrogram, advancing the
/// normalizer state causally.
pub fn features_for(spec: &ComplexSpectrogram, norm: &mut NormalizerState) -> Tensor {
    let lps = log_power(spec, LOG_POWER_FLOOR);
    online_normalize(&lps, norm)
}

/// Full enhancement: STFT -> normalized LPS -> gain -> noisy-phase
/// resynthesis. Only current and past frames influence each output frame.
pub fn enhance_waveform(
    noisy: &Waveform,
    params: &EnhancerParams,
    cfg: &StftConfig,
) -> Result<Waveform> {
    let spec = stft(noisy, cfg)?;
    let mut norm = NormalizerState::default_for(spec.bins());
    let features = features_for(&spec, &mut norm);
    let mut state = GruState::fresh(&params.arch);
    let gain = forward(&features, params, &mut state)?;
    let enhanced = apply_gain_complex(&spec, &gain)?;
    istft(&enhanced)
}

/// Frame-by-frame variant: each frame is analyzed, normalized and run
/// through the network with carried state before the next arrives.
/// Matches [`enhance_waveform`] on the same input.
pub fn enhance_waveform_streaming(
    noisy: &Waveform,
    params: &EnhancerParams,
    cfg: &StftConfig,
) -> Result<Waveform> {
    if noisy.sample_rate_hz != cfg.sample_rate_hz {
        return Err(Error::RateMismatch {
            left: noisy.sample_rate_hz,
            right: cfg.sample_rate_hz,
        });
    }
    let frames = cfg.frame_count(noisy.len());
    if frames == 0 {
        return Err(Error::TooShort {
            len: noisy.len(),
            win_len: cfg.win_len,
        });
    }
    let mut norm = NormalizerState::default_for(cfg.bins());
    let mut state = GruState::fresh(&params.arch);
    let mut enhanced_frames = Vec::with_capacity(frames * cfg.bins());
    for t in 0..frames {
        let start = t * cfg.hop;
        let frame_wave = Waveform {
            samples: noisy.samples[start..start + cfg.win_len].to_vec(),
            sample_rate_hz: noisy.sample_rate_hz,
        };
        let frame_spec = stft(&frame_wave, cfg)?;
        let features = features_for(&frame_spec, &mut norm);
        let gain = forward(&features, params, &mut state)?;
        let enhanced = apply_gain_complex(&frame_spec, &gain)?;
        enhanced_frames.extend_from_slice(&enhanced.data);
    }
    let spec = ComplexSpectrogram {
        data: enhanced_frames,
        frames,
        config: cfg.clone(),
    };
    istft(&spec)
}

// --- model file format ---------------------------------------------------
//
// magic "STME" | u32 version | 5 x u32 arch dims
// per group in groups() order: u32 rows, u32 cols, f64-le payload
// trailing u32 crc32 (IEEE) over all preceding bytes

fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Write a versioned, checksummed binary checkpoint.
pub fn save_params(params: &EnhancerParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let a = &params.arch;
    for dim in [a.input_dim, a.fc_in_dim, a.gru_hidden, a.fc_hidden, a.output_dim] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for (_, t) in params.groups() {
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a checkpoint, verifying checksum, version and shape consistency.
pub fn load_params(path: &Path) -> Result<EnhancerParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 4 + 4 + 20 + 4 {
        return Err(Error::ArchMismatch("model file truncated".into()));
    }
    let (body, stored_crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(stored_crc_bytes.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::ChecksumFailure { stored, computed });
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::ArchMismatch("model file shorter than declared".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::ArchMismatch("bad model magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    }
    let arch = EnhancerArch {
        input_dim: dims[0],
        fc_in_dim: dims[1],
        gru_hidden: dims[2],
        fc_hidden: dims[3],
        output_dim: dims[4],
    };
    arch.validate()?;
    let mut params = EnhancerParams::zeros(arch)?;
    for (name, t) in params.groups_mut() {
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if rows != t.rows() || cols != t.cols() {
            return Err(Error::ArchMismatch(format!(
                "group {name}: file declares {rows}x{cols}, architecture requires {}x{}",
                t.rows(),
                t.cols()
            )));
        }
        for v in t.data_mut() {
            *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        }
    }
    if pos != body.len() {
        return Err(Error::ArchMismatch("trailing bytes after parameters".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::synth_surrogate_speech;

    fn tiny_arch() -> EnhancerArch {
        EnhancerArch {
            input_dim: 8,
            fc_in_dim: 6,
            gru_hidden: 5,
            fc_hidden: 6,
            output_dim: 8,
        }
    }

    fn random_features(seed: u64, frames: usize, dim: usize) -> Tensor {
        use rand::RngExt;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[frames, dim],
            (0..frames * dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn zero_params_give_half_gain() {
        let params = EnhancerParams::zeros(tiny_arch()).unwrap();
        let features = random_features(0, 7, 8);
        let mut state = GruState::fresh(&params.arch);
        let gain = forward(&features, &params, &mut state).unwrap();
        assert!(gain.data.data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn gains_always_in_open_unit_interval() {
        let params = EnhancerParams::init(tiny_arch(), 3).unwrap();
        let features = random_features(1, 20, 8).map(|v| v * 50.0);
        let mut state = GruState::fresh(&params.arch);
        let gain = forward(&features, &params, &mut state).unwrap();
        assert!(gain.data.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn streaming_matches_batch_forward() {
        let params = EnhancerParams::init(tiny_arch(), 5).unwrap();
        let features = random_features(2, 12, 8);
        let mut batch_state = GruState::fresh(&params.arch);
        let batch = forward(&features, &params, &mut batch_state).unwrap();

        let mut stream_state = GruState::fresh(&params.arch);
        let mut streamed = Vec::new();
        for t in 0..12 {
            let frame = Tensor::from_vec(&[1, 8], features.row(t).to_vec());
            let g = forward(&frame, &params, &mut stream_state).unwrap();
            streamed.extend_from_slice(g.data.data());
        }
        for (a, b) in batch.data.data().iter().zip(&streamed) {
            assert!((a - b).abs() < 1e-6, "stream/batch gain differ: {a} vs {b}");
        }
        for (a, b) in batch_state.h1.data().iter().zip(stream_state.h1.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_causal() {
        let params = EnhancerParams::init(tiny_arch(), 7).unwrap();
        let features = random_features(3, 15, 8);
        let mut perturbed = features.clone();
        let t_hit = 9;
        for k in 0..8 {
            let v = perturbed.at(t_hit, k) + 5.0;
            perturbed.set(t_hit, k, v);
        }
        let mut s1 = GruState::fresh(&params.arch);
        let mut s2 = GruState::fresh(&params.arch);
        let g1 = forward(&features, &params, &mut s1).unwrap();
        let g2 = forward(&perturbed, &params, &mut s2).unwrap();
        for t in 0..t_hit {
            assert_eq!(g1.data.row(t), g2.data.row(t), "gain frame {t} saw the future");
        }
        assert_ne!(g1.data.row(t_hit), g2.data.row(t_hit));
    }

    #[test]
    fn param_count_closed_form_matches_tensors() {
        for arch in [tiny_arch(), EnhancerArch::desk()] {
            let params = EnhancerParams::zeros(arch).unwrap();
            assert_eq!(params.param_count(), arch.param_count());
        }
        // full-scale profile sits near the published 2.8M figure
        let full = EnhancerArch::full();
        let count = full.param_count();
        assert!(
            (2_600_000..3_000_000).contains(&count),
            "full-scale param count {count}"
        );
    }

    #[test]
    fn apply_gain_elementwise() {
        let cfg = StftConfig::default_16k();
        let w = synth_surrogate_speech(1, 0.1, 0).unwrap();
        let spec = stft(&w, &cfg).unwrap();
        let gain = GainMask {
            data: Tensor::filled(&[spec.frames, spec.bins()], 0.5),
        };
        let enh = apply_gain(&spec, &gain).unwrap();
        let mag = spec.magnitude();
        for (e, m) in enh.data().iter().zip(mag.data()) {
            assert!((e - 0.5 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gain_recovers_roundtrip() {
        // huge positive output bias saturates the sigmoid to ~1
        let mut params = EnhancerParams::zeros(EnhancerArch::desk()).unwrap();
        for v in params.out_b.data_mut() {
            *v = 60.0;
        }
        let cfg = StftConfig::default_16k();
        let w = synth_surrogate_speech(2, 0.3, 1).unwrap();
        let enhanced = enhance_waveform(&w, &params, &cfg).unwrap();
        let roundtrip = istft(&stft(&w, &cfg).unwrap()).unwrap();
        for (a, b) in enhanced.samples.iter().zip(&roundtrip.samples) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_signal_gives_zero_output() {
        let params = EnhancerParams::init(EnhancerArch::desk(), 1).unwrap();
        let cfg = StftConfig::default_16k();
        let w = Waveform::new(vec![0.0; 4800], 16_000).unwrap();
        let out = enhance_waveform(&w, &params, &cfg).unwrap();
        assert!(out.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn streaming_enhancement_matches_batch() {
        let params = EnhancerParams::init(EnhancerArch::desk(), 9).unwrap();
        let cfg = StftConfig::default_16k();
        let w = synth_surrogate_speech(4, 0.4, 2).unwrap();
        let batch = enhance_waveform(&w, &params, &cfg).unwrap();
        let streamed = enhance_waveform_streaming(&w, &params, &cfg).unwrap();
        assert_eq!(batch.len(), streamed.len());
        let max_diff = batch
            .samples
            .iter()
            .zip(&streamed.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-4, "streaming/batch max diff {max_diff}");
    }

    #[test]
    fn model_file_roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join("stme_enhancer_model");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        let params = EnhancerParams::init(tiny_arch(), 11).unwrap();
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.arch, params.arch);
        for ((_, a), (_, b)) in params.groups().iter().zip(loaded.groups()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn truncated_model_fails_checksum() {
        let dir = std::env::temp_dir().join("stme_enhancer_model_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        let params = EnhancerParams::init(tiny_arch(), 12).unwrap();
        save_params(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_params(&path),
            Err(Error::ChecksumFailure { .. }) | Err(Error::ArchMismatch(_))
        ));
    }

    #[test]
    fn corrupted_model_fails_checksum() {
        let dir = std::env::temp_dir().join("stme_enhancer_model_corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        let params = EnhancerParams::init(tiny_arch(), 13).unwrap();
        save_params(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_params(&path), Err(Error::ChecksumFailure { .. })));
    }
}
