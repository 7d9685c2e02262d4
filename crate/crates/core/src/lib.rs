//! Modulation-domain loss and desk-scale speech-enhancement pipeline.
//!
//! The crate bundles everything needed to train and evaluate a causal
//! gain-mask enhancer whose loss lives in the spectro-temporal modulation
//! domain: WAV and synthetic signal handling, an STFT front-end, a Gabor
//! STRF kernel bank with STMR/STMI/STME computation, a small reverse-mode
//! autodiff tape, the FC+GRU gain network, Adam training with selectable
//! loss modes, and SI-SDR / STOI / STMI evaluation.

pub mod enhancer;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod modulation;
pub mod signal;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
