//! Shared fixtures for the criterion benchmarks.

use stme_core::signal::{synth_noise, synth_surrogate_speech, NoiseKind, Waveform};

pub fn speech_second() -> Waveform {
    synth_surrogate_speech(1, 1.0, 2).expect("surrogate synth")
}

pub fn noise_seconds(seconds: f64) -> Waveform {
    synth_noise(NoiseKind::Pink, 2, seconds).expect("noise synth")
}
