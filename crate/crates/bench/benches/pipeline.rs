use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stme_bench::{noise_seconds, speech_second};
use stme_core::enhancer::{enhance_waveform, EnhancerArch, EnhancerParams};
use stme_core::grad::Precision;
use stme_core::modulation::{mel_log_power, sample_random_bank, stme, MelFilterbank};
use stme_core::signal::mix_at_snr;
use stme_core::spectral::{istft, stft, StftConfig};
use stme_core::trainer::{train, LoadedCorpus, LossMode, TrainConfig};

fn bench_stft_roundtrip(c: &mut Criterion) {
    let cfg = StftConfig::default_16k();
    let w = speech_second();
    c.bench_function("stft_istft_1s", |b| {
        b.iter(|| {
            let spec = stft(black_box(&w), &cfg).unwrap();
            black_box(istft(&spec).unwrap())
        })
    });
}

fn bench_stme(c: &mut Criterion) {
    let cfg = StftConfig::default_16k();
    let mel = MelFilterbank::default_16k();
    let bank = sample_random_bank(7, 60, 100.0).unwrap();
    let clean = speech_second();
    let noise = noise_seconds(2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (noisy, _) = mix_at_snr(&clean, &noise, 0.0, &mut rng).unwrap();
    let mel_clean = mel_log_power(&stft(&clean, &cfg).unwrap(), &mel, 1e-10).unwrap();
    let mel_noisy = mel_log_power(&stft(&noisy, &cfg).unwrap(), &mel, 1e-10).unwrap();
    c.bench_function("stme_60_kernels_1s", |b| {
        b.iter(|| black_box(stme(&mel_clean, &mel_noisy, &bank, 1e-8).unwrap()))
    });
}

fn bench_enhance(c: &mut Criterion) {
    let cfg = StftConfig::default_16k();
    let params = EnhancerParams::init(EnhancerArch::desk(), 1).unwrap();
    let w = speech_second();
    c.bench_function("enhance_desk_1s", |b| {
        b.iter(|| black_box(enhance_waveform(&w, &params, &cfg).unwrap()))
    });
}

fn bench_train_step(c: &mut Criterion) {
    let corpus = LoadedCorpus::synthetic(1, 2, 2.0).unwrap();
    let bank = sample_random_bank(9, 8, 100.0).unwrap();
    let cfg = TrainConfig {
        steps: 1,
        batch_size: 4,
        loss_mode: LossMode::TfePlusStme,
        precision: Precision::Single,
        eval_every: 0,
        ..TrainConfig::desk()
    };
    c.bench_function("train_step_tfe_stme_b4", |b| {
        b.iter(|| black_box(train(&cfg, &corpus, Some(&bank)).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_stft_roundtrip, bench_stme, bench_enhance, bench_train_step
}
criterion_main!(benches);
