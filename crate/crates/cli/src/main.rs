//! `stme` — batch front end for the modulation-domain enhancement
//! pipeline: kernel-bank provisioning, corpus mixing, training,
//! enhancement, objective evaluation and gradient checking.
//!
//! Every subcommand is deterministic under `--seed`, echoes its fully
//! resolved configuration, and exits 0 on success, 1 on a validation or
//! tolerance failure, 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stme_core::enhancer::{enhance_waveform, enhance_waveform_streaming, load_params, save_params};
use stme_core::error::Error;
use stme_core::grad::Precision;
use stme_core::metrics::evaluate_corpus;
use stme_core::modulation::{load_bank, sample_random_bank, save_bank, StrfKernelBank};
use stme_core::signal::{
    load_wav, mix_at_snr_with_offset, save_wav, synth_surrogate_speech, WavEncoding, Waveform,
    SURROGATE_CLASSES,
};
use stme_core::spectral::StftConfig;
use stme_core::trainer::{
    classify_accuracy, gradcheck_suite, train, tune_kernel_bank, LoadedCorpus, TrainConfig,
};

#[derive(Parser)]
#[command(name = "stme", version, about = "spectro-temporal modulation loss pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create, tune or export STRF kernel banks.
    Kernels {
        #[command(subcommand)]
        action: KernelsAction,
    },
    /// Build a mixed corpus from clean and noise directories.
    Mix(MixArgs),
    /// Train the gain-mask enhancer.
    Train(TrainArgs),
    /// Apply a checkpoint to a file or directory.
    Enhance(EnhanceArgs),
    /// Score a processed corpus against its clean references.
    Evaluate(EvaluateArgs),
    /// Verify every loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export the log-power spectrogram of a WAV file as CSV.
    Spectrogram(SpectrogramArgs),
}

#[derive(Subcommand)]
enum KernelsAction {
    /// Sample a bank with uniformly random rate/scale/direction/phase.
    MakeRandom(MakeRandomArgs),
    /// Tune Gabor parameters on a labeled corpus via class discrimination.
    Tune(TuneArgs),
    /// Dump each kernel matrix as a CSV file.
    ExportCsv(ExportCsvArgs),
}

#[derive(Args)]
struct MakeRandomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of kernels.
    #[arg(long, default_value_t = 60)]
    n: usize,
    #[arg(long, default_value_t = 100.0)]
    frame_rate_hz: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    /// Use the built-in labeled surrogate corpus.
    #[arg(long, conflicts_with = "data_dir")]
    synthetic: bool,
    /// Labeled WAV directory: one subdirectory per class.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Starting bank; a random bank is sampled when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clips per class for the synthetic corpus.
    #[arg(long, default_value_t = 20)]
    clips_per_class: usize,
    /// Clip length in seconds for the synthetic corpus.
    #[arg(long, default_value_t = 0.5)]
    clip_seconds: f64,
    /// Fraction of clips held out for the accuracy report.
    #[arg(long, default_value_t = 0.25)]
    holdout_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportCsvArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    clean_dir: PathBuf,
    #[arg(long)]
    noise_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated SNR list in dB, e.g. "-6,0,6".
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    snr_db: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// tfe | stme | tfe+stme | tfe+stme-random
    #[arg(long)]
    loss: Option<String>,
    /// Kernel bank JSON; required by the stme and tfe+stme losses, also
    /// used for validation STME/STMI in every mode.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Train on the built-in synthetic corpus.
    #[arg(long, conflicts_with_all = ["clean_dir", "noise_dir"])]
    synthetic: bool,
    #[arg(long, requires = "noise_dir")]
    clean_dir: Option<PathBuf>,
    #[arg(long, requires = "clean_dir")]
    noise_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    stme_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    segment_seconds: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    snr_lo: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    snr_hi: Option<f64>,
    /// desk | full
    #[arg(long)]
    arch: Option<String>,
    /// single | double
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// WAV file or directory of WAV files.
    #[arg(long)]
    input: PathBuf,
    /// Output file (for file input) or directory.
    #[arg(long)]
    output: PathBuf,
    /// Process frame by frame with carried state.
    #[arg(long)]
    streaming: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    clean_dir: PathBuf,
    #[arg(long)]
    processed_dir: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpectrogramArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent random instances per check.
    #[arg(long, default_value_t = 20)]
    rounds: usize,
    /// Override every per-group tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

/// Resolve an output path against the STME_OUT_DIR override, when set
/// and the path is relative.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(base) = std::env::var("STME_OUT_DIR") {
            if !base.is_empty() {
                return PathBuf::from(base).join(path);
            }
        }
    }
    path.to_path_buf()
}

fn echo_config(subcommand: &str, value: serde_json::Value) {
    println!("resolved config: {{\"subcommand\":\"{subcommand}\",{}}}", {
        let s = value.to_string();
        s[1..s.len() - 1].to_string()
    });
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Kernels { action } => match action {
            KernelsAction::MakeRandom(args) => kernels_make_random(args),
            KernelsAction::Tune(args) => kernels_tune(args),
            KernelsAction::ExportCsv(args) => kernels_export_csv(args),
        },
        Command::Mix(args) => mix(args),
        Command::Train(args) => run_train(args),
        Command::Enhance(args) => enhance(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Spectrogram(args) => spectrogram(args),
    }
}

fn kernels_make_random(args: MakeRandomArgs) -> Result<ExitCode, Error> {
    let out = resolve_out(&args.out);
    echo_config(
        "kernels make-random",
        serde_json::json!({
            "seed": args.seed,
            "n": args.n,
            "frame_rate_hz": args.frame_rate_hz,
            "out": out,
        }),
    );
    let bank = sample_random_bank(args.seed, args.n, args.frame_rate_hz)?;
    save_bank(&bank, &out)?;
    println!("wrote {} kernels to {}", bank.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// Labeled clips: either the synthetic surrogate corpus, or one
/// subdirectory per class under `data_dir`.
fn labeled_clips(args: &TuneArgs) -> Result<(Vec<(Waveform, usize)>, Vec<String>), Error> {
    if let Some(dir) = &args.data_dir {
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.len() < 2 {
            return Err(Error::Corpus("need at least two class subdirectories".into()));
        }
        let mut clips = Vec::new();
        let mut names = Vec::new();
        for (class, cdir) in class_dirs.iter().enumerate() {
            names.push(cdir.file_name().unwrap().to_string_lossy().into_owned());
            let mut files: Vec<PathBuf> = std::fs::read_dir(cdir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "wav"))
                .collect();
            files.sort();
            for f in files {
                clips.push((load_wav(&f)?, class));
            }
        }
        Ok((clips, names))
    } else {
        let mut clips = Vec::new();
        for class in 0..SURROGATE_CLASSES.len() {
            for i in 0..args.clips_per_class {
                let seed = args
                    .seed
                    .wrapping_mul(7919)
                    .wrapping_add((class * 1000 + i) as u64);
                clips.push((
                    synth_surrogate_speech(seed, args.clip_seconds, class)?,
                    class,
                ));
            }
        }
        let names = (0..SURROGATE_CLASSES.len()).map(|c| format!("class{c}")).collect();
        Ok((clips, names))
    }
}

fn kernels_tune(args: TuneArgs) -> Result<ExitCode, Error> {
    if !args.synthetic && args.data_dir.is_none() {
        return Err(Error::InvalidArgument(
            "kernels tune needs --synthetic or --data-dir".into(),
        ));
    }
    let out = resolve_out(&args.out);
    echo_config(
        "kernels tune",
        serde_json::json!({
            "synthetic": args.synthetic,
            "data_dir": args.data_dir,
            "init": args.init,
            "n": args.n,
            "epochs": args.epochs,
            "lr": args.lr,
            "seed": args.seed,
            "clips_per_class": args.clips_per_class,
            "clip_seconds": args.clip_seconds,
            "holdout_fraction": args.holdout_fraction,
            "out": out,
        }),
    );
    let (clips, class_names) = labeled_clips(&args)?;
    let init = match &args.init {
        Some(path) => load_bank(path)?,
        None => sample_random_bank(args.seed, args.n, 100.0)?,
    };
    // deterministic split: every k-th clip of each class held out
    let holdout_every = (1.0 / args.holdout_fraction.clamp(0.05, 0.5)).round() as usize;
    let mut train_clips = Vec::new();
    let mut holdout = Vec::new();
    let mut per_class_count = vec![0usize; class_names.len()];
    for (w, class) in clips {
        per_class_count[class] += 1;
        if per_class_count[class] % holdout_every == 0 {
            holdout.push((w, class));
        } else {
            train_clips.push((w, class));
        }
    }
    let outcome = tune_kernel_bank(&train_clips, &init, args.epochs, args.lr, args.seed)?;
    let train_acc = classify_accuracy(&outcome.bank, &outcome.head_w, &outcome.head_b, &train_clips)?;
    println!("train accuracy: {:.1}% ({} clips)", train_acc * 100.0, train_clips.len());
    if !holdout.is_empty() {
        let acc = classify_accuracy(&outcome.bank, &outcome.head_w, &outcome.head_b, &holdout)?;
        println!("held-out accuracy: {:.1}% ({} clips)", acc * 100.0, holdout.len());
    }
    save_bank(&outcome.bank, &out)?;
    println!("wrote tuned bank to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn kernels_export_csv(args: ExportCsvArgs) -> Result<ExitCode, Error> {
    let out_dir = resolve_out(&args.out_dir);
    echo_config(
        "kernels export-csv",
        serde_json::json!({ "bank": args.bank, "out_dir": out_dir }),
    );
    let bank = load_bank(&args.bank)?;
    std::fs::create_dir_all(&out_dir)?;
    for (i, kernel) in bank.kernels.iter().enumerate() {
        let mut csv = String::new();
        for r in 0..kernel.matrix.rows() {
            let row: Vec<String> = kernel.matrix.row(r).iter().map(|v| format!("{v:.5e}")).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        std::fs::write(out_dir.join(format!("kernel_{i:03}.csv")), csv)?;
    }
    let mut index = String::from("kernel,rate_hz,scale_cpc,direction,phase_rad,t_sigma,f_sigma\n");
    for (i, kernel) in bank.kernels.iter().enumerate() {
        let p = &kernel.params;
        index.push_str(&format!(
            "{i},{},{},{:?},{},{},{}\n",
            p.rate_hz, p.scale_cpc, p.direction, p.phase_rad, p.t_sigma, p.f_sigma
        ));
    }
    std::fs::write(out_dir.join("index.csv"), index)?;
    println!("exported {} kernel matrices to {}", bank.len(), out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn wavs_in(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Corpus(format!("no .wav files under {}", dir.display())));
    }
    Ok(files)
}

/// One stream per (seed, clean, noise, snr) combination so reruns and
/// partial corpora stay reproducible.
fn pair_rng(seed: u64, ci: usize, ni: usize, snr: f64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mix = seed
        ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (ni as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (snr.to_bits().rotate_left(17));
    rand_chacha::ChaCha8Rng::seed_from_u64(mix)
}

fn mix(args: MixArgs) -> Result<ExitCode, Error> {
    let out_dir = resolve_out(&args.out_dir);
    echo_config(
        "mix",
        serde_json::json!({
            "clean_dir": args.clean_dir,
            "noise_dir": args.noise_dir,
            "out_dir": out_dir,
            "snr_db": args.snr_db,
            "seed": args.seed,
        }),
    );
    let clean_files = wavs_in(&args.clean_dir)?;
    let noise_files = wavs_in(&args.noise_dir)?;
    std::fs::create_dir_all(&out_dir)?;
    let mut manifest = String::from("out,clean,noise,snr_db,noise_offset,seed\n");
    let mut written = 0usize;
    for (ci, clean_path) in clean_files.iter().enumerate() {
        let clean = load_wav(clean_path)?;
        for (ni, noise_path) in noise_files.iter().enumerate() {
            let noise = load_wav(noise_path)?;
            // repeat short noise until it covers the clean clip
            let noise = if noise.len() < clean.len() {
                let mut samples = Vec::with_capacity(clean.len() + noise.len());
                while samples.len() < clean.len() {
                    samples.extend_from_slice(&noise.samples);
                }
                Waveform {
                    samples,
                    sample_rate_hz: noise.sample_rate_hz,
                }
            } else {
                noise
            };
            for &snr in &args.snr_db {
                let mut rng = pair_rng(args.seed, ci, ni, snr);
                let (noisy, _, offset) = mix_at_snr_with_offset(&clean, &noise, snr, &mut rng)?;
                let stem = |p: &Path| {
                    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
                };
                let name = format!(
                    "{}__{}__snr{}{}dB.wav",
                    stem(clean_path),
                    stem(noise_path),
                    if snr < 0.0 { "m" } else { "p" },
                    snr.abs()
                );
                save_wav(&noisy, &out_dir.join(&name), WavEncoding::Float32)?;
                manifest.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    name,
                    clean_path.display(),
                    noise_path.display(),
                    snr,
                    offset,
                    args.seed
                ));
                written += 1;
            }
        }
    }
    std::fs::write(out_dir.join("manifest.csv"), manifest)?;
    println!("wrote {written} mixtures and manifest.csv to {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn run_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let out_dir = resolve_out(&args.out_dir);
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Schema {
                path: path.clone(),
                reason: e.to_string(),
            })?
        }
        None => TrainConfig::desk(),
    };
    if let Some(loss) = &args.loss {
        cfg.loss_mode = loss.parse()?;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.stme_weight {
        cfg.stme_weight = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.segment_seconds {
        cfg.segment_seconds = v;
    }
    if let Some(v) = args.snr_lo {
        cfg.snr_range_db.0 = v;
    }
    if let Some(v) = args.snr_hi {
        cfg.snr_range_db.1 = v;
    }
    if let Some(arch) = &args.arch {
        cfg.arch = match arch.as_str() {
            "desk" => stme_core::enhancer::EnhancerArch::desk(),
            "full" => stme_core::enhancer::EnhancerArch::full(),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown arch {other:?} (expected desk or full)"
                )))
            }
        };
    }
    if let Some(p) = &args.precision {
        cfg.precision = match p.as_str() {
            "single" => Precision::Single,
            "double" => Precision::Double,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown precision {other:?} (expected single or double)"
                )))
            }
        };
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.checkpoint_dir = Some(out_dir.clone());

    echo_config(
        "train",
        serde_json::json!({
            "out_dir": out_dir,
            "bank": args.bank,
            "synthetic": args.synthetic,
            "clean_dir": args.clean_dir,
            "noise_dir": args.noise_dir,
            "train": cfg,
        }),
    );

    if !args.synthetic && args.clean_dir.is_none() {
        return Err(Error::InvalidArgument(
            "train needs --synthetic or --clean-dir/--noise-dir".into(),
        ));
    }
    let corpus = if args.synthetic {
        LoadedCorpus::synthetic(cfg.seed, 4, cfg.segment_seconds + 1.5)?
    } else {
        LoadedCorpus::from_dirs(
            args.clean_dir.as_ref().unwrap(),
            args.noise_dir.as_ref().unwrap(),
        )?
    };
    let bank = match &args.bank {
        Some(path) => Some(load_bank(path)?),
        None => None,
    };
    std::fs::create_dir_all(&out_dir)?;
    let (params, history) = train(&cfg, &corpus, bank.as_ref())?;
    save_params(&params, &out_dir.join("checkpoint_final.bin"))?;
    std::fs::write(out_dir.join("history.csv"), history.history_csv())?;
    std::fs::write(out_dir.join("eval.csv"), history.eval_csv())?;
    if history.rejected_steps > 0 {
        eprintln!("warning: {} steps rejected for non-finite gradients", history.rejected_steps);
    }
    println!(
        "trained {} steps; final loss {}; wrote checkpoint_final.bin, history.csv, eval.csv to {}",
        history.steps.len(),
        history.steps.last().map_or(f64::NAN, |r| r.total),
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn enhance(args: EnhanceArgs) -> Result<ExitCode, Error> {
    let output = resolve_out(&args.output);
    echo_config(
        "enhance",
        serde_json::json!({
            "checkpoint": args.checkpoint,
            "input": args.input,
            "output": output,
            "streaming": args.streaming,
        }),
    );
    let params = load_params(&args.checkpoint)?;
    let cfg = StftConfig::default_16k();
    let run_one = |inp: &Path, out: &Path| -> Result<(), Error> {
        let noisy = load_wav(inp)?;
        let enhanced = if args.streaming {
            enhance_waveform_streaming(&noisy, &params, &cfg)?
        } else {
            enhance_waveform(&noisy, &params, &cfg)?
        };
        save_wav(&enhanced, out, WavEncoding::Float32)?;
        Ok(())
    };
    if args.input.is_dir() {
        std::fs::create_dir_all(&output)?;
        let files = wavs_in(&args.input)?;
        for f in &files {
            run_one(f, &output.join(f.file_name().unwrap()))?;
        }
        println!("enhanced {} files into {}", files.len(), output.display());
    } else {
        if let Some(parent) = output.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        run_one(&args.input, &output)?;
        println!("enhanced {} -> {}", args.input.display(), output.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(args: EvaluateArgs) -> Result<ExitCode, Error> {
    let out = resolve_out(&args.out);
    echo_config(
        "evaluate",
        serde_json::json!({
            "clean_dir": args.clean_dir,
            "processed_dir": args.processed_dir,
            "bank": args.bank,
            "out": out,
        }),
    );
    let bank: StrfKernelBank = load_bank(&args.bank)?;
    let report = evaluate_corpus(&args.clean_dir, &args.processed_dir, &bank)?;
    for skipped in &report.unmatched {
        eprintln!("unmatched, skipped: {skipped}");
    }
    std::fs::write(&out, report.to_csv())?;
    let (si, n) = report.mean_si_sdr();
    let (st, _) = report.mean_stoi();
    let (sm, _) = report.mean_stmi();
    println!(
        "evaluated {n} files: mean SI-SDR {si:.2} dB, STOI {st:.4}, STMI {sm:.4}; report at {}",
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn spectrogram(args: SpectrogramArgs) -> Result<ExitCode, Error> {
    let out = resolve_out(&args.out);
    echo_config(
        "spectrogram",
        serde_json::json!({ "input": args.input, "out": out }),
    );
    let w = load_wav(&args.input)?;
    let spec = stme_core::spectral::stft(&w, &StftConfig::default_16k())?;
    let lps = stme_core::spectral::log_power(&spec, stme_core::spectral::LOG_POWER_FLOOR);
    let mut csv = String::new();
    for t in 0..lps.rows() {
        let row: Vec<String> = lps.row(t).iter().map(|v| format!("{v:.5e}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(&out, csv)?;
    println!(
        "wrote {} frames x {} bins of log power to {}",
        lps.rows(),
        lps.cols(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    echo_config(
        "gradcheck",
        serde_json::json!({
            "seed": args.seed,
            "rounds": args.rounds,
            "tolerance": args.tolerance,
        }),
    );
    let mut report = gradcheck_suite(args.seed, args.rounds)?;
    if let Some(tol) = args.tolerance {
        for e in &mut report.entries {
            e.tolerance = tol;
        }
    }
    let mut ok = true;
    for e in &report.entries {
        let status = if e.pass() { "pass" } else { "FAIL" };
        println!("{status}  {:<24} max rel err {:.3e} (tolerance {:.0e})", e.name, e.max_rel_err, e.tolerance);
        ok &= e.pass();
    }
    if ok {
        println!("gradcheck: all {} groups within tolerance", report.entries.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck: tolerance exceeded");
        Ok(ExitCode::from(1))
    }
}
