//! `waveflow` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use waveflow_core::conditioner::{mel_spectrogram, MelConfig, MelSpectrogram};
use waveflow_core::flow::stack_inverse;
use waveflow_core::io::checkpoint::{load_checkpoint, load_mel, manifest_path, save_mel};
use waveflow_core::io::config::{load_config, ModelConfig};
use waveflow_core::io::dataset::read_dataset_manifest;
use waveflow_core::model::WaveFlowModel;
use waveflow_core::signal::{read_wav, write_wav, Waveform};
use waveflow_core::synth::{bench, sample_latent, synthesize, BenchConfig, Engine};
use waveflow_core::train::{train_loop, Dataset, Precision, TrainConfig, TrainOutput, Utterance};
use waveflow_core::verify::{random_stack, run_suite, Level};
use waveflow_core::{Error, Scalar};

#[derive(Parser, Debug)]
#[command(name = "waveflow", version, about = "Flow-based waveform model: training, likelihood and synthesis")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Arithmetic precision.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::Fp32)]
    precision: PrecisionArg,
    /// Print structured JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for batch evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    Fp32,
    Fp64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Fp32 => Precision::Fp32,
            PrecisionArg::Fp64 => Precision::Fp64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Naive,
    Queued,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train by maximum likelihood.
    Train(TrainArgs),
    /// Generate a waveform from latents.
    Synth(SynthArgs),
    /// Exact log-likelihood of a WAV file.
    Loglik(LoglikArgs),
    /// Time naive against queued synthesis.
    Bench(BenchArgs),
    /// Run the invariant suites.
    Verify(VerifyArgs),
    /// Compute and cache a mel spectrogram.
    Mel(MelArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preset name or JSON config path.
    #[arg(long)]
    config: String,
    /// Newline-delimited JSON of {"wav", "duration"} records.
    #[arg(long)]
    data_manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Constant Adam learning rate.
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Clip length in samples.
    #[arg(long, default_value_t = 16000)]
    clip: usize,
    /// Steps between checkpoints (0: final only).
    #[arg(long, default_value_t = 1000)]
    checkpoint_interval: usize,
    /// Optional global gradient-norm clip.
    #[arg(long)]
    max_grad_norm: Option<f64>,
    /// Directory of cached mel spectrograms; missing entries are computed
    /// and written. Without it mels are computed live.
    #[arg(long)]
    mel_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Checkpoint base path (without `.manifest.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cached mel spectrogram base path.
    #[arg(long, conflicts_with = "wav_for_mel")]
    mel: Option<PathBuf>,
    /// WAV file whose mel conditions the synthesis.
    #[arg(long)]
    wav_for_mel: Option<PathBuf>,
    /// Output length in samples; defaults to what the mel covers, or one
    /// second for unconditioned models.
    #[arg(long)]
    samples: Option<usize>,
    /// Latent standard deviation.
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = EngineArg::Queued)]
    engine: EngineArg,
}

#[derive(Args, Debug)]
struct LoglikArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint base path; alternatively use --config.
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    /// Preset name or JSON config, with random weights.
    #[arg(long)]
    config: Option<String>,
    /// Grid width (samples = h × width).
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Timed repetitions per engine; the fastest is kept.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
    level: LevelArg,
}

#[derive(Args, Debug)]
struct MelArgs {
    #[arg(long)]
    wav: PathBuf,
    /// Output base path.
    #[arg(long)]
    out: PathBuf,
    /// Preset or config whose mel settings to use; defaults otherwise.
    #[arg(long)]
    config: Option<String>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let numerical = error.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
        Self {
            code: if numerical { 2 } else { 1 },
            error,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    if cli.threads == 0 {
        return Err(anyhow!("--threads must be at least 1").into());
    }
    match (&cli.command, cli.precision) {
        (Command::Train(a), PrecisionArg::Fp32) => cmd_train::<f32>(cli, a),
        (Command::Train(a), PrecisionArg::Fp64) => cmd_train::<f64>(cli, a),
        (Command::Synth(a), PrecisionArg::Fp32) => cmd_synth::<f32>(cli, a),
        (Command::Synth(a), PrecisionArg::Fp64) => cmd_synth::<f64>(cli, a),
        (Command::Loglik(a), PrecisionArg::Fp32) => cmd_loglik::<f32>(cli, a),
        (Command::Loglik(a), PrecisionArg::Fp64) => cmd_loglik::<f64>(cli, a),
        (Command::Bench(a), PrecisionArg::Fp32) => cmd_bench::<f32>(cli, a),
        (Command::Bench(a), PrecisionArg::Fp64) => cmd_bench::<f64>(cli, a),
        (Command::Verify(a), _) => cmd_verify(cli, a),
        (Command::Mel(a), _) => cmd_mel(cli, a),
    }
}

fn emit(cli: &Cli, value: serde_json::Value, human: impl FnOnce()) {
    if cli.json {
        println!("{value}");
    } else {
        human();
    }
}

fn mel_config_of(cfg: &ModelConfig) -> Option<&MelConfig> {
    cfg.mel.as_ref()
}

fn cached_mel(cache: &Path, index: usize, wav: &Path, audio: &Waveform<f32>, cfg: &MelConfig) -> CliResult<MelSpectrogram> {
    let stem = wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let base = cache.join(format!("{index:05}-{stem}"));
    if manifest_path(&base).exists() {
        return Ok(load_mel(&base).with_context(|| format!("reading cached mel {}", base.display()))?);
    }
    let mel = mel_spectrogram(audio, cfg)?;
    std::fs::create_dir_all(cache).with_context(|| format!("creating {}", cache.display()))?;
    save_mel(&mel, &base)?;
    Ok(mel)
}

fn cmd_train<T: Scalar>(cli: &Cli, a: &TrainArgs) -> CliResult {
    let cfg = load_config(&a.config).with_context(|| format!("loading config {}", a.config))?;
    let entries = read_dataset_manifest(&a.data_manifest)
        .with_context(|| format!("reading dataset manifest {}", a.data_manifest.display()))?;
    let mut utterances = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let audio = read_wav(&e.wav).with_context(|| format!("reading {}", e.wav.display()))?;
        let mel = match (mel_config_of(&cfg), &a.mel_cache) {
            (None, _) => None,
            (Some(m), Some(cache)) => Some(cached_mel(cache, i, &e.wav, &audio, m)?),
            (Some(m), None) => Some(mel_spectrogram(&audio, m)?),
        };
        utterances.push(Utterance { audio, mel });
    }
    let dataset = Dataset { utterances };
    let tc = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        clip_length: a.clip,
        max_steps: a.steps,
        seed: cli.seed,
        checkpoint_interval: a.checkpoint_interval,
        precision: cli.precision.into(),
        max_grad_norm: a.max_grad_norm,
        threads: cli.threads,
    };
    if let waveflow_core::network::DilationCheck::Warning { .. } = cfg.dilation_check()? {
        log::warn!("{}", cfg.dilation_check()?);
    }
    let mut model = WaveFlowModel::<T>::init(&cfg, cli.seed)?;
    let summary = train_loop(&tc, &mut model, &dataset, &TrainOutput::to_dir(&a.out_dir))?;
    let last = summary.records.last();
    emit(
        cli,
        json!({
            "steps": summary.records.len(),
            "final_loss": last.map(|r| r.loss),
            "skipped_steps": summary.skipped_steps,
            "parameters": model.count_parameters(),
            "checkpoints": summary.checkpoints,
            "metrics": a.out_dir.join("metrics.ndjson"),
        }),
        || {
            println!("trained {} steps, {} parameters", summary.records.len(), model.count_parameters());
            if let Some(r) = last {
                println!("final loss {:.6} nats/dim", r.loss);
            }
            for c in &summary.checkpoints {
                println!("checkpoint {}", c.display());
            }
        },
    );
    Ok(())
}

fn load_model<T: Scalar>(path: &Path) -> CliResult<WaveFlowModel<T>> {
    Ok(load_checkpoint::<T>(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .0)
}

fn cmd_synth<T: Scalar>(cli: &Cli, a: &SynthArgs) -> CliResult {
    let model = load_model::<T>(&a.checkpoint)?;
    let cfg = &model.config;
    let mel = match (&a.mel, &a.wav_for_mel, mel_config_of(cfg)) {
        (Some(p), _, Some(_)) => Some(load_mel(p).with_context(|| format!("loading mel {}", p.display()))?),
        (None, Some(p), Some(m)) => {
            let wav = read_wav(p).with_context(|| format!("reading {}", p.display()))?;
            Some(mel_spectrogram(&wav, m)?)
        }
        (None, None, Some(_)) => return Err(anyhow!("this model is conditioned: pass --mel or --wav-for-mel").into()),
        (Some(_), _, None) | (_, Some(_), None) => {
            return Err(anyhow!("this model is unconditioned and takes no mel").into());
        }
        (None, None, None) => None,
    };
    let h = cfg.h;
    let (covered, n_samples) = match &mel {
        Some(m) => {
            let covered = m.n_frames * waveflow_core::conditioner::UPSAMPLE_FACTOR;
            (Some(covered), a.samples.unwrap_or(m.n_frames * m.hop).min(covered))
        }
        None => (None, a.samples.unwrap_or(cfg.sample_rate as usize)),
    };
    if let (Some(c), Some(s)) = (covered, a.samples) {
        if s > c {
            return Err(Error::ConditionerTooShort {
                available: c,
                required: s,
            }
            .into());
        }
    }
    if n_samples == 0 {
        return Err(anyhow!("nothing to synthesize").into());
    }
    let mut w = n_samples.div_ceil(h);
    if let Some(c) = covered {
        w = w.min(c / h);
    }
    let fs = model.materialize()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let z = sample_latent::<T, _>(h, w, a.std, &mut rng)?;
    let n_out = Some(n_samples.min(h * w));
    let run = |e: Engine| synthesize(e, &z, mel.as_ref(), &fs, cfg.sample_rate, n_out);
    let (audio, stats, diff) = match a.engine {
        EngineArg::Naive => {
            let (x, s) = run(Engine::Naive)?;
            (x, s, None)
        }
        EngineArg::Queued => {
            let (x, s) = run(Engine::Queued)?;
            (x, s, None)
        }
        EngineArg::Both => {
            let (x0, _) = run(Engine::Naive)?;
            let (x1, s) = run(Engine::Queued)?;
            let d = x0
                .samples
                .iter()
                .zip(&x1.samples)
                .map(|(p, q)| (p.as_f64() - q.as_f64()).abs())
                .fold(0.0, f64::max);
            (x1, s, Some(d))
        }
    };
    write_wav(&a.out, &audio).with_context(|| format!("writing {}", a.out.display()))?;
    emit(
        cli,
        json!({
            "out": a.out,
            "samples": audio.len(),
            "sample_rate": audio.sample_rate,
            "sequential_steps": stats.sequential_steps,
            "floored_sigmas": stats.floored_sigmas,
            "max_abs_diff": diff,
        }),
        || {
            println!(
                "wrote {} samples to {} ({} sequential steps)",
                audio.len(),
                a.out.display(),
                stats.sequential_steps
            );
            if stats.floored_sigmas > 0 {
                println!("floored sigmas: {}", stats.floored_sigmas);
            }
            if let Some(d) = diff {
                println!("max abs diff naive vs queued: {d:.3e}");
            }
        },
    );
    Ok(())
}

fn cmd_loglik<T: Scalar>(cli: &Cli, a: &LoglikArgs) -> CliResult {
    let model = load_model::<T>(&a.checkpoint)?;
    let wav = read_wav(&a.wav).with_context(|| format!("reading {}", a.wav.display()))?;
    let mel = mel_config_of(&model.config).map(|m| mel_spectrogram(&wav, m)).transpose()?;
    let fs = model.materialize()?;
    let (_, report) = stack_inverse(&wav.cast::<T>(), mel.as_ref(), &fs)?;
    emit(cli, serde_json::to_value(&report).map_err(anyhow::Error::from)?, || {
        println!("total log-likelihood   {:.6} nats", report.total_loglik);
        println!("per-dim log-likelihood {:.6} nats", report.per_dim_loglik);
        println!("log-det sum            {:.6}", report.logdet_sum);
        println!("base term              {:.6}", report.base_term);
        println!("dims {} (padding {})", report.dims, report.pad_count);
    });
    Ok(())
}

fn cmd_bench<T: Scalar>(cli: &Cli, a: &BenchArgs) -> CliResult {
    let (fs, sample_rate) = match (&a.checkpoint, &a.config) {
        (Some(p), _) => {
            let model = load_model::<T>(p)?;
            (model.materialize()?, model.config.sample_rate)
        }
        (None, Some(c)) => {
            // random output projections so the engines are compared on a
            // non-identity model
            let cfg = load_config(c)?;
            (random_stack(&cfg, cfg.init_std, cli.seed)?.cast::<T>(), cfg.sample_rate)
        }
        (None, None) => return Err(anyhow!("pass --checkpoint or --config").into()),
    };
    let report = bench(
        &fs,
        &BenchConfig {
            w: a.width,
            std: 1.0,
            seed: cli.seed,
            sample_rate,
            repeats: a.repeats,
        },
    )?;
    emit(cli, serde_json::to_value(&report).map_err(anyhow::Error::from)?, || {
        println!("h {} × w {} ({} flows, {} samples)", report.h, report.w, report.n_flows, report.samples);
        println!("sequential steps   {}", report.sequential_steps);
        println!(
            "naive              {:.4} s  ({:.1} samples/s, real-time ×{:.4})",
            report.naive_seconds, report.naive_samples_per_second, report.naive_realtime_factor
        );
        println!(
            "queued             {:.4} s  ({:.1} samples/s, real-time ×{:.4})",
            report.queued_seconds, report.queued_samples_per_second, report.queued_realtime_factor
        );
        println!("speedup            {:.2}×", report.speedup_ratio);
        println!("max abs diff       {:.3e}", report.max_abs_diff);
    });
    Ok(())
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs) -> CliResult {
    let level = match a.level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let results = run_suite(level, cli.seed);
    let all = results.iter().all(|r| r.passed);
    emit(cli, json!({ "level": level, "passed": all, "checks": results }), || {
        for r in &results {
            println!(
                "{:<30} {}  measured {:.3e}  tolerance {:.1e}  {:.2}s {}",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.measured,
                r.tolerance,
                r.seconds,
                r.detail
            );
        }
    });
    if all {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            error: anyhow!("{} check(s) failed", results.iter().filter(|r| !r.passed).count()),
        })
    }
}

fn cmd_mel(cli: &Cli, a: &MelArgs) -> CliResult {
    let cfg = match &a.config {
        Some(c) => load_config(c)?
            .mel
            .ok_or_else(|| anyhow!("config {c} has no mel settings"))?,
        None => MelConfig::default(),
    };
    let wav = read_wav(&a.wav).with_context(|| format!("reading {}", a.wav.display()))?;
    let mel = mel_spectrogram(&wav, &cfg)?;
    save_mel(&mel, &a.out)?;
    emit(
        cli,
        json!({ "out": a.out, "n_mels": mel.n_mels, "n_frames": mel.n_frames, "hop": mel.hop }),
        || println!("{} bands × {} frames → {}", mel.n_mels, mel.n_frames, a.out.display()),
    );
    Ok(())
}
