//! `unreflect` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration error.
//! When `UNREFLECT_OUT_DIR` is set, every output file is written into that
//! directory under its own file name (for `synth`, the directory itself
//! replaces `--out`).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use unreflect::imgcore::{read_png, write_png};
use unreflect::model::{load_checkpoint, ModelConfig};
use unreflect::synthesis::{generate_dataset, SynthConfig};
use unreflect::trainer::{evaluate, train, Profile, TrainConfig};
use unreflect::Error;

const OUT_DIR_ENV: &str = "UNREFLECT_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "unreflect",
    version,
    about = "Reflection removal: synthesize data, train, infer, evaluate"
)]
struct Cli {
    /// Print resolved configurations and per-epoch losses.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a train/test dataset of mixture and target images.
    Synth {
        #[arg(long)]
        transmission: PathBuf,
        #[arg(long)]
        reflection: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a network on a dataset manifest.
    Train {
        /// Built-in starting point: desk, smoke or paper.
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Remove reflections from one PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Report PSNR of a checkpoint over a dataset manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "eval_report.json")]
        report: PathBuf,
    },
}

/// Document layered by `train --config/--set`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    train: TrainConfig,
    model: ModelConfig,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidInput(_) | Error::Data(_) => {
                Failure::Usage(e.to_string())
            }
            Error::Io { .. } | Error::Codec { .. } | Error::Checkpoint(_) | Error::NonFiniteLoss { .. } => {
                Failure::Runtime(e.to_string())
            }
        }
    }
}

fn output_path(path: PathBuf) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => Path::new(&dir).join(path.file_name().unwrap_or(path.as_os_str())),
        _ => path,
    }
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            std::fs::create_dir_all(p).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("configuration serializes")
}

fn synth(transmission: &Path, reflection: &Path, out: PathBuf, cfg: &ConfigArgs, verbose: bool) -> Result<(), Failure> {
    let synth_cfg: SynthConfig =
        config::layer(&SynthConfig::default(), cfg.config.as_deref(), &cfg.set).map_err(Failure::Usage)?;
    synth_cfg.validate()?;
    if verbose {
        eprintln!("{}", pretty(&synth_cfg));
    }
    let out = match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => out,
    };
    let dataset = generate_dataset(transmission, reflection, &synth_cfg, &out)?;
    println!(
        "synthesized {} samples ({} train, {} test) into {}",
        dataset.len(),
        dataset.train.samples.len(),
        dataset.test.samples.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(
    profile: &str,
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    log: Option<PathBuf>,
    cfg: &ConfigArgs,
    verbose: bool,
) -> Result<(), Failure> {
    let profile = Profile::from_name(profile)
        .ok_or_else(|| Failure::Usage(format!("unknown profile `{profile}` (expected desk, smoke or paper)")))?;
    let (train_base, model_base) = profile.configs();
    let base = TrainJob {
        train: train_base,
        model: model_base,
    };
    let mut job: TrainJob = config::layer(&base, cfg.config.as_deref(), &cfg.set).map_err(Failure::Usage)?;
    let t = &mut job.train;
    if let Some(m) = manifest {
        t.manifest = m;
    }
    let ckpt = checkpoint
        .or(t.checkpoint_path.take())
        .unwrap_or_else(|| "model.ckpt".into());
    let log_path = log.or(t.log_path.take()).unwrap_or_else(|| "train_log.ndjson".into());
    t.checkpoint_path = Some(output_path(ckpt));
    t.log_path = Some(output_path(log_path));
    t.validate()?;
    job.model.validate()?;
    if profile == Profile::Paper {
        eprintln!("warning: the paper profile needs GPU-scale compute; expect a very long run");
    }
    if verbose {
        eprintln!("{}", pretty(&job));
    }
    for p in [&job.train.checkpoint_path, &job.train.log_path].into_iter().flatten() {
        ensure_parent(p)?;
    }
    let outcome = train(&job.train, &job.model)?;
    let steps = &outcome.log.steps;
    if verbose {
        for (e, m) in outcome.log.epoch_mean_loss.iter().enumerate() {
            eprintln!("epoch {e}: mean loss {m:.6}");
        }
    }
    println!(
        "trained {} steps in {:.1} s; loss {:.6} -> {:.6}; checkpoint {}",
        steps.len(),
        outcome.log.wall_time_ms as f64 / 1000.0,
        steps.first().map_or(f64::NAN, |r| r.loss),
        steps.last().map_or(f64::NAN, |r| r.loss),
        job.train.checkpoint_path.as_deref().unwrap_or(Path::new("")).display()
    );
    println!("extractor sha256 {}", outcome.log.extractor_checksum);
    Ok(())
}

fn infer(checkpoint: &Path, input: &Path, output: PathBuf) -> Result<(), Failure> {
    let net = load_checkpoint(checkpoint)?;
    let img = read_png(input)?;
    let start = Instant::now();
    let out = net.infer(&img)?;
    let elapsed = start.elapsed();
    let output = output_path(output);
    ensure_parent(&output)?;
    write_png(&out, &output)?;
    let (h, w) = out.dims();
    println!("wrote {} ({w}x{h}) in {} ms", output.display(), elapsed.as_millis());
    Ok(())
}

fn fmt_db(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.2} dB"))
}

fn eval_cmd(checkpoint: &Path, manifest: &Path, report: PathBuf) -> Result<(), Failure> {
    let net = load_checkpoint(checkpoint)?;
    let rep = evaluate(&net, manifest)?;
    let report = output_path(report);
    ensure_parent(&report)?;
    rep.save(&report)?;
    println!(
        "mean PSNR {} (baseline {}) over {} samples, {} failed; report {}",
        fmt_db(rep.mean_psnr),
        fmt_db(rep.baseline_mean_psnr),
        rep.num_samples,
        rep.num_failed,
        report.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            transmission,
            reflection,
            out,
            cfg,
        } => synth(&transmission, &reflection, out, &cfg, cli.verbose),
        Command::Train {
            profile,
            manifest,
            checkpoint,
            log,
            cfg,
        } => train_cmd(&profile, manifest, checkpoint, log, &cfg, cli.verbose),
        Command::Infer {
            checkpoint,
            input,
            output,
        } => infer(&checkpoint, &input, output),
        Command::Eval {
            checkpoint,
            manifest,
            report,
        } => eval_cmd(&checkpoint, &manifest, report),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
