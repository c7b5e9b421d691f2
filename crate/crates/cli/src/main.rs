use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use refflow::commands::{self, CommandError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "refflow", version, about = "Reference-conditioned audio-video flow matching toolkit")]
struct Cli {
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the reference adapters on synthetic paired latents.
    Train(TrainArgs),
    /// Generate one video/audio latent pair from a checkpoint.
    Sample(SampleArgs),
    /// Finite-difference check of every trainable gradient.
    Gradcheck(GradcheckArgs),
    /// Filter a JSON Lines clip manifest.
    Filter(FilterArgs),
    /// Measure conditioning strength of a trained checkpoint.
    EvalSeparation(EvalArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Sets both contrastive weights.
    #[arg(long)]
    lambda_cl: Option<f64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    identity: Option<usize>,
    #[arg(long)]
    timbre: Option<usize>,
    #[arg(long)]
    text_id: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    scale_video: Option<f64>,
    #[arg(long)]
    scale_audio: Option<f64>,
    #[arg(long)]
    unconditional: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Negate the LoRA gradients before comparing.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Manifest path; reads standard input when absent or `-`.
    manifest: Option<PathBuf>,
    /// Rejection report path (default: OUT/rejected.tsv).
    #[arg(long)]
    rejects: Option<PathBuf>,
    #[arg(long)]
    speakers: Option<u32>,
    #[arg(long)]
    max_offset: Option<i64>,
    #[arg(long)]
    min_confidence: Option<f64>,
    #[arg(long)]
    min_aesthetic: Option<f64>,
    #[arg(long)]
    min_duration: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    heldout_batches: Option<usize>,
    #[arg(long)]
    sample_steps: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CommandError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    match &cli.command {
        Command::Train(a) => {
            set(&mut cfg.train.steps, a.steps);
            set(&mut cfg.train.optimizer.lr, a.lr);
            if let Some(l) = a.lambda_cl {
                cfg.train.weights.lambda_identity = l;
                cfg.train.weights.lambda_timbre = l;
            }
        }
        Command::Sample(a) => {
            let s = &mut cfg.sample;
            set(&mut s.identity, a.identity);
            set(&mut s.timbre, a.timbre);
            set(&mut s.text_id, a.text_id);
            set(&mut s.steps, a.steps);
            set(&mut s.scale_video, a.scale_video);
            set(&mut s.scale_audio, a.scale_audio);
            s.unconditional |= a.unconditional;
        }
        Command::Gradcheck(a) => cfg.gradcheck.inject_fault |= a.inject_fault,
        Command::Filter(a) => {
            let f = &mut cfg.filter;
            set(&mut f.speakers, a.speakers);
            set(&mut f.max_abs_offset, a.max_offset);
            set(&mut f.min_confidence, a.min_confidence);
            set(&mut f.min_aesthetic, a.min_aesthetic);
            set(&mut f.min_duration_s, a.min_duration);
        }
        Command::EvalSeparation(a) => {
            set(&mut cfg.eval.pairs, a.pairs);
            set(&mut cfg.eval.heldout_batches, a.heldout_batches);
            set(&mut cfg.eval.sample_steps, a.sample_steps);
        }
    }
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn read_manifest(path: Option<&Path>) -> anyhow::Result<String> {
    let mut text = String::new();
    match path {
        Some(p) if p != Path::new("-") => {
            text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        }
        _ => {
            io::stdin().read_to_string(&mut text).context("reading standard input")?;
        }
    }
    Ok(text)
}

/// Runs the command; `Ok(false)` means it completed but reported failure.
fn run(cli: &Cli, cfg: &RunConfig) -> Result<bool, CommandError> {
    let io_err = |e: anyhow::Error| CommandError::Runtime(format!("{e:#}"));
    match &cli.command {
        Command::Train(_) => {
            eprintln!("config {}", cfg.to_json());
            let summary = commands::run_train(cfg, &cli.out)?;
            print_json(&summary).map_err(io_err)?;
            Ok(true)
        }
        Command::Sample(a) => {
            let summary = commands::run_sample(cfg, &a.checkpoint, &cli.out)?;
            print_json(&summary).map_err(io_err)?;
            Ok(true)
        }
        Command::Gradcheck(_) => {
            let report = commands::run_gradcheck(cfg)?;
            print_json(&report).map_err(io_err)?;
            Ok(report.passed)
        }
        Command::Filter(a) => {
            let text = read_manifest(a.manifest.as_deref()).map_err(io_err)?;
            let report = commands::run_filter(&text, &cfg.filter);
            let rejects = match &a.rejects {
                Some(p) => p.clone(),
                None => {
                    fs::create_dir_all(&cli.out)?;
                    cli.out.join("rejected.tsv")
                }
            };
            fs::write(&rejects, commands::rejection_report(&report))?;
            let kept = refflow::datapipe::to_jsonl(report.kept());
            io::stdout().lock().write_all(kept.as_bytes())?;
            for e in report.errors() {
                eprintln!("warning: {e}");
            }
            Ok(!report.has_errors())
        }
        Command::EvalSeparation(a) => {
            let report = commands::run_eval_separation(cfg, &a.checkpoint)?;
            print_json(&report).map_err(io_err)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve(&cli).and_then(|cfg| run(&cli, &cfg));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
