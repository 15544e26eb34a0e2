mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Command, Ctx};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "dfkd", version, about = "Data-free quantization and distillation pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration; defaults are used for anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of consecutive seeds to run (train, calibrate, distill).
    #[arg(long, global = true, default_value_t = 1)]
    seeds: usize,
    /// Writes every generated sample as a PPM image.
    #[arg(long, global = true)]
    dump_images: bool,
    /// Overrides `model.weights`.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Dataset file for eval, analyze-bias and analyze-tail, or the
    /// distillation set for distill.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Student weights for distill (pre-calibrated) or analyze-tail.
    #[arg(long, global = true)]
    student: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train the teacher on the procedural dataset.
    Train,
    /// Synthesize samples from the teacher's BN statistics.
    Generate,
    /// Quantize the teacher and calibrate activation ranges.
    Calibrate,
    /// Fine-tune a quantized student by distillation.
    Distill,
    /// Top-1 accuracy of a weight file.
    Eval,
    /// Dataset similarity table against the teacher's statistics.
    Measure,
    /// Mean soft and hard predictions over a dataset.
    AnalyzeBias,
    /// Per-class tail degradation of a fine-tuned student.
    AnalyzeTail,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(w) = cli.weights {
        cfg.model.weights = Some(w);
    }
    if matches!(cli.command, Cmd::Distill) {
        if let Some(d) = &cli.data {
            cfg.distill.data = Some(d.clone());
        }
        if let Some(s) = &cli.student {
            cfg.distill.student = Some(s.clone());
        }
    }
    let command = match cli.command {
        Cmd::Train => Command::Train,
        Cmd::Generate => Command::Generate,
        Cmd::Calibrate => Command::Calibrate,
        Cmd::Distill => Command::Distill,
        Cmd::Eval => Command::Eval,
        Cmd::Measure => Command::Measure,
        Cmd::AnalyzeBias => Command::AnalyzeBias,
        Cmd::AnalyzeTail => Command::AnalyzeTail,
    };
    let out = cfg.out.clone();
    let ctx = Ctx {
        cfg,
        seeds: cli.seeds,
        dump_images: cli.dump_images,
        data: cli.data,
        student: cli.student,
    };
    commands::run(command, ctx)?;
    eprintln!("report written to {}", out.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
