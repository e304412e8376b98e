use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nvs_core::diffusion::CondMode;
use nvs_core::pipeline::{configure_determinism, run, RunConfig, Stage};

/// Sparse-view novel view synthesis pipeline.
#[derive(Parser, Debug)]
#[command(name = "nvs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural multi-view dataset.
    GenData(Common),
    /// Train the set-latent scene transformer.
    TrainSrt(Common),
    /// Train the conditional denoiser against the frozen transformer.
    TrainDiffusion(Common),
    /// Distill a neural field per held-out instance.
    Distill(Common),
    /// Write direct sampler and transformer predictions.
    Render(Common),
    /// Score predictions with warp-aligned metrics.
    Eval(Common),
    /// Summarize metrics per context-view count.
    Report(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Conditioning: df_only, slt_only or both.
    #[arg(long)]
    cond: Option<CondMode>,
}

impl Command {
    fn split(&self) -> (Stage, &Common) {
        match self {
            Command::GenData(c) => (Stage::GenData, c),
            Command::TrainSrt(c) => (Stage::TrainSrt, c),
            Command::TrainDiffusion(c) => (Stage::TrainDiffusion, c),
            Command::Distill(c) => (Stage::Distill, c),
            Command::Render(c) => (Stage::Render, c),
            Command::Eval(c) => (Stage::Eval, c),
            Command::Report(c) => (Stage::Report, c),
        }
    }
}

fn load_config(args: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(c) = args.cond {
        cfg.cond = c;
    }
    cfg.resolve();
    Ok(cfg)
}

fn main() -> ExitCode {
    // before any tensor work spins up the thread pool
    let deterministic = configure_determinism();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, common) = cli.command.split();
    let result = load_config(common).and_then(|cfg| {
        log::info!("deterministic mode: {deterministic}");
        Ok(run(&cfg, stage)?)
    });
    match result {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("nvs {}: {e:#}", stage.name());
            ExitCode::FAILURE
        }
    }
}
