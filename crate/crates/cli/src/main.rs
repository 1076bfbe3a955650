//! One binary, seven subcommands, wired for reproducibility: a TOML config
//! file (overridden by flags) drives every run, the resolved config is
//! echoed to the log, and `--deterministic` pins single-threaded numerics.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latden_core::config::{load_run_config, RunConfig};
use latden_core::error::Error;
use latden_core::par;

mod commands;

#[derive(Parser)]
#[command(name = "latden", version, about = "Latent-domain music denoising workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run config; the README documents the schema. Flags override
    /// file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Cap worker threads (effective once per process).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Force single-threaded numerics for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Degrade a clean corpus into paired training data plus a manifest.
    SynthData(commands::SynthDataArgs),
    /// Pretrain the strided-conv codec on clean audio and freeze it.
    PretrainCodec(commands::PretrainCodecArgs),
    /// Train the latent U-Net denoiser from a manifest.
    Train(commands::TrainArgs),
    /// Denoise one WAV file with a trained checkpoint.
    Denoise(commands::DenoiseArgs),
    /// Score a test-split subset under noisy and denoised conditions.
    Evaluate(commands::EvaluateArgs),
    /// Finite-difference the autodiff ops and a tiny U-Net; nonzero exit on
    /// any mismatch.
    Gradcheck(commands::GradcheckArgs),
    /// Summarize a manifest: splits, degradation kinds, SNR stats.
    InspectManifest(commands::InspectManifestArgs),
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let cfg = match &common.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::InvalidArg("--threads must be >= 1".into()));
        }
        par::set_threads(n);
        if n == 1 {
            par::set_force_sequential(true);
        }
    }
    if cli.common.deterministic {
        par::set_force_sequential(true);
    }
    let cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::SynthData(args) => commands::synth_data(cfg, args),
        Cmd::PretrainCodec(args) => commands::pretrain_codec(cfg, args),
        Cmd::Train(args) => commands::train(cfg, args),
        Cmd::Denoise(args) => commands::denoise(cfg, args),
        Cmd::Evaluate(args) => commands::evaluate(cfg, args),
        Cmd::Gradcheck(args) => commands::gradcheck(cfg, args),
        Cmd::InspectManifest(args) => commands::inspect_manifest(cfg, args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
