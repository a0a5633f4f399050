//! `rwre <experiment> --config <path> [--seed S] [--out DIR]`

mod config;
mod error;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use config::{Experiment, RunConfig};
use error::CliError;
use output::{sha256_hex, OutputDir, OutputRecord};

#[derive(Parser, Debug)]
#[command(name = "rwre", version, about = "Random walks in random media: experiment driver")]
struct Args {
    #[arg(value_enum)]
    experiment: Experiment,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to RWRE_OUT, then the config, then `rwre-out`.
    #[arg(long, env = "RWRE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    tool_version: &'static str,
    core_version: &'static str,
    experiment: Experiment,
    config_sha256: String,
    config: &'a RunConfig,
    outputs: &'a [OutputRecord],
}

fn run(args: Args) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate(args.experiment)?;
    let root = args
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("rwre-out"));
    let mut out = OutputDir::create(root.clone())?;
    experiments::run(args.experiment, &cfg, &mut out)?;
    let resolved = serde_json::to_vec(&cfg)?;
    out.manifest(&Manifest {
        tool: env!("CARGO_PKG_NAME"),
        tool_version: env!("CARGO_PKG_VERSION"),
        core_version: rwre_core::VERSION,
        experiment: args.experiment,
        config_sha256: sha256_hex(&resolved),
        config: &cfg,
        outputs: out.records(),
    })?;
    Ok(root)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(root) => {
            println!("{}", serde_json::json!({ "status": "ok", "out": root.display().to_string() }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
