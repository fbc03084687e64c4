//! Experiment runner around the `nlayer` library: parses a configuration
//! file, drives the requested computation chain and writes CSV/JSON
//! artifacts together with a run manifest.

pub mod config;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use config::ExperimentConfig;
use nlayer::Error;
use run::RunOptions;

#[derive(Parser, Debug)]
#[command(name = "nlayer", version, about = "Interface-layer solver experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Configuration file (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    pub config: PathBuf,
    /// Output directory (overrides the config's output block).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (recorded in the manifest; computations are
    /// deterministic regardless).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Random seed (recorded in the manifest; all solvers are deterministic,
    /// the seed only feeds optional sampled diagnostics).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Command {
    /// 1D layer profile constants and identity residuals.
    Profile,
    /// Curve geometry, criticality defect and Jacobi data.
    Geometry,
    /// Eigenfield and negative background branch.
    Field,
    /// Interaction distances and resonance classification.
    Toda,
    /// Global ansatz assembly and residual norms.
    Assemble,
    /// Residual decay sweep over the ε list.
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Profile => "profile",
            Command::Geometry => "geometry",
            Command::Field => "field",
            Command::Toda => "toda",
            Command::Assemble => "assemble",
            Command::Sweep => "sweep",
        }
    }
}

/// Exit code contract: 0 success, 2 validation, 3 numerical failure,
/// 4 resonance.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) | Error::InvalidExponent { .. } => 2,
        Error::Resonance(_) => 4,
        _ => 3,
    }
}

pub fn config_hash(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    format!("{:x}", hasher.finalize())
}

/// Load the configuration, resolve the output directory and dispatch.
pub fn execute(cli: &Cli) -> nlayer::Result<()> {
    let text = std::fs::read_to_string(&cli.config).map_err(|e| {
        Error::Validation(format!("cannot read config {}: {e}", cli.config.display()))
    })?;
    let cfg = ExperimentConfig::parse(&text)?;
    let hash = config_hash(&text);
    let out = cli
        .out
        .clone()
        .or_else(|| {
            cfg.output
                .as_ref()
                .and_then(|o| o.directory.as_ref())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from("out"));
    let opts = RunOptions { out, seed: cli.seed, threads: cli.threads };
    match cli.command {
        Command::Profile => run::cmd_profile(&cfg, &hash, &opts),
        Command::Geometry => run::cmd_geometry(&cfg, &hash, &opts),
        Command::Field => run::cmd_field(&cfg, &hash, &opts),
        Command::Toda => run::cmd_toda(&cfg, &hash, &opts),
        Command::Assemble => run::cmd_assemble(&cfg, &hash, &opts),
        Command::Sweep => run::cmd_sweep(&cfg, &hash, &opts),
    }
}
