//! Command-line front end: configuration, subcommands and run artifacts.

mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_analyze, cmd_compare, cmd_gen_data, cmd_sweep, cmd_train, new_client_rows, pooled, train_into, AnalyzeMode,
    METRICS_HEADER,
};
pub use config::{federation_config, synth_config, ConfigMap, KEYS};
pub use manifest::{load_manifest, verify_outputs, RunManifest};

use crate::Result;

#[derive(Debug, Parser)]
#[command(name = "fedsplit", version, about = "Federated training with shared/personalized unit splits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic federation or partition a pooled dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one federated experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Federation CSV (defaults to the `data.path` key).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Post-hoc diagnostics on a finished run directory.
    Analyze {
        run: PathBuf,
        #[arg(long)]
        mode: AnalyzeMode,
        /// Extra keys overriding the run's resolved configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge run metrics, or run the grid in a sweep config.
    Compare {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sweep config with `sweep.<key> = a | b | ...` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// List every configuration key with its default.
    Keys,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train { config, data, out, workers } => cmd_train(&config, data.as_deref(), &out, workers).map(|_| ()),
        Command::Analyze { run, mode, config, out } => cmd_analyze(&run, mode, config.as_deref(), out.as_deref()),
        Command::Compare { runs, out, config, data, workers } => match (runs.is_empty(), config) {
            (true, Some(cfg)) => cmd_sweep(&cfg, data.as_deref(), &out, workers),
            (false, None) => cmd_compare(&runs, &out),
            (false, Some(_)) => Err(crate::error::contract("give either run directories or a sweep --config, not both")),
            (true, None) => Err(crate::error::contract("compare needs run directories or a sweep --config")),
        },
        Command::Keys => {
            for (k, d, help) in KEYS {
                println!("{k} = {d}    # {help}");
            }
            Ok(())
        }
    }
}
