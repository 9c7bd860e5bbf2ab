//! Command-line driver: data generation, training, evaluation, analysis and
//! rho_norm sweeps, all configured through one `key = value` file.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "oodlab", version, about = "Contribution-truncation training and OOD evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file of `key = value` lines
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides `seed`
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (for `gen`, the data directory)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Model file for `eval` and `analyze`
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,

    /// Extra `key=value` overrides, applied last
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic ID train/test sets and the near, far and noise OOD sets
    Gen,
    /// Train a model and write model.json and train_log.json
    Train,
    /// Evaluate ID accuracy and AUROC/FPR95 per OOD set into report.json
    Eval,
    /// Export contribution patterns and score histograms
    Analyze,
    /// Train one model per rho_norm and keep the best on validation AUROC
    Sweep,
    /// List every config key with its default
    Keys,
}

/// Defaults, then the config file, then `--seed/--out/--model`, then `--set`.
pub fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.load_file(p)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(o) = &cli.out {
        let key = if matches!(cli.command, Command::Gen) { "data.dir" } else { "out" };
        cfg.set(key, &o.to_string_lossy())?;
    }
    if let Some(m) = &cli.model {
        cfg.set("model", &m.to_string_lossy())?;
    }
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Gen => commands::cmd_gen(&cfg).map(drop),
        Command::Train => commands::cmd_train(&cfg).map(drop),
        Command::Eval => commands::cmd_eval(&cfg).map(drop),
        Command::Analyze => commands::cmd_analyze(&cfg).map(drop),
        Command::Sweep => commands::cmd_sweep(&cfg).map(drop),
        Command::Keys => {
            for (k, d, doc) in config::KEYS {
                println!("{k} = {d}    # {doc}");
            }
            Ok(())
        }
    }
}
