//! Command-line front end for `sdeawb-core`: dataset preparation, training,
//! prediction, evaluation, baselines, gradient checks and synthetic data.

pub mod commands;
pub mod config;
pub mod error;
pub mod predictions;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use sdeawb_core::data::Track;
use sdeawb_core::synth::SynthConfig;

use crate::commands::BaselineMethod;
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "sdeawb",
    version,
    about = "Illuminant estimation for auto white balance"
)]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides `model.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Allow replacing existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge trainset1 with the accepted part of trainset2.
    Prepare,
    /// Train the configured model.
    Train,
    /// Predict illuminants for every image of a manifest.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction CSV against a ground-truth CSV.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_parser = parse_track)]
        track: Track,
        /// Also write the report as `metric,value` CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gray World or constant-illuminant predictions.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long)]
        manifest: PathBuf,
        /// Ground truth averaged by `const`.
        #[arg(long)]
        trainset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        /// Restrict to these components (repeatable).
        #[arg(long)]
        component: Vec<String>,
        /// Scale analytic gradients; for testing the checker itself.
        #[arg(long)]
        corrupt_scale: Option<f64>,
        /// Per-component CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        two_illuminant: bool,
    },
}

fn parse_track(s: &str) -> std::result::Result<Track, String> {
    s.parse().map_err(|e: sdeawb_core::AwbError| e.to_string())
}

fn load_config(cli: &Cli) -> Result<config::ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --config".into()))?;
    let mut cfg = config::ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.model.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare => {
            commands::cmd_prepare(&load_config(cli)?, cli.force)?;
        }
        Command::Train => {
            commands::cmd_train(&load_config(cli)?, cli.force)?;
        }
        Command::Predict {
            checkpoint,
            manifest,
            out,
        } => {
            commands::cmd_predict(checkpoint, manifest, out, cli.force)?;
        }
        Command::Eval {
            pred,
            gt,
            track,
            out,
        } => {
            commands::cmd_eval(pred, gt, *track, out.as_deref(), cli.force)?;
        }
        Command::Baseline {
            method,
            manifest,
            trainset,
            out,
        } => {
            commands::cmd_baseline(*method, manifest, trainset.as_deref(), out, cli.force)?;
        }
        Command::Gradcheck {
            component,
            corrupt_scale,
            out,
        } => {
            let seed = match (cli.seed, &cli.config) {
                (Some(s), _) => s,
                (None, Some(_)) => load_config(cli)?.model.seed,
                (None, None) => 0,
            };
            commands::cmd_gradcheck(component, seed, *corrupt_scale, out.as_deref(), cli.force)?;
        }
        Command::Synth {
            out,
            count,
            size,
            two_illuminant,
        } => {
            let cfg = SynthConfig {
                count: *count,
                size: *size,
                two_illuminant: *two_illuminant,
                seed: cli.seed.unwrap_or(0),
                ..SynthConfig::default()
            };
            commands::cmd_synth(out, &cfg, cli.force)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_after_subcommand() {
        let c = Cli::try_parse_from(["sdeawb", "gradcheck", "--seed", "3", "--force"]).unwrap();
        assert_eq!(c.seed, Some(3));
        assert!(c.force);
        assert!(Cli::try_parse_from([
            "sdeawb", "eval", "--pred", "a", "--gt", "b", "--track", "outdoor"
        ])
        .is_err());
    }
}
