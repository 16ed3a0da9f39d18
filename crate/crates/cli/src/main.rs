//! `visloop`: rollout collection, benchmark evaluation, data curation and
//! export auditing for the multi-image tool-use loop.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use visloop_cli::config::RunConfig;
use visloop_cli::curate::{curate, CurateEndpoints};
use visloop_cli::eval::evaluate;
use visloop_cli::manifest::{read_eval_items, read_prompts, read_sources};
use visloop_cli::rollout::run_rollouts_to_file;
use visloop_cli::score::{check_exports, score_exports};

#[derive(Parser)]
#[command(name = "visloop", version, about = "Rollout engine and data pipeline for multi-image tool use")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect rollout groups for every prompt and write trainer exports.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        /// Prompt manifest, one JSON object per line.
        #[arg(long)]
        prompts: PathBuf,
        /// Output export file (overwritten).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a benchmark manifest and print per-subset accuracy.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Benchmark manifest, one JSON object per line.
        #[arg(long)]
        items: PathBuf,
        /// Override [eval].runs, e.g. 3 for run averaging.
        #[arg(long)]
        runs: Option<u32>,
    },
    /// Run the three-stage QA curation pipeline.
    Curate {
        #[arg(long)]
        config: PathBuf,
        /// Source manifest, one JSON object per line.
        #[arg(long)]
        sources: PathBuf,
        /// Output directory for manifests and region crops.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Recompute group advantages from an export file and report drift.
    Score {
        /// Export file to audit.
        #[arg(long)]
        exports: PathBuf,
    },
    /// Validate an export file against the strict schema.
    ExportCheck {
        /// Export file to validate.
        #[arg(long)]
        exports: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Rollout {
            config,
            prompts,
            out,
        } => {
            let config = RunConfig::load(&config)?;
            let prompts = read_prompts(&prompts)?;
            let summary = run_rollouts_to_file(&config, &prompts, &out)?;
            println!("{summary}");
        }
        Command::Evaluate {
            config,
            items,
            runs,
        } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(runs) = runs {
                anyhow::ensure!(runs >= 1, "--runs must be at least 1");
                config.eval.runs = runs;
            }
            let items = read_eval_items(&items)?;
            let endpoint = config.endpoint.build()?;
            let judge = match &config.judge {
                Some(judge_config) => Some(judge_config.build()?),
                None => None,
            };
            let report = evaluate(&config, &items, endpoint.as_ref(), judge.as_deref())?;
            println!("{report}");
        }
        Command::Curate {
            config,
            sources,
            out_dir,
        } => {
            let config = RunConfig::load(&config)?;
            let sources = read_sources(&sources)?;
            let endpoints = CurateEndpoints::from_config(&config)?;
            let report = curate(&config, &sources, &endpoints, &out_dir)?;
            println!("{report}");
        }
        Command::Score { exports } => {
            let report = score_exports(&exports)?;
            println!("{report}");
            anyhow::ensure!(report.is_clean(), "export file is inconsistent");
        }
        Command::ExportCheck { exports } => {
            let records = check_exports(&exports)
                .with_context(|| format!("{} failed validation", exports.display()))?;
            println!("{records} records validate against schema version 1");
        }
    }
    Ok(())
}
