//! Benchmark evaluation: one greedy trajectory per item.
//!
//! Accuracy is reported overall and per subset at one decimal place. The
//! default is a single temperature-0 pass; `runs = 3` switches to the mean
//! of three seeded runs for endpoints whose decoding is not reproducible.
//! Items are scored in parallel up to the configured concurrency, with
//! per-item failures counted as incorrect rather than aborting the sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use visloop_core::endpoint::ChatEndpoint;
use visloop_core::reward::{compute_reward, AnswerKey, RewardError};
use visloop_core::runtime::{run_trajectory, DEFAULT_SYSTEM_PROMPT};
use visloop_core::vision::{load_images, prepare_image_set};

use crate::config::RunConfig;
use crate::manifest::EvalItem;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SubsetScore {
    pub items: usize,
    /// Mean per-item accuracy in [0, 1], full precision.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub items: usize,
    pub runs_per_item: u32,
    /// Endpoint or image failures; each failed run scores zero.
    pub failed_runs: usize,
    pub overall_accuracy: f64,
    pub subsets: BTreeMap<String, SubsetScore>,
    pub mean_tool_calls: f64,
    /// Fraction of runs that used at least one successful tool call.
    pub tool_use_rate: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "items: {} ({} run{} each)",
            self.items,
            self.runs_per_item,
            if self.runs_per_item == 1 { "" } else { "s" }
        )?;
        writeln!(f, "overall accuracy: {:.1}%", self.overall_accuracy * 100.0)?;
        for (name, score) in &self.subsets {
            writeln!(
                f,
                "  {name}: {:.1}% (n={})",
                score.accuracy * 100.0,
                score.items
            )?;
        }
        writeln!(f, "mean tool calls per run: {:.2}", self.mean_tool_calls)?;
        writeln!(f, "runs using a tool: {:.1}%", self.tool_use_rate * 100.0)?;
        write!(f, "failed runs: {}", self.failed_runs)
    }
}

struct ItemOutcome {
    accuracy: f64,
    failed_runs: usize,
    tool_calls: usize,
    runs_with_tool: usize,
}

fn evaluate_item(
    config: &RunConfig,
    item: &EvalItem,
    index: usize,
    endpoint: &dyn ChatEndpoint,
    judge: Option<&dyn ChatEndpoint>,
) -> Result<ItemOutcome> {
    let runs = config.eval.runs;
    let mut outcome = ItemOutcome {
        accuracy: 0.0,
        failed_runs: 0,
        tool_calls: 0,
        runs_with_tool: 0,
    };
    let image_set = match load_images(&item.image_paths)
        .and_then(|images| prepare_image_set(images, config.eval.pixel_budget))
    {
        Ok(set) => Arc::new(set),
        Err(e) => {
            log::error!("{}: images unusable, all runs score zero: {e}", item.item_id);
            outcome.failed_runs = runs as usize;
            return Ok(outcome);
        }
    };
    let limits = config.limits.to_limits();
    let mut accuracy_sum = 0.0;
    for run in 0..runs {
        let seed = config
            .eval
            .seed
            .wrapping_add((index as u64).wrapping_mul(crate::rollout::SEED_STRIDE))
            .wrapping_add(u64::from(run));
        let mut params = config.endpoint.sampling(Some(seed));
        params.temperature = config.eval.temperature;
        let trajectory = match run_trajectory(
            &item.item_id,
            &item.question,
            Arc::clone(&image_set),
            endpoint,
            &limits,
            DEFAULT_SYSTEM_PROMPT,
            &params,
        ) {
            Ok(t) => t,
            Err(e) => {
                log::error!("{}: run {run} failed, scored zero: {e}", item.item_id);
                outcome.failed_runs += 1;
                continue;
            }
        };
        outcome.tool_calls += trajectory.tool_events.len();
        if trajectory.tool_events.iter().any(|e| e.is_ok()) {
            outcome.runs_with_tool += 1;
        }
        match compute_reward(&trajectory, &item.answer, judge, &config.reward) {
            Ok(breakdown) => accuracy_sum += breakdown.accuracy,
            Err(RewardError::JudgeRequired) => {
                bail!("{} uses a judged answer key but no [judge] endpoint is configured", item.item_id)
            }
            Err(e) => {
                log::error!("{}: run {run} not judged, scored zero: {e}", item.item_id);
                outcome.failed_runs += 1;
            }
        }
    }
    outcome.accuracy = accuracy_sum / f64::from(runs);
    Ok(outcome)
}

/// Score every item and aggregate accuracy overall and per subset.
pub fn evaluate(
    config: &RunConfig,
    items: &[EvalItem],
    endpoint: &dyn ChatEndpoint,
    judge: Option<&dyn ChatEndpoint>,
) -> Result<EvalReport> {
    if items.is_empty() {
        bail!("the benchmark manifest is empty");
    }
    if items
        .iter()
        .any(|i| matches!(i.answer, AnswerKey::Judged { .. }))
        && judge.is_none()
    {
        bail!("the benchmark manifest contains judged answers; configure [judge]");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.eval.concurrency)
        .build()
        .context("building the evaluation thread pool")?;
    let outcomes: Vec<Result<ItemOutcome>> = pool.install(|| {
        use rayon::prelude::*;
        items
            .par_iter()
            .enumerate()
            .map(|(index, item)| evaluate_item(config, item, index, endpoint, judge))
            .collect()
    });

    let mut report = EvalReport {
        items: items.len(),
        runs_per_item: config.eval.runs,
        ..EvalReport::default()
    };
    let mut accuracy_sum = 0.0;
    let mut tool_calls = 0usize;
    let mut runs_with_tool = 0usize;
    let mut subset_sums: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (item, outcome) in items.iter().zip(outcomes) {
        let outcome = outcome.with_context(|| format!("evaluating {}", item.item_id))?;
        accuracy_sum += outcome.accuracy;
        report.failed_runs += outcome.failed_runs;
        tool_calls += outcome.tool_calls;
        runs_with_tool += outcome.runs_with_tool;
        if let Some(subset) = &item.subset {
            let entry = subset_sums.entry(subset.clone()).or_default();
            entry.0 += 1;
            entry.1 += outcome.accuracy;
        }
    }
    report.overall_accuracy = accuracy_sum / items.len() as f64;
    let total_runs = items.len() * config.eval.runs as usize;
    report.mean_tool_calls = tool_calls as f64 / total_runs as f64;
    report.tool_use_rate = runs_with_tool as f64 / total_runs as f64;
    report.subsets = subset_sums
        .into_iter()
        .map(|(name, (count, sum))| {
            (
                name,
                SubsetScore {
                    items: count,
                    accuracy: sum / count as f64,
                },
            )
        })
        .collect();
    Ok(report)
}
