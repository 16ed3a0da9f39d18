//! Rollout collection: prompts in, trainer-ready export lines out.
//!
//! Each prompt becomes one group: `group_size` sampled trajectories, scored
//! against the prompt's answer key, masked, given group-relative advantages
//! and appended to the export file. Prompts are processed in manifest order
//! so a fixed endpoint and seed reproduce the output byte for byte.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use visloop_core::endpoint::ChatEndpoint;
use visloop_core::export::export_group;
use visloop_core::group::build_masked_group;
use visloop_core::reward::{compute_reward, RewardError};
use visloop_core::runtime::DEFAULT_SYSTEM_PROMPT;
use visloop_core::vision::{load_images, prepare_image_set_with};
use visloop_core::Trajectory;

use crate::config::RunConfig;
use crate::manifest::PromptSpec;

/// Spreads consecutive prompt indices into well-separated seeds.
pub const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RolloutSummary {
    pub prompts: usize,
    pub prompts_failed: usize,
    pub groups_exported: usize,
    pub trajectories: usize,
    pub masked_trajectories: usize,
    pub reward_mean: f64,
    pub valid_fraction: f64,
    pub mean_tool_calls: f64,
}

impl fmt::Display for RolloutSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "prompts: {} ({} failed), groups exported: {}",
            self.prompts, self.prompts_failed, self.groups_exported
        )?;
        writeln!(
            f,
            "trajectories: {} ({} masked), valid fraction: {:.3}",
            self.trajectories, self.masked_trajectories, self.valid_fraction
        )?;
        write!(
            f,
            "reward mean: {:.4}, mean tool calls: {:.2}",
            self.reward_mean, self.mean_tool_calls
        )
    }
}

/// Run one group per prompt and append export lines to `sink`.
pub fn run_rollouts(
    config: &RunConfig,
    prompts: &[PromptSpec],
    endpoint: &dyn ChatEndpoint,
    judge: Option<&dyn ChatEndpoint>,
    sink: &mut dyn Write,
) -> Result<RolloutSummary> {
    let limits = config.limits.to_limits();
    let budget = config.rollout.train_pixel_budget;
    let per_image = config.rollout.per_image_max_pixels.unwrap_or(budget);
    let mut summary = RolloutSummary {
        prompts: prompts.len(),
        ..RolloutSummary::default()
    };
    let mut reward_sum = 0.0;
    let mut valid = 0usize;
    let mut tool_calls = 0usize;

    for (index, prompt) in prompts.iter().enumerate() {
        if index % config.rollout.batch_size == 0 && index > 0 {
            log::info!("rollout progress: {index}/{} prompts", prompts.len());
        }
        let group = match collect_group(config, prompt, index, endpoint, judge, &limits, budget, per_image) {
            Ok(group) => group,
            Err(CollectError::Fatal(e)) => return Err(e),
            Err(CollectError::Skip(reason)) => {
                summary.prompts_failed += 1;
                log::error!("{}: skipped, {reason}", prompt.prompt_id);
                continue;
            }
        };
        for trajectory in &group {
            let reward = trajectory.reward.as_ref().expect("scored above");
            reward_sum += reward.total;
            if trajectory.validity.is_valid() {
                valid += 1;
            } else {
                summary.masked_trajectories += 1;
            }
            tool_calls += trajectory.tool_events.len();
        }
        summary.trajectories += group.len();
        let masked = build_masked_group(group).context("assembling the scored group")?;
        export_group(&masked, index as u64, &prompt.image_paths, sink)
            .with_context(|| format!("exporting group for {}", prompt.prompt_id))?;
        summary.groups_exported += 1;
    }

    if summary.trajectories > 0 {
        summary.reward_mean = reward_sum / summary.trajectories as f64;
        summary.valid_fraction = valid as f64 / summary.trajectories as f64;
        summary.mean_tool_calls = tool_calls as f64 / summary.trajectories as f64;
    }
    Ok(summary)
}

enum CollectError {
    /// This prompt cannot run; later prompts still can.
    Skip(String),
    /// Configuration-level failure; abort the whole command.
    Fatal(anyhow::Error),
}

#[allow(clippy::too_many_arguments)]
fn collect_group(
    config: &RunConfig,
    prompt: &PromptSpec,
    index: usize,
    endpoint: &dyn ChatEndpoint,
    judge: Option<&dyn ChatEndpoint>,
    limits: &visloop_core::RunLimits,
    budget: u64,
    per_image: u64,
) -> Result<Vec<Trajectory>, CollectError> {
    let images = load_images(&prompt.image_paths)
        .map_err(|e| CollectError::Skip(format!("loading images: {e}")))?;
    let image_set = prepare_image_set_with(images, budget, per_image)
        .map_err(|e| CollectError::Skip(format!("preparing images: {e}")))?;
    let seed = config
        .rollout
        .seed
        .wrapping_add((index as u64).wrapping_mul(SEED_STRIDE));
    let params = config.endpoint.sampling(Some(seed));
    let results = visloop_core::run_group(
        &prompt.prompt_id,
        &prompt.question,
        Arc::new(image_set),
        endpoint,
        limits,
        DEFAULT_SYSTEM_PROMPT,
        &params,
        config.rollout.group_size,
    )
    .map_err(|e| CollectError::Skip(format!("running the group: {e}")))?;

    let mut trajectories = Vec::with_capacity(results.len());
    for (member, result) in results.into_iter().enumerate() {
        match result {
            Ok(mut trajectory) => {
                match compute_reward(&trajectory, &prompt.answer, judge, &config.reward) {
                    Ok(breakdown) => trajectory.reward = Some(breakdown),
                    Err(RewardError::JudgeRequired) => {
                        return Err(CollectError::Fatal(judge_required_error(prompt)));
                    }
                    Err(e) => {
                        return Err(CollectError::Skip(format!("scoring member {member}: {e}")));
                    }
                }
                trajectories.push(trajectory);
            }
            Err(e) => {
                log::warn!(
                    "{}: member {member} failed and is dropped from the group: {e}",
                    prompt.prompt_id
                );
            }
        }
    }
    if trajectories.is_empty() {
        return Err(CollectError::Skip("every group member failed".to_string()));
    }
    Ok(trajectories)
}

fn judge_required_error(prompt: &PromptSpec) -> anyhow::Error {
    anyhow::anyhow!(
        "{} uses a judged answer key but no [judge] endpoint is configured",
        prompt.prompt_id
    )
}

/// Convenience wrapper used by tests and main: build endpoints from the
/// config and write to a file path.
pub fn run_rollouts_to_file(
    config: &RunConfig,
    prompts: &[PromptSpec],
    out_path: &std::path::Path,
) -> Result<RolloutSummary> {
    let endpoint = config.endpoint.build()?;
    let judge = match &config.judge {
        Some(judge_config) => Some(judge_config.build()?),
        None => None,
    };
    if prompts
        .iter()
        .any(|p| matches!(p.answer, visloop_core::reward::AnswerKey::Judged { .. }))
        && judge.is_none()
    {
        bail!("the prompt manifest contains judged answers; configure [judge]");
    }
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(out_path)
            .with_context(|| format!("creating {}", out_path.display()))?,
    );
    let summary = run_rollouts(
        config,
        prompts,
        endpoint.as_ref(),
        judge.as_deref(),
        &mut file,
    )?;
    file.flush().context("flushing the export file")?;
    Ok(summary)
}
