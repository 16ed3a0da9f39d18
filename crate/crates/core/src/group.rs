//! Two-level masking and group-relative advantages.
//!
//! Action level: only assistant-generated text may carry gradient; tool
//! results, the system prompt, user content, and corrective notices are
//! masked. Trajectory level: invalid episodes are excluded both from the
//! policy update and from the group statistics their siblings normalize
//! against, so a degenerate rollout cannot skew its group's baseline.

use thiserror::Error;

use crate::message::{Role, Segment};
use crate::runtime::Trajectory;

/// Epsilon added to the population standard deviation when normalizing.
pub const ADVANTAGE_EPSILON: f64 = 1e-6;

/// Per-message trainable flags with per-segment byte spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionMask {
    /// One flag per message: may this message train?
    pub trainable: Vec<bool>,
    /// Parallel to messages; for each segment of each message, the byte
    /// range of trainable text (`None` for masked content and images).
    pub spans: Vec<Vec<Option<(usize, usize)>>>,
}

impl ActionMask {
    /// All-false mask of the same shape, for trajectory-level exclusion.
    pub fn masked_out(&self) -> ActionMask {
        ActionMask {
            trainable: vec![false; self.trainable.len()],
            spans: self
                .spans
                .iter()
                .map(|segs| vec![None; segs.len()])
                .collect(),
        }
    }
}

/// Build the action-level mask: trainable exactly on assistant messages,
/// with full-text spans on their text segments.
pub fn build_action_mask(trajectory: &Trajectory) -> ActionMask {
    let mut trainable = Vec::with_capacity(trajectory.messages.len());
    let mut spans = Vec::with_capacity(trajectory.messages.len());
    for message in &trajectory.messages {
        let is_assistant = message.role == Role::Assistant;
        trainable.push(is_assistant);
        spans.push(
            message
                .segments
                .iter()
                .map(|segment| match segment {
                    Segment::Text(text) if is_assistant => Some((0, text.len())),
                    _ => None,
                })
                .collect(),
        );
    }
    ActionMask { trainable, spans }
}

/// Group-relative advantages. Over unmasked members,
/// `A_i = (r_i - mean) / (std_pop + epsilon)`; masked members get 0; a
/// group whose unmasked rewards are all equal gets all zeros. An all-masked
/// group degenerates to all zeros with a logged warning.
pub fn group_advantages(rewards: &[f64], trajectory_mask: &[bool]) -> Vec<f64> {
    assert_eq!(
        rewards.len(),
        trajectory_mask.len(),
        "rewards and mask must be parallel"
    );
    let unmasked: Vec<f64> = rewards
        .iter()
        .zip(trajectory_mask)
        .filter(|(_, &keep)| keep)
        .map(|(&r, _)| r)
        .collect();
    if unmasked.is_empty() {
        log::warn!("degenerate group: every member is masked, all advantages 0");
        return vec![0.0; rewards.len()];
    }
    if unmasked.iter().all(|&r| r == unmasked[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = unmasked.len() as f64;
    let mean = unmasked.iter().sum::<f64>() / n;
    let variance = unmasked.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = variance.sqrt() + ADVANTAGE_EPSILON;
    rewards
        .iter()
        .zip(trajectory_mask)
        .map(|(&r, &keep)| if keep { (r - mean) / denom } else { 0.0 })
        .collect()
}

/// Population mean and standard deviation over the unmasked rewards,
/// `(0, 0)` when everything is masked.
pub fn group_stats(rewards: &[f64], trajectory_mask: &[bool]) -> (f64, f64) {
    let unmasked: Vec<f64> = rewards
        .iter()
        .zip(trajectory_mask)
        .filter(|(_, &keep)| keep)
        .map(|(&r, _)| r)
        .collect();
    if unmasked.is_empty() {
        return (0.0, 0.0);
    }
    let n = unmasked.len() as f64;
    let mean = unmasked.iter().sum::<f64>() / n;
    let variance = unmasked.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    (mean, variance.sqrt())
}

#[derive(Debug, Error)]
pub enum GroupError {
    #[error("group is empty")]
    Empty,
    #[error("trajectory {index} has no computed reward")]
    MissingReward { index: usize },
}

/// N rollouts of one prompt with their advantages and masks.
#[derive(Debug, Clone)]
pub struct MaskedGroup {
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    /// true = the member participates in stats and the update.
    pub trajectory_mask: Vec<bool>,
    /// Stats over the unmasked rewards.
    pub reward_mean: f64,
    pub reward_std: f64,
}

/// Assemble a scored group: mask invalid members, compute advantages and
/// stats. Every trajectory must already carry its reward.
pub fn build_masked_group(trajectories: Vec<Trajectory>) -> Result<MaskedGroup, GroupError> {
    if trajectories.is_empty() {
        return Err(GroupError::Empty);
    }
    let mut rewards = Vec::with_capacity(trajectories.len());
    for (index, t) in trajectories.iter().enumerate() {
        rewards.push(t.reward.as_ref().ok_or(GroupError::MissingReward { index })?.total);
    }
    let trajectory_mask: Vec<bool> = trajectories
        .iter()
        .map(|t| t.validity.is_valid())
        .collect();
    let advantages = group_advantages(&rewards, &trajectory_mask);
    let (reward_mean, reward_std) = group_stats(&rewards, &trajectory_mask);
    Ok(MaskedGroup {
        trajectories,
        advantages,
        trajectory_mask,
        reward_mean,
        reward_std,
    })
}
