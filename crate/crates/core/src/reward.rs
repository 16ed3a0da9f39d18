//! Trajectory scoring: validity classification, the gradient format score,
//! rule-based and judged answer matching, and the composite reward
//!
//! ```text
//! total = accuracy * (a + b * tool_gain) + c * format
//! ```
//!
//! with accuracy and tool_gain binary. The tool-gain term pays a bonus only
//! when a correct answer used at least one successful tool call, which is
//! the incentive that keeps tool use alive during training.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoint::{ChatEndpoint, EndpointError, SamplingParams};
use crate::message::{Message, Role, Segment};
use crate::protocol::{ViolationClass, ViolationFlag};
use crate::runtime::{RunLimits, Trajectory};

/// Score deducted per violation class present in a trajectory.
pub const VIOLATION_DEDUCTION: f64 = 0.25;

/// How a trajectory terminated, and whether it may train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    /// Exceeded the tool-interaction limit.
    InvalidMaxTurns,
    /// Exceeded the cumulative response-token limit.
    InvalidMaxLength,
    /// The turn stream ended without a final answer.
    InvalidNoAnswer,
}

impl Validity {
    pub fn is_valid(self) -> bool {
        self == Validity::Valid
    }
}

/// Classify a terminated trajectory. When several causes co-occur the most
/// structural one wins: turns, then length, then missing answer.
pub fn classify_validity(trajectory: &Trajectory, limits: &RunLimits) -> Validity {
    if trajectory.interactions_used > limits.max_interactions {
        Validity::InvalidMaxTurns
    } else if trajectory.completion_tokens > limits.max_response_tokens {
        Validity::InvalidMaxLength
    } else if trajectory.final_answer.is_none() {
        Validity::InvalidNoAnswer
    } else {
        Validity::Valid
    }
}

// ---------------------------------------------------------------------------
// Format score
// ---------------------------------------------------------------------------

/// Format score from an explicit flag set: start at 1.0, deduct 0.25 per
/// violation class present, floor at 0. Several flags of one class deduct
/// once.
pub fn format_score_from_flags(flags: &BTreeSet<ViolationFlag>) -> f64 {
    let classes: BTreeSet<ViolationClass> = flags.iter().map(|f| f.class()).collect();
    (1.0 - VIOLATION_DEDUCTION * classes.len() as f64).max(0.0)
}

/// Format score of a trajectory: its accumulated per-turn flags, plus a
/// missing-answer violation when the episode never answered.
pub fn format_score(trajectory: &Trajectory) -> f64 {
    let mut flags = trajectory.violation_flags.clone();
    if trajectory.final_answer.is_none() {
        flags.insert(ViolationFlag::MissingAnswer);
    }
    format_score_from_flags(&flags)
}

// ---------------------------------------------------------------------------
// Answer matching
// ---------------------------------------------------------------------------

/// The gold answer and how to check a candidate against it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerKey {
    /// Match on the leading option letter (case-insensitive).
    MultipleChoice { gold: String },
    /// Normalized exact match: lowercase, whitespace collapsed, trailing
    /// punctuation stripped.
    FreeText { gold: String },
    /// Agreement decided by a judge endpoint with a yes/no rubric.
    Judged { gold: String },
}

/// Normalize free text for exact matching.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', '!', '?'])
        .trim()
        .to_lowercase()
}

/// Extract the leading option letter of a candidate answer: skips wrapping
/// punctuation, accepts one ASCII letter not followed by another alphanumeric
/// character ("B", "(b)", "B. because" all yield `b`; "Banana" yields none).
pub fn leading_option_letter(text: &str) -> Option<char> {
    let trimmed = text.trim_start().trim_start_matches(['(', '[', '*', '"']);
    let mut chars = trimmed.chars();
    let letter = chars.next()?;
    if !letter.is_ascii_alphabetic() {
        return None;
    }
    match chars.next() {
        Some(next) if next.is_alphanumeric() => None,
        _ => Some(letter.to_ascii_lowercase()),
    }
}

/// Rule-based accuracy for the rule-checkable key kinds. `None` means the
/// key needs a judge.
pub fn rule_based_accuracy(candidate: &str, key: &AnswerKey) -> Option<bool> {
    match key {
        AnswerKey::MultipleChoice { gold } => {
            let gold_letter = leading_option_letter(gold)?;
            Some(leading_option_letter(candidate) == Some(gold_letter))
        }
        AnswerKey::FreeText { gold } => {
            Some(!normalize_answer(gold).is_empty()
                && normalize_answer(candidate) == normalize_answer(gold))
        }
        AnswerKey::Judged { .. } => None,
    }
}

/// Fixed yes/no rubric given to the judge endpoint.
pub fn judge_rubric(question: &str, gold: &str, candidate: &str) -> String {
    format!(
        "You are grading an answer to a visual question.\n\
         Question: {question}\n\
         Reference answer: {gold}\n\
         Candidate answer: {candidate}\n\
         Does the candidate answer mean the same thing as the reference \
         answer? Reply with exactly one word: yes or no."
    )
}

/// Parse a judge verdict. Ambiguous output is treated as disagreement and
/// reported to the caller via the bool in the pair (true = ambiguous).
fn parse_judge_verdict(text: &str) -> (bool, bool) {
    let first = text
        .trim()
        .to_lowercase()
        .split(|c: char| !c.is_ascii_alphabetic())
        .find(|w| !w.is_empty())
        .map(str::to_string);
    match first.as_deref() {
        Some("yes") => (true, false),
        Some("no") => (false, false),
        _ => (false, true),
    }
}

// ---------------------------------------------------------------------------
// Composite reward
// ---------------------------------------------------------------------------

/// Coefficients of the composite reward: `accuracy` scales the base accuracy
/// term (a), `tool_bonus` the tool-gain multiplier (b), `format` the format
/// score (c).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub accuracy: f64,
    pub tool_bonus: f64,
    pub format: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            accuracy: 1.0,
            tool_bonus: 0.5,
            format: 0.1,
        }
    }
}

/// The scored components of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardBreakdown {
    /// Binary accuracy, 0.0 or 1.0.
    pub accuracy: f64,
    /// Format score in [0, 1].
    pub format: f64,
    /// 1.0 iff at least one tool call succeeded.
    pub tool_gain: f64,
    pub weights: RewardWeights,
    /// accuracy * (a + b * tool_gain) + c * format.
    pub total: f64,
}

/// The reward formula in isolation.
pub fn reward_total(accuracy: f64, tool_gain: f64, format: f64, weights: &RewardWeights) -> f64 {
    accuracy * (weights.accuracy + weights.tool_bonus * tool_gain) + weights.format * format
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("answer key requires a judge endpoint but none is configured")]
    JudgeRequired,
    #[error("judge endpoint failed: {0}")]
    JudgeFailed(#[from] EndpointError),
}

/// Whether any tool call in the trajectory succeeded.
pub fn tool_gain(trajectory: &Trajectory) -> f64 {
    if trajectory.tool_events.iter().any(|e| e.is_ok()) {
        1.0
    } else {
        0.0
    }
}

/// Score one terminated trajectory against its answer key. Rule-checkable
/// keys never touch the judge; `Judged` keys require one.
pub fn compute_reward(
    trajectory: &Trajectory,
    key: &AnswerKey,
    judge: Option<&dyn ChatEndpoint>,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let accuracy = match &trajectory.final_answer {
        None => 0.0,
        Some(candidate) => match rule_based_accuracy(candidate, key) {
            Some(correct) => {
                if correct {
                    1.0
                } else {
                    0.0
                }
            }
            None => {
                let judge = judge.ok_or(RewardError::JudgeRequired)?;
                let AnswerKey::Judged { gold } = key else {
                    unreachable!("only judged keys lack a rule check")
                };
                let prompt = judge_rubric(&trajectory.question, gold, candidate);
                let response = judge.chat(
                    &[Message::new(Role::User, vec![Segment::text(prompt)])],
                    &SamplingParams {
                        temperature: 0.0,
                        max_new_tokens: 16,
                        seed: None,
                    },
                )?;
                let (agree, ambiguous) = parse_judge_verdict(&response.text);
                if ambiguous {
                    log::warn!(
                        "prompt {}: ambiguous judge verdict {:?}, scoring 0",
                        trajectory.prompt_id,
                        response.text
                    );
                }
                if agree {
                    1.0
                } else {
                    0.0
                }
            }
        },
    };
    let format = format_score(trajectory);
    let gain = tool_gain(trajectory);
    Ok(RewardBreakdown {
        accuracy,
        format,
        tool_gain: gain,
        weights: *weights,
        total: reward_total(accuracy, gain, format, weights),
    })
}
