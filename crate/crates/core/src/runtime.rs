//! The think–act–iterate loop.
//!
//! [`run_trajectory`] drives one episode: generate a turn, parse it, execute
//! the requested tool (appending its serialized result to the conversation),
//! and repeat until the model answers or a limit trips. [`run_group`] runs
//! N independent rollouts of the same prompt for group-relative advantage
//! computation.
//!
//! Termination is guaranteed: every loop iteration either produces an
//! answer, consumes one interaction from a finite budget, exceeds the
//! response-token budget, or ends the turn stream.

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::endpoint::{ChatEndpoint, EndpointError, SamplingParams};
use crate::message::{ImageSource, Message, Role, Segment};
use crate::protocol::{parse_turn, TurnAction, ViolationFlag};
use crate::reward::{classify_validity, RewardBreakdown, Validity};
use crate::vision::{execute_tool, serialize_tool_result, ImageSet, ToolResult};

/// Default system prompt. Enumerates both visual tools and the turn grammar;
/// override it from config when the serving stack needs different wording.
pub const DEFAULT_SYSTEM_PROMPT: &str = "\
You are a visual reasoning agent. You are given one or more indexed images \
and a question. Reason step by step and inspect the images with tools before \
answering.

Each of your turns must contain your reasoning inside <think>...</think> \
followed by exactly one action:
- a tool call: <tool_call>{\"name\": ..., \"arguments\": {...}}</tool_call>
- or a final answer: <answer>...</answer>

Available tools:
1. zoom_in - crop a region of an image to inspect fine detail. Arguments: \
{\"image_index\": <int>, \"bbox\": [x1, y1, x2, y2], \"label\": \"<what you \
expect to see>\"}. Coordinates are absolute pixels of the image as served, \
origin at the top-left, x1 < x2 and y1 < y2.
2. lookback_reuse - look at a full image again to re-examine it globally. \
Arguments: {\"image_index\": <int>, \"reason\": \"<why you are looking \
back>\"}.

Never put more than one tool call or answer in a turn. When you are \
confident, give the final answer inside <answer>...</answer>; for \
multiple-choice questions answer with the option letter.";

/// Appended (as a user message) after a malformed turn so the model can
/// recover. Fixed text; malformed turns consume an interaction.
pub const CORRECTIVE_NOTICE: &str = "\
Your previous turn was not a valid action. Respond with your reasoning in \
<think>...</think> followed by exactly one <tool_call>{...}</tool_call> or \
one <answer>...</answer> block, and nothing else.";

/// Episode budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunLimits {
    /// Maximum tool interactions (tool calls and malformed turns both count).
    pub max_interactions: u32,
    /// Input-context budget; exceeding it is flagged, not fatal.
    pub max_input_tokens: u64,
    /// Cumulative completion-token budget across all turns.
    pub max_response_tokens: u64,
}

impl Default for RunLimits {
    fn default() -> Self {
        RunLimits {
            max_interactions: 5,
            max_input_tokens: 10_480,
            max_response_tokens: 20_480,
        }
    }
}

impl RunLimits {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_interactions == 0 {
            return Err("max_interactions must be positive".to_string());
        }
        if self.max_input_tokens == 0 {
            return Err("max_input_tokens must be positive".to_string());
        }
        if self.max_response_tokens == 0 {
            return Err("max_response_tokens must be positive".to_string());
        }
        Ok(())
    }
}

/// One complete episode: the conversation, tool events, token accounting,
/// and its validity classification.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub prompt_id: String,
    pub question: String,
    pub image_set: Arc<ImageSet>,
    pub messages: Vec<Message>,
    /// Executed tool calls with their results, in execution order. Each
    /// result carries its source call.
    pub tool_events: Vec<ToolResult>,
    /// Number of assistant turns generated.
    pub turn_count: u32,
    /// Interactions consumed: executed tool calls plus malformed turns.
    pub interactions_used: u32,
    /// Peak input-token estimate (or server-reported prompt size) per turn.
    pub prompt_tokens: u64,
    /// Cumulative completion tokens across all turns.
    pub completion_tokens: u64,
    pub final_answer: Option<String>,
    pub validity: Validity,
    pub reward: Option<RewardBreakdown>,
    /// Union of per-turn format violations. Trajectory-level violations
    /// (a missing answer) are added by the format scorer.
    pub violation_flags: BTreeSet<ViolationFlag>,
    /// Tool emissions whose pixel count exceeded per_image_max_pixels.
    /// Zero under default budgets; nonzero values indicate misconfiguration.
    pub budget_violations: u32,
    /// Turns whose estimated input size exceeded max_input_tokens. History
    /// is still sent in full; the flag surfaces context pressure.
    pub truncation_events: u32,
}

impl Trajectory {
    /// Messages the policy update may train on: assistant turns only.
    pub fn assistant_messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.role == Role::Assistant)
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    /// The endpoint failed (post-retry). Distinguished from policy behavior
    /// so infra noise is never classified as an invalid trajectory.
    #[error("endpoint failure on turn {turn}: {source}")]
    Endpoint {
        turn: u32,
        #[source]
        source: EndpointError,
    },
    #[error("group size must be at least 1")]
    EmptyGroup,
    #[error("all {count} rollouts failed; first error: {first}")]
    AllRolloutsFailed { count: usize, first: String },
}

// ---------------------------------------------------------------------------
// Token estimation
// ---------------------------------------------------------------------------

/// Fallback text-token estimate: ceil(bytes / 4).
pub fn estimate_text_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

/// Fallback image-token estimate: one token per 28x28 patch,
/// ceil(W/28) x ceil(H/28).
pub fn estimate_image_tokens(width: u32, height: u32) -> u64 {
    u64::from(width.div_ceil(28)) * u64::from(height.div_ceil(28))
}

/// Estimate the token count of a segment list. Monotone in the list: every
/// segment contributes a non-negative amount.
pub fn count_tokens(segments: &[Segment]) -> u64 {
    segments
        .iter()
        .map(|segment| match segment {
            Segment::Text(text) => estimate_text_tokens(text),
            Segment::Image(img) => estimate_image_tokens(img.width(), img.height()),
        })
        .sum()
}

fn count_conversation_tokens(messages: &[Message]) -> u64 {
    messages.iter().map(|m| count_tokens(&m.segments)).sum()
}

// ---------------------------------------------------------------------------
// Episode construction
// ---------------------------------------------------------------------------

/// Initial conversation: the system prompt, then one user message holding
/// each indexed image (labeled `Image N:`) and the question.
pub fn initial_messages(system_prompt: &str, question: &str, image_set: &ImageSet) -> Vec<Message> {
    let mut user_segments = Vec::with_capacity(image_set.len() * 2 + 1);
    for (index, image) in image_set.images().iter().enumerate() {
        user_segments.push(Segment::text(format!("Image {index}:")));
        user_segments.push(Segment::image(
            ImageSource::Input { index },
            Arc::clone(&image.served),
        ));
    }
    user_segments.push(Segment::text(question));
    vec![
        Message::new(Role::System, vec![Segment::text(system_prompt)]),
        Message::new(Role::User, user_segments),
    ]
}

/// Run one episode to termination. See the module docs for the loop shape.
///
/// The endpoint is trusted to have performed its own transport retries; an
/// error here aborts the trajectory with [`RuntimeError::Endpoint`].
pub fn run_trajectory(
    prompt_id: &str,
    question: &str,
    image_set: Arc<ImageSet>,
    endpoint: &dyn ChatEndpoint,
    limits: &RunLimits,
    system_prompt: &str,
    params: &SamplingParams,
) -> Result<Trajectory, RuntimeError> {
    let mut messages = initial_messages(system_prompt, question, &image_set);
    let mut trajectory = Trajectory {
        prompt_id: prompt_id.to_string(),
        question: question.to_string(),
        image_set: Arc::clone(&image_set),
        messages: Vec::new(),
        tool_events: Vec::new(),
        turn_count: 0,
        interactions_used: 0,
        prompt_tokens: 0,
        completion_tokens: 0,
        final_answer: None,
        validity: Validity::InvalidNoAnswer,
        reward: None,
        violation_flags: BTreeSet::new(),
        budget_violations: 0,
        truncation_events: 0,
    };

    loop {
        let input_estimate = count_conversation_tokens(&messages);
        if input_estimate > limits.max_input_tokens {
            trajectory.truncation_events += 1;
            log::warn!(
                "prompt {prompt_id}: input estimate {input_estimate} exceeds limit {}",
                limits.max_input_tokens
            );
        }

        let response = endpoint
            .chat(&messages, params)
            .map_err(|source| RuntimeError::Endpoint {
                turn: trajectory.turn_count,
                source,
            })?;

        match response.usage {
            Some(usage) => {
                trajectory.prompt_tokens = trajectory.prompt_tokens.max(usage.prompt_tokens);
                trajectory.completion_tokens += usage.completion_tokens;
            }
            None => {
                trajectory.prompt_tokens = trajectory.prompt_tokens.max(input_estimate);
                trajectory.completion_tokens += estimate_text_tokens(&response.text);
            }
        }

        if response.text.is_empty() {
            // End of the turn stream without an action.
            break;
        }

        let parsed = parse_turn(&response.text);
        messages.push(Message::new(
            Role::Assistant,
            vec![Segment::text(parsed.raw.clone())],
        ));
        trajectory.turn_count += 1;
        trajectory
            .violation_flags
            .extend(parsed.violation_flags.iter().copied());

        let over_length = trajectory.completion_tokens > limits.max_response_tokens;

        match parsed.action {
            TurnAction::FinalAnswer(answer) => {
                trajectory.final_answer = Some(answer);
                break;
            }
            TurnAction::ToolCall(call) => {
                trajectory.interactions_used += 1;
                if trajectory.interactions_used > limits.max_interactions || over_length {
                    break;
                }
                let result = execute_tool(&image_set, &call);
                if result.image_pixels > image_set.per_image_max_pixels() {
                    trajectory.budget_violations += 1;
                    log::warn!(
                        "prompt {prompt_id}: tool emitted {} pixels over the {} cap",
                        result.image_pixels,
                        image_set.per_image_max_pixels()
                    );
                }
                let segments = serialize_tool_result(&result, trajectory.tool_events.len());
                messages.push(Message::new(Role::Tool, segments));
                trajectory.tool_events.push(result);
            }
            TurnAction::Malformed(_) => {
                trajectory.interactions_used += 1;
                if trajectory.interactions_used > limits.max_interactions || over_length {
                    break;
                }
                messages.push(Message::new(
                    Role::User,
                    vec![Segment::text(CORRECTIVE_NOTICE)],
                ));
            }
        }

        if over_length {
            break;
        }
    }

    trajectory.messages = messages;
    trajectory.validity = classify_validity(&trajectory, limits);
    Ok(trajectory)
}

/// Run `n_rollouts` independent episodes of one prompt. Seeds derive from
/// `params.seed` by member offset so members sample independently. Order is
/// preserved; per-member failures are reported in place. Errors if every
/// member fails or `n_rollouts` is zero.
pub fn run_group(
    prompt_id: &str,
    question: &str,
    image_set: Arc<ImageSet>,
    endpoint: &dyn ChatEndpoint,
    limits: &RunLimits,
    system_prompt: &str,
    params: &SamplingParams,
    n_rollouts: usize,
) -> Result<Vec<Result<Trajectory, RuntimeError>>, RuntimeError> {
    if n_rollouts == 0 {
        return Err(RuntimeError::EmptyGroup);
    }
    let mut members = Vec::with_capacity(n_rollouts);
    for member in 0..n_rollouts {
        let mut member_params = params.clone();
        member_params.seed = params.seed.map(|s| s.wrapping_add(member as u64));
        members.push(run_trajectory(
            prompt_id,
            question,
            Arc::clone(&image_set),
            endpoint,
            limits,
            system_prompt,
            &member_params,
        ));
    }
    if members.iter().all(Result::is_err) {
        let first = members
            .iter()
            .find_map(|m| m.as_ref().err())
            .map(ToString::to_string)
            .unwrap_or_default();
        return Err(RuntimeError::AllRolloutsFailed {
            count: n_rollouts,
            first,
        });
    }
    Ok(members)
}
