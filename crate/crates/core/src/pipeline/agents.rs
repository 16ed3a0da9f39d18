//! The three QA agents: generation, verification, revision.
//!
//! All three are prompt profiles over the same [`ChatEndpoint`] abstraction,
//! so a scripted endpoint can stand in for any of them. The generator and
//! reviser speak a strict JSON payload; the verifier answers with two
//! pass/fail tokens (answer uniqueness, then reasoning soundness). Anything
//! off-format is handled conservatively: generation retries then rejects,
//! verification treats ambiguity as failure.

use serde::Deserialize;

use crate::endpoint::{ChatEndpoint, SamplingParams};
use crate::message::{Message, Role, Segment};
use crate::protocol::BBox;
use crate::runtime::initial_messages;
use crate::vision::ImageSet;

use super::{ConfidenceRegion, PipelineError, QACandidate, QAStatus, ReasoningStep};

pub const GENERATOR_PROMPT: &str = "\
You write fine-grained visual questions over a set of indexed images. \
Produce one question that can only be answered by inspecting small details, \
ideally across several of the images, with a single unambiguous answer. \
Respond with exactly one JSON object and nothing else:
{\"question\": \"...\", \"answer\": \"...\", \"reasoning_steps\": [{\"step\": \
\"...\", \"image_index\": 0, \"bbox\": [x1, y1, x2, y2]}]}
Each reasoning step describes one inference; when a step relies on a \
specific region, give its image_index and bbox in served-image pixels \
(omit both otherwise). At least one step is required.";

pub const VERIFIER_PROMPT: &str = "\
You check a visual question-answer pair on two axes: (1) uniqueness - the \
answer is the only correct one for the question; (2) soundness - the \
reasoning steps actually support the answer. Reply with exactly two words, \
each pass or fail: first the uniqueness verdict, then the soundness \
verdict. Example replies: \"pass pass\", \"pass fail\", \"fail fail\".";

pub const REVISER_PROMPT: &str = "\
You repair a visual question-answer pair that failed verification. Keep the \
intent, fix the flaw named in the failure reason, and respond with exactly \
one JSON object in the same schema as the original:
{\"question\": \"...\", \"answer\": \"...\", \"reasoning_steps\": [{\"step\": \
\"...\", \"image_index\": 0, \"bbox\": [x1, y1, x2, y2]}]}";

/// Sampling used for all pipeline agents.
pub fn agent_params() -> SamplingParams {
    SamplingParams {
        temperature: 0.7,
        max_new_tokens: 2048,
        seed: None,
    }
}

// ---------------------------------------------------------------------------
// Payload parsing
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireQaPayload {
    question: String,
    answer: String,
    reasoning_steps: Vec<WireStep>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireStep {
    step: String,
    #[serde(default)]
    image_index: Option<usize>,
    #[serde(default)]
    bbox: Option<[i64; 4]>,
}

/// Strip an optional Markdown code fence so payloads survive chatty models.
fn strip_code_fence(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    let rest = rest.strip_suffix("```").unwrap_or(rest);
    rest.trim()
}

/// Parse and validate a generator/reviser payload.
pub fn parse_qa_payload(
    text: &str,
) -> Result<(String, String, Vec<ReasoningStep>), String> {
    let payload: WireQaPayload = serde_json::from_str(strip_code_fence(text))
        .map_err(|e| format!("payload is not the expected JSON object: {e}"))?;
    let question = payload.question.trim().to_string();
    let answer = payload.answer.trim().to_string();
    if question.is_empty() {
        return Err("empty question".to_string());
    }
    if answer.is_empty() {
        return Err("empty answer".to_string());
    }
    if payload.reasoning_steps.is_empty() {
        return Err("no reasoning steps".to_string());
    }
    let mut steps = Vec::with_capacity(payload.reasoning_steps.len());
    for (i, step) in payload.reasoning_steps.into_iter().enumerate() {
        if step.step.trim().is_empty() {
            return Err(format!("reasoning step {i} is empty"));
        }
        let confidence_region = match (step.image_index, step.bbox) {
            (Some(image_index), Some([x1, y1, x2, y2])) => {
                if x1 >= x2 || y1 >= y2 {
                    return Err(format!("reasoning step {i} has a degenerate bbox"));
                }
                Some(ConfidenceRegion {
                    image_index,
                    bbox: BBox::new(x1, y1, x2, y2),
                })
            }
            (None, None) => None,
            _ => {
                return Err(format!(
                    "reasoning step {i} must give image_index and bbox together"
                ));
            }
        };
        steps.push(ReasoningStep {
            step: step.step.trim().to_string(),
            confidence_region,
        });
    }
    Ok((question, answer, steps))
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Ask the generator for one QA pair over an image group. Responses failing
/// the payload schema are retried; after `attempts` total tries the
/// candidate is returned as `Rejected` with the last diagnostic. Endpoint
/// failures propagate.
pub fn generate_qa(
    qa_id: &str,
    source_id: &str,
    image_paths: Vec<String>,
    image_set: &ImageSet,
    generator: &dyn ChatEndpoint,
    attempts: u32,
) -> Result<QACandidate, PipelineError> {
    assert!(attempts >= 1, "at least one generation attempt");
    let instruction = "Generate one fine-grained question over these images \
                       per your instructions.";
    let messages = initial_messages(GENERATOR_PROMPT, instruction, image_set);
    let mut last_diag = String::new();
    for round in 1..=attempts {
        let response = generator.chat(&messages, &agent_params())?;
        match parse_qa_payload(&response.text) {
            Ok((question, answer, steps)) => {
                return Ok(QACandidate {
                    qa_id: qa_id.to_string(),
                    source_id: source_id.to_string(),
                    image_paths,
                    question,
                    answer,
                    reasoning_steps: steps,
                    generation_round: round,
                    status: QAStatus::Draft,
                    history: vec![format!("generated on attempt {round}")],
                    note: None,
                });
            }
            Err(diag) => {
                log::debug!("{qa_id}: generation attempt {round} failed schema: {diag}");
                last_diag = diag;
            }
        }
    }
    Ok(QACandidate {
        qa_id: qa_id.to_string(),
        source_id: source_id.to_string(),
        image_paths,
        question: String::new(),
        answer: String::new(),
        reasoning_steps: Vec::new(),
        generation_round: attempts,
        status: QAStatus::Rejected,
        history: vec![format!("rejected after {attempts} generation attempts")],
        note: Some(format!("schema failure: {last_diag}")),
    })
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail(String),
}

fn render_qa_for_review(qa: &QACandidate) -> String {
    let mut out = format!("Question: {}\nAnswer: {}\nReasoning steps:\n", qa.question, qa.answer);
    for (i, step) in qa.reasoning_steps.iter().enumerate() {
        match &step.confidence_region {
            Some(region) => out.push_str(&format!(
                "{}. {} [image {} region {}]\n",
                i + 1,
                step.step,
                region.image_index,
                region.bbox
            )),
            None => out.push_str(&format!("{}. {}\n", i + 1, step.step)),
        }
    }
    out
}

/// Judge a candidate on answer uniqueness and reasoning soundness. Both
/// axes must pass; ambiguous verifier output fails conservatively.
pub fn verify_answer(
    qa: &QACandidate,
    image_set: &ImageSet,
    verifier: &dyn ChatEndpoint,
) -> Result<Verdict, PipelineError> {
    let messages = initial_messages(VERIFIER_PROMPT, &render_qa_for_review(qa), image_set);
    let response = verifier.chat(&messages, &agent_params())?;
    let tokens: Vec<String> = response
        .text
        .to_lowercase()
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| *w == "pass" || *w == "fail")
        .take(2)
        .map(str::to_string)
        .collect();
    let [uniqueness, soundness] = tokens.as_slice() else {
        return Ok(Verdict::Fail(format!(
            "ambiguous verifier output: {:?}",
            response.text.chars().take(120).collect::<String>()
        )));
    };
    let mut reasons = Vec::new();
    if uniqueness == "fail" {
        reasons.push("answer not unique");
    }
    if soundness == "fail" {
        reasons.push("reasoning unsound");
    }
    if reasons.is_empty() {
        Ok(Verdict::Pass)
    } else {
        Ok(Verdict::Fail(reasons.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// Revision
// ---------------------------------------------------------------------------

/// Alternate revise and verify until the candidate passes or the revision
/// budget runs out. Already-verified input is returned unchanged. Endpoint
/// failures propagate with the partial history kept on the error's QA.
pub fn revise_loop(
    mut qa: QACandidate,
    failure_reason: String,
    image_set: &ImageSet,
    reviser: &dyn ChatEndpoint,
    verifier: &dyn ChatEndpoint,
    max_revisions: u32,
) -> Result<QACandidate, PipelineError> {
    if qa.status == QAStatus::Verified {
        return Ok(qa);
    }
    let mut reason = failure_reason;
    for round in 1..=max_revisions {
        let instruction = format!(
            "{}\nFailure reason: {reason}\nRevise the question-answer pair.",
            render_qa_for_review(&qa)
        );
        let messages = initial_messages(REVISER_PROMPT, &instruction, image_set);
        let response = reviser.chat(&messages, &agent_params())?;
        match parse_qa_payload(&response.text) {
            Ok((question, answer, steps)) => {
                qa.question = question;
                qa.answer = answer;
                qa.reasoning_steps = steps;
                qa.status = QAStatus::Revised(round);
                qa.history.push(format!("revision {round} applied"));
            }
            Err(diag) => {
                qa.history
                    .push(format!("revision {round} off-schema, content kept: {diag}"));
            }
        }
        match verify_answer(&qa, image_set, verifier)? {
            Verdict::Pass => {
                qa.history.push(format!("verified after revision {round}"));
                qa.status = QAStatus::Verified;
                return Ok(qa);
            }
            Verdict::Fail(r) => {
                qa.history.push(format!("verification failed: {r}"));
                reason = r;
            }
        }
    }
    qa.history
        .push(format!("rejected after {max_revisions} revisions"));
    qa.note = Some(reason);
    qa.status = QAStatus::Rejected;
    Ok(qa)
}

/// Full stage-2 flow for one image group: generate, verify, revise.
#[allow(clippy::too_many_arguments)]
pub fn produce_qa(
    qa_id: &str,
    source_id: &str,
    image_paths: Vec<String>,
    image_set: &ImageSet,
    generator: &dyn ChatEndpoint,
    verifier: &dyn ChatEndpoint,
    reviser: &dyn ChatEndpoint,
    generation_attempts: u32,
    max_revisions: u32,
) -> Result<QACandidate, PipelineError> {
    let mut qa = generate_qa(
        qa_id,
        source_id,
        image_paths,
        image_set,
        generator,
        generation_attempts,
    )?;
    if qa.status == QAStatus::Rejected {
        return Ok(qa);
    }
    match verify_answer(&qa, image_set, verifier)? {
        Verdict::Pass => {
            qa.history.push("verified on first pass".to_string());
            qa.status = QAStatus::Verified;
            Ok(qa)
        }
        Verdict::Fail(reason) => {
            qa.history.push(format!("verification failed: {reason}"));
            revise_loop(qa, reason, image_set, reviser, verifier, max_revisions)
        }
    }
}

/// A message stream for ad-hoc single-turn agent calls.
pub fn single_turn(system: &str, user: &str) -> Vec<Message> {
    vec![
        Message::new(Role::System, vec![Segment::text(system)]),
        Message::new(Role::User, vec![Segment::text(user)]),
    ]
}
