//! Final pipeline stage: difficulty calibration and rule-based filtering.
//!
//! Calibration runs each QA through the actual rollout loop several times
//! and keeps only items inside the target difficulty band, so the surviving
//! set is neither saturated nor hopeless for the policy being trained.
//! The rule filter then drops leaked, underspecified, out-of-range and
//! duplicate questions, and samples a fraction of survivors for human
//! review.

use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::endpoint::{ChatEndpoint, SamplingParams};
use crate::reward::normalize_answer;
use crate::runtime::{run_trajectory, RunLimits};
use crate::vision::ImageSet;

use super::{PipelineError, QACandidate};

/// Inclusive range of correct rollouts a QA must land in to be kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyBand {
    pub low: u32,
    pub high: u32,
}

impl Default for DifficultyBand {
    fn default() -> Self {
        DifficultyBand { low: 1, high: 4 }
    }
}

impl DifficultyBand {
    pub fn keeps(&self, correct: u32) -> bool {
        self.low <= correct && correct <= self.high
    }
}

/// Outcome of calibrating one QA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyRecord {
    pub qa_id: String,
    pub rollouts: u32,
    pub correct_count: u32,
    pub kept: bool,
    /// Rollout batches that aborted on an endpoint failure.
    pub failed_attempts: u32,
    /// Set when the retry also failed and the QA was excluded.
    pub excluded_by_failure: bool,
}

/// Everything calibration needs besides the QA itself.
pub struct CalibrationSetup<'a> {
    pub endpoint: &'a dyn ChatEndpoint,
    pub system_prompt: &'a str,
    pub limits: RunLimits,
    pub params: SamplingParams,
    pub rollouts: u32,
    pub band: DifficultyBand,
    pub seed: u64,
}

fn run_rollout_batch(
    qa: &QACandidate,
    image_set: &Arc<ImageSet>,
    setup: &CalibrationSetup,
    seed_base: u64,
) -> Result<u32, PipelineError> {
    let mut correct = 0;
    for i in 0..setup.rollouts {
        let mut params = setup.params.clone();
        params.seed = Some(seed_base.wrapping_add(u64::from(i)));
        let trajectory = run_trajectory(
            &qa.qa_id,
            &qa.question,
            Arc::clone(image_set),
            setup.endpoint,
            &setup.limits,
            setup.system_prompt,
            &params,
        )?;
        let answered_right = trajectory
            .final_answer
            .as_deref()
            .is_some_and(|a| normalize_answer(a) == normalize_answer(&qa.answer));
        if trajectory.validity.is_valid() && answered_right {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Measure how often the policy solves the QA. A batch hitting an endpoint
/// failure is retried once in full; a second failure excludes the QA with
/// a flag instead of propagating.
pub fn calibrate_qa(
    qa: &QACandidate,
    image_set: &Arc<ImageSet>,
    setup: &CalibrationSetup,
) -> DifficultyRecord {
    let mut failed_attempts = 0;
    for attempt in 0..2u64 {
        let seed_base = setup.seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9));
        match run_rollout_batch(qa, image_set, setup, seed_base) {
            Ok(correct_count) => {
                return DifficultyRecord {
                    qa_id: qa.qa_id.clone(),
                    rollouts: setup.rollouts,
                    correct_count,
                    kept: setup.band.keeps(correct_count),
                    failed_attempts,
                    excluded_by_failure: false,
                };
            }
            Err(e) => {
                failed_attempts += 1;
                log::warn!("{}: calibration attempt {} failed: {e}", qa.qa_id, attempt + 1);
            }
        }
    }
    DifficultyRecord {
        qa_id: qa.qa_id.clone(),
        rollouts: setup.rollouts,
        correct_count: 0,
        kept: false,
        failed_attempts,
        excluded_by_failure: true,
    }
}

// ---------------------------------------------------------------------------
// Rule-based filtering
// ---------------------------------------------------------------------------

/// Attrition counts from [`rule_filter`]. Each dropped QA is counted under
/// the first rule it trips, in the order the fields are declared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub answer_leaked: usize,
    pub too_short: usize,
    pub region_out_of_range: usize,
    pub duplicate: usize,
    pub kept: usize,
}

const MIN_QUESTION_WORDS: usize = 8;

fn answer_leaks(question: &str, answer: &str) -> bool {
    let answer = normalize_answer(answer);
    !answer.is_empty() && normalize_answer(question).contains(&answer)
}

fn region_out_of_range(qa: &QACandidate) -> bool {
    qa.reasoning_steps.iter().any(|s| {
        s.confidence_region
            .as_ref()
            .is_some_and(|r| r.image_index >= qa.image_paths.len())
    })
}

/// Drop leaked, underspecified, out-of-range and duplicate questions, then
/// sample `review_rate` of the survivors (seeded) for the review manifest.
/// Returns survivors in input order and the sampled QA ids.
pub fn rule_filter(
    candidates: Vec<QACandidate>,
    review_rate: f64,
    seed: u64,
) -> (Vec<QACandidate>, Vec<String>, FilterStats) {
    assert!((0.0..=1.0).contains(&review_rate), "review_rate in [0, 1]");
    let mut stats = FilterStats {
        input: candidates.len(),
        ..FilterStats::default()
    };
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for qa in candidates {
        if answer_leaks(&qa.question, &qa.answer) {
            stats.answer_leaked += 1;
            log::debug!("{}: dropped, answer leaks into the question", qa.qa_id);
            continue;
        }
        if qa.question.split_whitespace().count() < MIN_QUESTION_WORDS {
            stats.too_short += 1;
            log::debug!("{}: dropped, question under {MIN_QUESTION_WORDS} words", qa.qa_id);
            continue;
        }
        if region_out_of_range(&qa) {
            stats.region_out_of_range += 1;
            log::debug!("{}: dropped, confidence region indexes a missing image", qa.qa_id);
            continue;
        }
        if !seen.insert(normalize_answer(&qa.question)) {
            stats.duplicate += 1;
            log::debug!("{}: dropped, duplicate question", qa.qa_id);
            continue;
        }
        kept.push(qa);
    }
    stats.kept = kept.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let review: Vec<String> = kept
        .iter()
        .filter(|_| rng.random::<f64>() < review_rate)
        .map(|qa| qa.qa_id.clone())
        .collect();
    (kept, review, stats)
}
