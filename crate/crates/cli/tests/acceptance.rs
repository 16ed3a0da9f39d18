//! Acceptance gate: ten checks, one test each, every test printing its own
//! pass/fail line with the measured runtime. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines as they
//! complete. Each check also enforces its own runtime budget.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visloop_cli::config::RunConfig;
use visloop_cli::curate::{curate, CurateEndpoints, CurateLayout};
use visloop_cli::manifest::PromptSpec;
use visloop_cli::rollout::run_rollouts_to_file;
use visloop_core::endpoint::{SamplingParams, ScriptedEndpoint};
use visloop_core::export::{assistant_concat, export_group, read_records, trainable_concat};
use visloop_core::group::{build_masked_group, group_advantages};
use visloop_core::pipeline::{
    calibrate_qa, segment_poster, CalibrationSetup, CandidateGroup, ConfidenceRegion,
    DifficultyBand, QACandidate, QAStatus, ReasoningStep, SegmentParams, SourceKind,
};
use visloop_core::protocol::{
    answer_block, parse_turn, render_turn, tool_call_block, BBox, ToolCall, TurnAction,
};
use visloop_core::reward::{
    compute_reward, reward_total, AnswerKey, RewardWeights, Validity,
};
use visloop_core::runtime::{run_trajectory, RunLimits, DEFAULT_SYSTEM_PROMPT};
use visloop_core::vision::{
    execute_tool, prepare_image_set, prepare_image_set_with, zoom_geometry, ImageSet,
};
use visloop_core::{Message, Role};

fn check(index: u32, label: &str, bound: Duration, body: impl FnOnce() + std::panic::UnwindSafe) {
    let start = Instant::now();
    let outcome = catch_unwind(body);
    let elapsed = start.elapsed();
    let verdict = match (&outcome, elapsed <= bound) {
        (Ok(()), true) => "PASS",
        _ => "FAIL",
    };
    println!("criterion {index:>2} ({label}): {verdict} in {elapsed:?} (budget {bound:?})");
    if let Err(panic) = outcome {
        std::panic::resume_unwind(panic);
    }
    assert!(
        elapsed <= bound,
        "criterion {index} overran its {bound:?} budget: {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn flat_image(width: u32, height: u32, base: [u8; 3]) -> image::RgbImage {
    image::RgbImage::from_pixel(width, height, image::Rgb(base))
}

fn small_set() -> Arc<ImageSet> {
    Arc::new(prepare_image_set(vec![flat_image(64, 64, [9, 9, 9])], 4_000_000).unwrap())
}

fn zoom_turn() -> String {
    render_turn(
        "the relevant patch needs a closer look",
        &tool_call_block(&ToolCall::ZoomIn {
            image_index: 0,
            bbox: BBox::new(4, 4, 40, 40),
            label: "corner patch".to_string(),
        }),
    )
}

fn lookback_turn() -> String {
    render_turn(
        "re-checking the full frame before answering",
        &tool_call_block(&ToolCall::LookbackReuse {
            image_index: 0,
            reason: "compare against the whole image".to_string(),
        }),
    )
}

fn answer_turn(answer: &str) -> String {
    render_turn("settled", &answer_block(answer))
}

fn run_scripted(script: Vec<String>, limits: &RunLimits) -> visloop_core::Trajectory {
    let endpoint = ScriptedEndpoint::per_turn(script);
    run_trajectory(
        "acc",
        "What is in the corner patch?",
        small_set(),
        &endpoint,
        limits,
        DEFAULT_SYSTEM_PROMPT,
        &SamplingParams::default(),
    )
    .unwrap()
}

fn checker_block(
    poster: &mut image::RgbImage,
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
) {
    for y in y0..y1 {
        for x in x0..x1 {
            let dark = ((x / 8) + (y / 8)) % 2 == 0;
            let pixel = if dark { [20, 30, 40] } else { [230, 225, 220] };
            poster.put_pixel(x, y, image::Rgb(pixel));
        }
    }
}

fn two_block_poster() -> image::RgbImage {
    let mut poster = flat_image(1200, 2400, [255, 255, 255]);
    checker_block(&mut poster, 50, 50, 1150, 1150);
    checker_block(&mut poster, 50, 1250, 1150, 2350);
    poster
}

fn grid_poster() -> image::RgbImage {
    let mut poster = flat_image(2000, 1500, [255, 255, 255]);
    checker_block(&mut poster, 50, 50, 950, 700);
    checker_block(&mut poster, 1050, 50, 1950, 700);
    checker_block(&mut poster, 50, 800, 950, 1450);
    checker_block(&mut poster, 1050, 800, 1950, 1450);
    poster
}

// ---------------------------------------------------------------------------
// 1. Reward formula table
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_reward_formula_table() {
    check(1, "reward formula table", Duration::from_secs(1), || {
        let weights = RewardWeights::default();
        assert_eq!(weights.accuracy, 1.0);
        assert_eq!(weights.tool_bonus, 0.5);
        assert_eq!(weights.format, 0.1);
        // Hand-derived totals for every combination, written out as the
        // arithmetic itself so the comparison carries zero tolerance.
        let table: [(f64, f64, f64, f64); 20] = [
            (0.0, 0.0, 0.00, 0.0 * (1.0 + 0.5 * 0.0) + 0.1 * 0.00),
            (0.0, 0.0, 0.25, 0.0 * (1.0 + 0.5 * 0.0) + 0.1 * 0.25),
            (0.0, 0.0, 0.50, 0.0 * (1.0 + 0.5 * 0.0) + 0.1 * 0.50),
            (0.0, 0.0, 0.75, 0.0 * (1.0 + 0.5 * 0.0) + 0.1 * 0.75),
            (0.0, 0.0, 1.00, 0.0 * (1.0 + 0.5 * 0.0) + 0.1 * 1.00),
            (0.0, 1.0, 0.00, 0.0 * (1.0 + 0.5 * 1.0) + 0.1 * 0.00),
            (0.0, 1.0, 0.25, 0.0 * (1.0 + 0.5 * 1.0) + 0.1 * 0.25),
            (0.0, 1.0, 0.50, 0.0 * (1.0 + 0.5 * 1.0) + 0.1 * 0.50),
            (0.0, 1.0, 0.75, 0.0 * (1.0 + 0.5 * 1.0) + 0.1 * 0.75),
            (0.0, 1.0, 1.00, 0.0 * (1.0 + 0.5 * 1.0) + 0.1 * 1.00),
            (1.0, 0.0, 0.00, 1.0 * (1.0 + 0.5 * 0.0) + 0.1 * 0.00),
            (1.0, 0.0, 0.25, 1.0 * (1.0 + 0.5 * 0.0) + 0.1 * 0.25),
            (1.0, 0.0, 0.50, 1.0 * (1.0 + 0.5 * 0.0) + 0.1 * 0.50),
            (1.0, 0.0, 0.75, 1.0 * (1.0 + 0.5 * 0.0) + 0.1 * 0.75),
            (1.0, 0.0, 1.00, 1.0 * (1.0 + 0.5 * 0.0) + 0.1 * 1.00),
            (1.0, 1.0, 0.00, 1.0 * (1.0 + 0.5 * 1.0) + 0.1 * 0.00),
            (1.0, 1.0, 0.25, 1.0 * (1.0 + 0.5 * 1.0) + 0.1 * 0.25),
            (1.0, 1.0, 0.50, 1.0 * (1.0 + 0.5 * 1.0) + 0.1 * 0.50),
            (1.0, 1.0, 0.75, 1.0 * (1.0 + 0.5 * 1.0) + 0.1 * 0.75),
            (1.0, 1.0, 1.00, 1.0 * (1.0 + 0.5 * 1.0) + 0.1 * 1.00),
        ];
        for (accuracy, gain, format, expected) in table {
            let total = reward_total(accuracy, gain, format, &weights);
            assert_eq!(
                total.to_bits(),
                expected.to_bits(),
                "r_acc={accuracy} gain={gain} fmt={format}: {total} != {expected}"
            );
        }
        // Anchor rows whose decimal forms are exactly representable.
        assert_eq!(reward_total(1.0, 1.0, 1.0, &weights), 1.6);
        assert_eq!(reward_total(1.0, 0.0, 1.0, &weights), 1.1);
        assert_eq!(reward_total(0.0, 0.0, 1.0, &weights), 0.1);
    });
}

// ---------------------------------------------------------------------------
// 2. Advantage normalization
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_advantage_normalization() {
    check(2, "advantage normalization", Duration::from_secs(5), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2025);
        for _ in 0..1000 {
            let rewards: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 100.0).collect();
            let mask = vec![true; 8];
            let advantages = group_advantages(&rewards, &mask);
            let mean_r = rewards.iter().sum::<f64>() / 8.0;
            let sigma =
                (rewards.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / 8.0).sqrt();
            let mean_a = advantages.iter().sum::<f64>() / 8.0;
            assert!(mean_a.abs() <= 1e-9, "advantage mean {mean_a}");
            if sigma > 1e-6 {
                let std_a =
                    (advantages.iter().map(|a| a * a).sum::<f64>() / 8.0).sqrt();
                assert!((std_a - 1.0).abs() <= 1e-6, "advantage std {std_a}");
            }
        }
        for constant in [0.0, 0.1, 1.6] {
            let advantages = group_advantages(&[constant; 8], &[true; 8]);
            assert_eq!(advantages, [0.0; 8], "zero-variance group at {constant}");
        }
    });
}

// ---------------------------------------------------------------------------
// 3. Mask soundness over a scripted corpus
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_mask_soundness() {
    check(3, "mask soundness", Duration::from_secs(10), || {
        let limits = RunLimits::default();
        let key = AnswerKey::FreeText {
            gold: "two".to_string(),
        };
        let weights = RewardWeights::default();
        let mut records = Vec::new();
        let mut expected_assistant = Vec::new();
        for group_index in 0..25u64 {
            let mut members = Vec::new();
            for member in 0..4usize {
                let script = match (group_index as usize * 4 + member) % 5 {
                    0 => vec![answer_turn("two")],
                    1 => vec![zoom_turn(), answer_turn("two")],
                    2 => vec!["thinking without any tags".to_string(), answer_turn("three")],
                    3 => vec![lookback_turn(), zoom_turn(), answer_turn("unsure")],
                    _ => vec![String::new()],
                };
                let mut trajectory = run_scripted(script, &limits);
                trajectory.reward =
                    Some(compute_reward(&trajectory, &key, None, &weights).unwrap());
                expected_assistant.push(
                    trajectory
                        .messages
                        .iter()
                        .filter(|m| m.role == Role::Assistant)
                        .map(Message::joined_text)
                        .collect::<Vec<_>>()
                        .join(""),
                );
                members.push(trajectory);
            }
            let group = build_masked_group(members).unwrap();
            let mut buffer = Vec::new();
            export_group(&group, group_index, &["img0.png".to_string()], &mut buffer).unwrap();
            records.extend(read_records(buffer.as_slice()).unwrap());
        }
        assert_eq!(records.len(), 100);
        let mut masked_seen = 0;
        for (record, expected) in records.iter().zip(&expected_assistant) {
            let trainable = trainable_concat(record);
            for message in &record.messages {
                if message.role != Role::Assistant {
                    assert!(!message.trainable, "non-assistant marked trainable");
                    for segment in &message.segments {
                        if let visloop_core::export::ExportSegment::Text { span, .. } = segment {
                            assert!(span.is_none(), "tool-result byte marked trainable");
                        }
                    }
                }
            }
            if record.trajectory_masked {
                masked_seen += 1;
                assert_eq!(record.advantage, 0.0, "masked member with advantage");
                assert!(
                    record.messages.iter().all(|m| !m.trainable),
                    "masked member kept trainable turns"
                );
                assert!(trainable.is_empty(), "masked member kept trainable spans");
            } else {
                assert_eq!(trainable, assistant_concat(record), "span reconstruction");
                assert_eq!(&trainable, expected, "assistant turn bytes");
            }
        }
        assert_eq!(masked_seen, 20, "one masked member per five episodes");
    });
}

// ---------------------------------------------------------------------------
// 4. Validity taxonomy
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_validity_taxonomy() {
    check(4, "validity taxonomy", Duration::from_secs(1), || {
        let limits = RunLimits::default();

        let over_turns = run_scripted(vec![zoom_turn(); 6], &limits);
        assert_eq!(over_turns.validity, Validity::InvalidMaxTurns);

        let tight = RunLimits {
            max_response_tokens: 10,
            ..RunLimits::default()
        };
        let over_length = run_scripted(
            vec![answer_turn(
                "a deliberately long answer that overruns the response budget",
            )],
            &tight,
        );
        assert_eq!(over_length.validity, Validity::InvalidMaxLength);

        let silent = run_scripted(vec![String::new()], &limits);
        assert_eq!(silent.validity, Validity::InvalidNoAnswer);

        let valid = run_scripted(
            vec![zoom_turn(), lookback_turn(), answer_turn("done")],
            &limits,
        );
        assert_eq!(valid.validity, Validity::Valid);
        assert_eq!(valid.tool_events.len(), 2);
        assert!(valid.tool_events.iter().all(|e| e.is_ok()));
    });
}

// ---------------------------------------------------------------------------
// 5. Geometry properties
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_geometry_properties() {
    check(5, "geometry properties", Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut degenerate = 0;
        for _ in 0..10_000 {
            let width = rng.random_range(1..=2000u32);
            let height = rng.random_range(1..=2000u32);
            let x1 = rng.random_range(-3000..3000i64);
            let y1 = rng.random_range(-3000..3000i64);
            let x2 = x1 + rng.random_range(-500..=500i64);
            let y2 = y1 + rng.random_range(-500..=500i64);
            if x2 <= x1 || y2 <= y1 {
                degenerate += 1;
                let raw = format!(
                    "<think>t</think>\n<tool_call>{{\"name\":\"zoom_in\",\
                     \"arguments\":{{\"image_index\":0,\"bbox\":[{x1},{y1},{x2},{y2}],\
                     \"label\":\"x\"}}}}</tool_call>"
                );
                let parsed = parse_turn(&raw);
                assert!(
                    matches!(parsed.action, TurnAction::Malformed(_)),
                    "degenerate box accepted: [{x1},{y1},{x2},{y2}]"
                );
                continue;
            }
            let g = zoom_geometry(BBox::new(x1, y1, x2, y2), width, height);
            assert!(0 <= g.x1 && g.x1 < g.x2 && g.x2 <= i64::from(width), "{g:?}");
            assert!(0 <= g.y1 && g.y1 < g.y2 && g.y2 <= i64::from(height), "{g:?}");
            assert!(g.width() >= i64::from(width.min(28)), "{g:?} under min width");
            assert!(g.height() >= i64::from(height.min(28)), "{g:?} under min height");
        }
        assert!(degenerate > 100, "fuzz draw produced too few degenerate boxes");

        // Identity crops: the full-image box with upscaling capped out
        // returns exactly the served dimensions.
        for (width, height) in [(96u32, 64u32), (28, 28), (333, 500)] {
            let cap = u64::from(width) * u64::from(height);
            let set = prepare_image_set_with(
                vec![flat_image(width, height, [7, 7, 7])],
                4_000_000,
                cap,
            )
            .unwrap();
            let result = execute_tool(
                &set,
                &ToolCall::ZoomIn {
                    image_index: 0,
                    bbox: BBox::new(0, 0, i64::from(width), i64::from(height)),
                    label: "identity".to_string(),
                },
            );
            let crop = result.image.expect("identity crop succeeds");
            assert_eq!((crop.width(), crop.height()), (width, height));
        }

        // Random image sets never exceed their pixel budget.
        for _ in 0..400 {
            let count = rng.random_range(1..=4usize);
            let images: Vec<_> = (0..count)
                .map(|_| {
                    flat_image(
                        rng.random_range(1..=120),
                        rng.random_range(1..=120),
                        [3, 3, 3],
                    )
                })
                .collect();
            let budget = rng.random_range(1..=20_000u64);
            match prepare_image_set(images, budget) {
                Ok(set) => {
                    assert!(set.served_pixel_total() <= budget, "budget exceeded");
                    for served in set.images() {
                        assert!(served.scale > 0.0 && served.scale <= 1.0);
                    }
                }
                Err(_) => assert!(budget < count as u64, "spurious budget failure"),
            }
        }

        // Random well-formed zooms on a real image always produce a crop
        // whose emitted pixel count stays under the per-image cap.
        let set = prepare_image_set(vec![flat_image(200, 150, [50, 90, 130])], 4_000_000).unwrap();
        for _ in 0..300 {
            let x1 = rng.random_range(-40..240i64);
            let y1 = rng.random_range(-40..190i64);
            let call = ToolCall::ZoomIn {
                image_index: 0,
                bbox: BBox::new(
                    x1,
                    y1,
                    x1 + rng.random_range(1..120),
                    y1 + rng.random_range(1..120),
                ),
                label: "patch".to_string(),
            };
            let result = execute_tool(&set, &call);
            assert!(result.is_ok(), "{}", result.message);
            assert!(result.image.is_some());
            assert!(
                result.image_pixels <= set.per_image_max_pixels(),
                "budget assertion fired: {} pixels emitted",
                result.image_pixels
            );
        }
    });
}

// ---------------------------------------------------------------------------
// 6. End-to-end golden run
// ---------------------------------------------------------------------------

const GOLDEN_DIR: &str = "tests/golden";

fn golden_prompts() -> Vec<PromptSpec> {
    vec![PromptSpec {
        prompt_id: "golden-0".to_string(),
        image_paths: vec![
            format!("{GOLDEN_DIR}/img0.png"),
            format!("{GOLDEN_DIR}/img1.png"),
        ],
        question: "Which panel shows the brighter corner patch, A or B?".to_string(),
        answer: AnswerKey::MultipleChoice {
            gold: "B".to_string(),
        },
    }]
}

fn golden_config() -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
        [endpoint]
        kind = "scripted"
        script_path = "{GOLDEN_DIR}/script.jsonl"

        [rollout]
        group_size = 2
        "#
    ))
    .unwrap()
}

fn golden_script() -> Vec<String> {
    vec![
        render_turn(
            "panel A's corner patch needs magnification before comparing",
            &tool_call_block(&ToolCall::ZoomIn {
                image_index: 0,
                bbox: BBox::new(8, 8, 60, 48),
                label: "corner patch of panel A".to_string(),
            }),
        ),
        render_turn(
            "now re-checking panel B as a whole for its brightness",
            &tool_call_block(&ToolCall::LookbackReuse {
                image_index: 1,
                reason: "compare overall brightness against panel A".to_string(),
            }),
        ),
        render_turn("panel B is clearly brighter", &answer_block("B")),
    ]
}

/// Regenerates the checked-in golden fixtures. Run explicitly after an
/// intentional format change:
/// `cargo test --test acceptance regenerate_golden -- --ignored`
#[test]
#[ignore]
fn regenerate_golden() {
    std::fs::create_dir_all(GOLDEN_DIR).unwrap();
    image::RgbImage::from_fn(96, 64, |x, y| {
        if (8..60).contains(&x) && (8..48).contains(&y) {
            image::Rgb([90, 90, 90])
        } else {
            image::Rgb([(x * 2) as u8, 40, (y * 3) as u8])
        }
    })
    .save(format!("{GOLDEN_DIR}/img0.png"))
    .unwrap();
    image::RgbImage::from_fn(80, 80, |_, y| image::Rgb([230, 230, (160 + y) as u8]))
        .save(format!("{GOLDEN_DIR}/img1.png"))
        .unwrap();
    let script: Vec<String> = golden_script()
        .iter()
        .map(|t| serde_json::to_string(t).unwrap())
        .collect();
    std::fs::write(format!("{GOLDEN_DIR}/script.jsonl"), script.join("\n")).unwrap();
    run_rollouts_to_file(
        &golden_config(),
        &golden_prompts(),
        Path::new(&format!("{GOLDEN_DIR}/rollout_export.jsonl")),
    )
    .unwrap();
}

#[test]
fn criterion_06_golden_run() {
    check(6, "end-to-end golden run", Duration::from_secs(5), || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("exports.jsonl");
        run_rollouts_to_file(&golden_config(), &golden_prompts(), &out).unwrap();
        let fresh = std::fs::read(&out).unwrap();
        let golden = std::fs::read(format!("{GOLDEN_DIR}/rollout_export.jsonl"))
            .expect("golden file is checked in");
        assert_eq!(fresh, golden, "export drifted from the golden file");

        let records = read_records(fresh.as_slice()).unwrap();
        assert_eq!(records.len(), 2);
        for record in &records {
            assert_eq!(record.reward.total, 1.6, "golden reward under defaults");
            assert_eq!(record.advantage, 0.0, "identical members share the mean");
            assert!(!record.trajectory_masked);
            assert_eq!(record.tool_events.len(), 2);
        }
    });
}

// ---------------------------------------------------------------------------
// 7. Difficulty band
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_difficulty_band() {
    check(7, "difficulty band", Duration::from_secs(1), || {
        let qa = QACandidate {
            qa_id: "band".to_string(),
            source_id: "band".to_string(),
            image_paths: vec!["img0.png".to_string()],
            question: "What number is written on the small tag?".to_string(),
            answer: "seven".to_string(),
            reasoning_steps: vec![ReasoningStep {
                step: "read the tag".to_string(),
                confidence_region: Some(ConfidenceRegion {
                    image_index: 0,
                    bbox: BBox::new(0, 0, 30, 30),
                }),
            }],
            generation_round: 1,
            status: QAStatus::Verified,
            history: Vec::new(),
            note: None,
        };
        let set = small_set();
        let mut kept = Vec::new();
        for correct in 0..=5u32 {
            let script: Vec<String> = (0..5)
                .map(|i| answer_turn(if i < correct { "seven" } else { "three" }))
                .collect();
            let endpoint = ScriptedEndpoint::sequential(script);
            let setup = CalibrationSetup {
                endpoint: &endpoint,
                system_prompt: DEFAULT_SYSTEM_PROMPT,
                limits: RunLimits::default(),
                params: SamplingParams::default(),
                rollouts: 5,
                band: DifficultyBand::default(),
                seed: 1,
            };
            let record = calibrate_qa(&qa, &set, &setup);
            assert_eq!(record.correct_count, correct);
            if record.kept {
                kept.push(correct);
            }
        }
        assert_eq!(kept, [1, 2, 3, 4], "band keeps only the middle outcomes");
    });
}

// ---------------------------------------------------------------------------
// 8. Parser robustness
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_parser_robustness() {
    check(8, "parser robustness", Duration::from_secs(120), || {
        const FRAGMENTS: &[&str] = &[
            "<think>",
            "</think>",
            "<tool_call>",
            "</tool_call>",
            "<answer>",
            "</answer>",
            r#"{"name":"zoom_in","arguments":{"image_index":0,"bbox":[1,2,30,40],"label":"x"}}"#,
            r#"{"name":"lookback_reuse","arguments":{"image_index":1,"reason":"compare"}}"#,
            r#"{"name":"zoom_in","arguments":{"image_index":-3,"bbox":[9,9,1,1],"label":""}}"#,
            r#"{"name":"teleport","arguments":{}}"#,
            "plain prose between tags",
            "…unicodeガヴ月亮…",
            "<answ",
            "er>",
            "<think><think>",
            "</answer><answer>",
            "{",
            "}",
            "\"",
            "\n\n",
            "B",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let total = 100_000u32;
        let mut parsed = 0u32;
        let mut malformed = 0u32;
        let mut aborts = 0u32;
        for _ in 0..total {
            let pieces = rng.random_range(0..=10usize);
            let mut input = String::new();
            for _ in 0..pieces {
                input.push_str(FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]);
                if rng.random::<f64>() < 0.3 {
                    input.push(' ');
                }
            }
            match catch_unwind(AssertUnwindSafe(|| parse_turn(&input))) {
                Ok(turn) => match turn.action {
                    TurnAction::Malformed(_) => malformed += 1,
                    _ => parsed += 1,
                },
                Err(_) => aborts += 1,
            }
        }
        assert_eq!(aborts, 0, "parser aborted on fuzz input");
        assert_eq!(parsed + malformed, total, "every input must classify");
        assert!(parsed > 0, "fuzz never produced a well-formed turn");
        assert!(malformed > 0, "fuzz never produced a malformed turn");
    });
}

// ---------------------------------------------------------------------------
// 9. Synthetic poster segmentation
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_poster_segmentation() {
    check(9, "poster segmentation", Duration::from_secs(5), || {
        let params = SegmentParams::default();

        let two = segment_poster(&two_block_poster(), &params).unwrap();
        assert_eq!(two.regions.len(), 2, "two-block poster");
        assert_eq!(two.cuts.len(), 1);
        let cut = &two.cuts[0];
        assert!(
            (i64::from(cut.position) - 1200).abs() <= 5,
            "two-block cut at {}",
            cut.position
        );

        let grid = segment_poster(&grid_poster(), &params).unwrap();
        assert_eq!(grid.regions.len(), 4, "grid poster");
        let mut horizontal = 0;
        let mut vertical = 0;
        for cut in &grid.cuts {
            match cut.axis {
                visloop_core::pipeline::segment::CutAxis::Horizontal => {
                    horizontal += 1;
                    assert!(
                        (i64::from(cut.position) - 750).abs() <= 5,
                        "horizontal cut at {}",
                        cut.position
                    );
                }
                visloop_core::pipeline::segment::CutAxis::Vertical => {
                    vertical += 1;
                    assert!(
                        (i64::from(cut.position) - 1000).abs() <= 5,
                        "vertical cut at {}",
                        cut.position
                    );
                }
            }
        }
        assert_eq!((horizontal, vertical), (1, 2));
    });
}

// ---------------------------------------------------------------------------
// 10. Pipeline determinism
// ---------------------------------------------------------------------------

fn curate_fixture(dir: &Path) -> (RunConfig, Vec<CandidateGroup>) {
    let poster_path = dir.join("poster.png");
    two_block_poster().save(&poster_path).unwrap();
    let nat_a = dir.join("nat_a.png");
    let nat_b = dir.join("nat_b.png");
    flat_image(1200, 1000, [40, 80, 120]).save(&nat_a).unwrap();
    flat_image(1100, 1000, [120, 80, 40]).save(&nat_b).unwrap();

    let payload = |question: &str, answer: &str| {
        serde_json::json!({
            "question": question,
            "answer": answer,
            "reasoning_steps": [
                {"step": "compare the two panels", "image_index": 0, "bbox": [8, 8, 200, 160]},
            ],
        })
        .to_string()
    };
    let write_script = |name: &str, turns: &[String]| {
        let path = dir.join(name);
        let lines: Vec<String> = turns
            .iter()
            .map(|t| serde_json::to_string(t).unwrap())
            .collect();
        std::fs::write(&path, lines.join("\n")).unwrap();
        path.display().to_string()
    };

    let generator = write_script(
        "gen.jsonl",
        &[
            payload(
                "Which of the two poster panels sits higher on the page layout?",
                "the checkered panel",
            ),
            payload(
                "Which of the two photographs carries the warmer tint overall?",
                "the second photograph",
            ),
        ],
    );
    let verifier = write_script(
        "verify.jsonl",
        &["pass pass".to_string(), "pass pass".to_string()],
    );
    let right1 = answer_turn("the checkered panel");
    let wrong1 = answer_turn("the plain panel");
    let right2 = answer_turn("the second photograph");
    let wrong2 = answer_turn("the first photograph");
    let policy = write_script(
        "policy.jsonl",
        &[
            // Five calibration rollouts per QA, in stage order.
            right1.clone(),
            wrong1.clone(),
            right1,
            wrong1.clone(),
            wrong1,
            wrong2.clone(),
            right2.clone(),
            right2.clone(),
            wrong2,
            right2,
        ],
    );

    let config = RunConfig::from_toml(&format!(
        r#"
        [endpoint]
        kind = "scripted"
        script_path = {policy:?}
        script_mode = "sequential"

        [pipeline]
        seed = 9
        review_sample_rate = 0.5

        [pipeline.generator]
        kind = "scripted"
        script_path = {generator:?}
        script_mode = "sequential"

        [pipeline.verifier]
        kind = "scripted"
        script_path = {verifier:?}
        script_mode = "sequential"
        "#
    ))
    .unwrap();
    let sources = vec![
        CandidateGroup {
            source_id: "poster0".to_string(),
            kind: SourceKind::Poster,
            image_paths: vec![poster_path.display().to_string()],
        },
        CandidateGroup {
            source_id: "pair0".to_string(),
            kind: SourceKind::NaturalGroup,
            image_paths: vec![nat_a.display().to_string(), nat_b.display().to_string()],
        },
    ];
    (config, sources)
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        for entry in std::fs::read_dir(&current).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let relative = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(relative, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn criterion_10_pipeline_determinism() {
    check(10, "pipeline determinism", Duration::from_secs(30), || {
        let dir = tempfile::tempdir().unwrap();
        let (config, sources) = curate_fixture(dir.path());
        let out_dir = dir.path().join("curated");

        let endpoints = CurateEndpoints::from_config(&config).unwrap();
        let report_a = curate(&config, &sources, &endpoints, &out_dir).unwrap();
        let first = snapshot(&out_dir);

        let endpoints = CurateEndpoints::from_config(&config).unwrap();
        let report_b = curate(&config, &sources, &endpoints, &out_dir).unwrap();
        let second = snapshot(&out_dir);

        assert_eq!(report_a, report_b, "reports diverged");
        assert_eq!(report_a.stage2.verified, 2);
        assert_eq!(report_a.stage3.in_band, 2);
        assert_eq!(
            first.keys().collect::<Vec<_>>(),
            second.keys().collect::<Vec<_>>(),
            "file sets diverged"
        );
        for (name, bytes) in &first {
            assert_eq!(
                Some(bytes),
                second.get(name),
                "{name} is not byte-identical across runs"
            );
        }
        let layout = CurateLayout::new(&out_dir);
        for required in [
            &layout.groups,
            &layout.candidates,
            &layout.calibrated,
            &layout.qa_final,
            &layout.review,
            &layout.report,
        ] {
            assert!(required.exists(), "{} missing", required.display());
        }
    });
}
