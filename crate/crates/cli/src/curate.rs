//! The three-stage curation command.
//!
//! Stage 1 resolves raw sources into image groups: posters are segmented
//! into region crops (written as PNGs), natural groups are filtered for
//! resolution. Stage 2 runs generate/verify/revise over each group. Stage 3
//! calibrates difficulty against the policy endpoint, keeps the target
//! band, applies the rule filter and samples the review manifest.
//!
//! Each stage writes its manifest before the next begins, so a failing
//! stage leaves the earlier outputs on disk and names itself in the error.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;

use visloop_core::endpoint::ChatEndpoint;
use visloop_core::pipeline::{
    calibrate_qa, produce_qa, region_file_name, rule_filter, segment_poster, select_images,
    CalibrationSetup, CandidateGroup, FilterStats, QAManifestEntry, QAStatus, SourceKind,
};
use visloop_core::runtime::DEFAULT_SYSTEM_PROMPT;
use visloop_core::vision::{load_images, prepare_image_set};

use crate::config::RunConfig;
use crate::rollout::SEED_STRIDE;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageOneStats {
    pub sources_in: usize,
    pub posters_in: usize,
    pub posters_segmented: usize,
    pub posters_rejected: usize,
    pub posters_unreadable: usize,
    pub regions_written: usize,
    pub natural_groups_in: usize,
    pub natural_groups_kept: usize,
    pub natural_images_dropped: usize,
    pub natural_images_unreadable: usize,
    pub groups_out: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageTwoStats {
    pub groups_in: usize,
    pub verified: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageThreeStats {
    pub candidates_in: usize,
    pub excluded_by_failure: usize,
    pub outside_band: usize,
    pub in_band: usize,
    pub filter: FilterStats,
    pub review_sampled: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CurateReport {
    pub stage1: StageOneStats,
    pub stage2: StageTwoStats,
    pub stage3: StageThreeStats,
}

impl fmt::Display for CurateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "stage 1: {} sources -> {} groups ({} regions written, {} posters rejected)",
            self.stage1.sources_in,
            self.stage1.groups_out,
            self.stage1.regions_written,
            self.stage1.posters_rejected
        )?;
        writeln!(
            f,
            "stage 2: {} groups -> {} verified, {} rejected",
            self.stage2.groups_in, self.stage2.verified, self.stage2.rejected
        )?;
        write!(
            f,
            "stage 3: {} candidates -> {} in band -> {} kept ({} for review)",
            self.stage3.candidates_in,
            self.stage3.in_band,
            self.stage3.filter.kept,
            self.stage3.review_sampled
        )
    }
}

/// Fixed file layout under the output directory.
pub struct CurateLayout {
    pub regions_dir: PathBuf,
    pub groups: PathBuf,
    pub candidates: PathBuf,
    pub calibrated: PathBuf,
    pub qa_final: PathBuf,
    pub review: PathBuf,
    pub report: PathBuf,
}

impl CurateLayout {
    pub fn new(out_dir: &Path) -> CurateLayout {
        CurateLayout {
            regions_dir: out_dir.join("regions"),
            groups: out_dir.join("groups.jsonl"),
            candidates: out_dir.join("qa_candidates.jsonl"),
            calibrated: out_dir.join("qa_calibrated.jsonl"),
            qa_final: out_dir.join("qa_final.jsonl"),
            review: out_dir.join("review.jsonl"),
            report: out_dir.join("report.json"),
        }
    }
}

/// Endpoints for the pipeline: the policy plus the three agents.
pub struct CurateEndpoints {
    pub policy: Arc<dyn ChatEndpoint>,
    pub generator: Arc<dyn ChatEndpoint>,
    pub verifier: Arc<dyn ChatEndpoint>,
    pub reviser: Arc<dyn ChatEndpoint>,
}

impl CurateEndpoints {
    /// Build from config; agent sections fall back to the main endpoint.
    pub fn from_config(config: &RunConfig) -> Result<CurateEndpoints> {
        let policy = config.endpoint.build().context("building [endpoint]")?;
        let agent = |section: &Option<crate::config::EndpointConfig>, name: &str| match section {
            Some(cfg) => cfg.build().with_context(|| format!("building [pipeline.{name}]")),
            None => Ok(Arc::clone(&policy)),
        };
        Ok(CurateEndpoints {
            generator: agent(&config.pipeline.generator, "generator")?,
            verifier: agent(&config.pipeline.verifier, "verifier")?,
            reviser: agent(&config.pipeline.reviser, "reviser")?,
            policy,
        })
    }
}

struct LineWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl LineWriter {
    fn create(path: &Path) -> Result<LineWriter> {
        let file =
            File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(LineWriter {
            path: path.to_path_buf(),
            inner: BufWriter::new(file),
        })
    }

    fn write_json<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, value)
            .with_context(|| format!("writing {}", self.path.display()))?;
        self.inner
            .write_all(b"\n")
            .with_context(|| format!("writing {}", self.path.display()))?;
        // Flush per line so a failing later item leaves earlier ones on disk.
        self.inner
            .flush()
            .with_context(|| format!("flushing {}", self.path.display()))
    }
}

fn stage1(
    sources: &[CandidateGroup],
    config: &RunConfig,
    layout: &CurateLayout,
) -> Result<(Vec<CandidateGroup>, StageOneStats)> {
    let mut stats = StageOneStats {
        sources_in: sources.len(),
        ..StageOneStats::default()
    };
    let params = config.pipeline.segment.to_params();
    let mut writer = LineWriter::create(&layout.groups)?;
    let mut groups = Vec::new();
    for source in sources {
        match source.kind {
            SourceKind::Poster => {
                stats.posters_in += 1;
                let [path] = source.image_paths.as_slice() else {
                    log::error!(
                        "{}: posters take exactly one image, got {}",
                        source.source_id,
                        source.image_paths.len()
                    );
                    stats.posters_rejected += 1;
                    continue;
                };
                let poster = match image::open(Path::new(path)) {
                    Ok(i) => i.to_rgb8(),
                    Err(e) => {
                        log::warn!("{}: unreadable poster {path}: {e}", source.source_id);
                        stats.posters_unreadable += 1;
                        continue;
                    }
                };
                let segmentation = match segment_poster(&poster, &params) {
                    Ok(s) => s,
                    Err(e) => {
                        log::info!("{}: poster rejected: {e}", source.source_id);
                        stats.posters_rejected += 1;
                        continue;
                    }
                };
                let mut region_paths = Vec::new();
                for (i, region) in segmentation.regions.iter().enumerate() {
                    let file = layout
                        .regions_dir
                        .join(region_file_name(&source.source_id, i));
                    region
                        .image
                        .save(&file)
                        .with_context(|| format!("writing {}", file.display()))?;
                    region_paths.push(file.display().to_string());
                }
                stats.posters_segmented += 1;
                stats.regions_written += region_paths.len();
                groups.push(CandidateGroup {
                    source_id: source.source_id.clone(),
                    kind: SourceKind::NaturalGroup,
                    image_paths: region_paths,
                });
            }
            SourceKind::NaturalGroup => {
                stats.natural_groups_in += 1;
                let (selected, select_stats) = select_images(
                    std::slice::from_ref(source),
                    config.pipeline.min_image_pixels,
                );
                stats.natural_images_dropped += select_stats.dropped_low_res;
                stats.natural_images_unreadable += select_stats.unreadable;
                if let Some(group) = selected.into_iter().next() {
                    stats.natural_groups_kept += 1;
                    groups.push(CandidateGroup {
                        source_id: group.source_id,
                        kind: SourceKind::NaturalGroup,
                        image_paths: group.paths,
                    });
                }
            }
        }
    }
    for group in &groups {
        writer.write_json(group)?;
    }
    stats.groups_out = groups.len();
    Ok((groups, stats))
}

fn stage2(
    groups: &[CandidateGroup],
    config: &RunConfig,
    endpoints: &CurateEndpoints,
    layout: &CurateLayout,
) -> Result<(Vec<QAManifestEntry>, StageTwoStats)> {
    let mut stats = StageTwoStats {
        groups_in: groups.len(),
        ..StageTwoStats::default()
    };
    let mut writer = LineWriter::create(&layout.candidates)?;
    let mut entries = Vec::new();
    for group in groups {
        let images = load_images(&group.image_paths)
            .with_context(|| format!("loading images for {}", group.source_id))?;
        let image_set = prepare_image_set(images, config.rollout.train_pixel_budget)
            .with_context(|| format!("preparing images for {}", group.source_id))?;
        let qa_id = format!("{}-qa0", group.source_id);
        let qa = produce_qa(
            &qa_id,
            &group.source_id,
            group.image_paths.clone(),
            &image_set,
            endpoints.generator.as_ref(),
            endpoints.verifier.as_ref(),
            endpoints.reviser.as_ref(),
            config.pipeline.generation_attempts,
            config.pipeline.max_revisions,
        )
        .with_context(|| format!("producing {qa_id}"))?;
        match qa.status {
            QAStatus::Verified => stats.verified += 1,
            QAStatus::Rejected => stats.rejected += 1,
            // produce_qa only returns terminal states.
            QAStatus::Draft | QAStatus::Revised(_) => unreachable!("non-terminal QA status"),
        }
        let entry = QAManifestEntry { qa, difficulty: None };
        writer.write_json(&entry)?;
        entries.push(entry);
    }
    Ok((entries, stats))
}

fn stage3(
    entries: &[QAManifestEntry],
    config: &RunConfig,
    endpoints: &CurateEndpoints,
    layout: &CurateLayout,
) -> Result<StageThreeStats> {
    let verified: Vec<&QAManifestEntry> = entries
        .iter()
        .filter(|e| e.qa.status == QAStatus::Verified)
        .collect();
    let mut stats = StageThreeStats {
        candidates_in: verified.len(),
        ..StageThreeStats::default()
    };
    let mut writer = LineWriter::create(&layout.calibrated)?;
    let mut calibrated = Vec::new();
    for (index, entry) in verified.iter().enumerate() {
        let images = load_images(&entry.qa.image_paths)
            .with_context(|| format!("loading images for {}", entry.qa.qa_id))?;
        let image_set = Arc::new(
            prepare_image_set(images, config.rollout.train_pixel_budget)
                .with_context(|| format!("preparing images for {}", entry.qa.qa_id))?,
        );
        let setup = CalibrationSetup {
            endpoint: endpoints.policy.as_ref(),
            system_prompt: DEFAULT_SYSTEM_PROMPT,
            limits: config.limits.to_limits(),
            params: config.endpoint.sampling(None),
            rollouts: config.pipeline.difficulty_rollouts,
            band: config.pipeline.band(),
            seed: config
                .pipeline
                .seed
                .wrapping_add((index as u64).wrapping_mul(SEED_STRIDE)),
        };
        let record = calibrate_qa(&entry.qa, &image_set, &setup);
        if record.excluded_by_failure {
            stats.excluded_by_failure += 1;
        } else if record.kept {
            stats.in_band += 1;
        } else {
            stats.outside_band += 1;
        }
        let entry = QAManifestEntry {
            qa: entry.qa.clone(),
            difficulty: Some(record),
        };
        writer.write_json(&entry)?;
        calibrated.push(entry);
    }

    let survivors: Vec<_> = calibrated
        .iter()
        .filter(|e| e.difficulty.as_ref().is_some_and(|d| d.kept))
        .cloned()
        .collect();
    let (kept, review_ids, filter_stats) = rule_filter(
        survivors.iter().map(|e| e.qa.clone()).collect(),
        config.pipeline.review_sample_rate,
        config.pipeline.seed,
    );
    stats.filter = filter_stats;
    stats.review_sampled = review_ids.len();

    let mut final_writer = LineWriter::create(&layout.qa_final)?;
    let mut review_writer = LineWriter::create(&layout.review)?;
    for qa in &kept {
        let entry = survivors
            .iter()
            .find(|e| e.qa.qa_id == qa.qa_id)
            .expect("kept QA came from the survivor list");
        final_writer.write_json(entry)?;
        if review_ids.contains(&qa.qa_id) {
            review_writer.write_json(entry)?;
        }
    }
    Ok(stats)
}

/// Run the full pipeline and leave all manifests under `out_dir`.
pub fn curate(
    config: &RunConfig,
    sources: &[CandidateGroup],
    endpoints: &CurateEndpoints,
    out_dir: &Path,
) -> Result<CurateReport> {
    let layout = CurateLayout::new(out_dir);
    std::fs::create_dir_all(&layout.regions_dir)
        .with_context(|| format!("creating {}", layout.regions_dir.display()))?;

    let (groups, stage1_stats) =
        stage1(sources, config, &layout).context("stage 1 (select/segment) failed")?;
    let (entries, stage2_stats) = stage2(&groups, config, endpoints, &layout)
        .context("stage 2 (generate/verify/revise) failed; stage 1 outputs are kept")?;
    let stage3_stats = stage3(&entries, config, endpoints, &layout)
        .context("stage 3 (calibrate/filter) failed; stage 1 and 2 outputs are kept")?;

    let report = CurateReport {
        stage1: stage1_stats,
        stage2: stage2_stats,
        stage3: stage3_stats,
    };
    let mut report_json =
        serde_json::to_vec_pretty(&report).expect("report serializes");
    report_json.push(b'\n');
    std::fs::write(&layout.report, report_json)
        .with_context(|| format!("writing {}", layout.report.display()))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use visloop_core::pipeline::read_qa_manifest_file;
    use visloop_core::protocol::{answer_block, render_turn};

    fn write_lines(path: &Path, lines: &[String]) {
        let encoded: Vec<String> = lines
            .iter()
            .map(|l| serde_json::to_string(l).unwrap())
            .collect();
        std::fs::write(path, encoded.join("\n")).unwrap();
    }

    fn qa_payload(question: &str, answer: &str) -> String {
        serde_json::json!({
            "question": question,
            "answer": answer,
            "reasoning_steps": [
                {"step": "compare the two regions", "image_index": 0, "bbox": [8, 8, 120, 90]},
            ],
        })
        .to_string()
    }

    /// Natural two-image group plus scripted agents; the policy answers
    /// correctly twice out of five calibration rollouts.
    fn fixture(dir: &Path) -> (RunConfig, Vec<CandidateGroup>) {
        let image_a = dir.join("a.png");
        let image_b = dir.join("b.png");
        image::RgbImage::from_pixel(1200, 1000, image::Rgb([40, 80, 120]))
            .save(&image_a)
            .unwrap();
        image::RgbImage::from_pixel(1100, 1000, image::Rgb([120, 80, 40]))
            .save(&image_b)
            .unwrap();

        let gen_path = dir.join("gen.jsonl");
        write_lines(
            &gen_path,
            &[qa_payload(
                "Which of the two photographs carries the warmer tint overall?",
                "the second photograph",
            )],
        );
        let verify_path = dir.join("verify.jsonl");
        write_lines(&verify_path, &["pass pass".to_string()]);
        let policy_path = dir.join("policy.jsonl");
        let right = render_turn("compare tints", &answer_block("the second photograph"));
        let wrong = render_turn("compare tints", &answer_block("the first photograph"));
        write_lines(
            &policy_path,
            &[right.clone(), wrong.clone(), wrong.clone(), right, wrong],
        );

        let toml = format!(
            r#"
            [endpoint]
            kind = "scripted"
            script_path = {policy:?}
            script_mode = "sequential"

            [pipeline]
            min_image_pixels = 1000000
            seed = 5

            [pipeline.generator]
            kind = "scripted"
            script_path = {generator:?}
            script_mode = "sequential"

            [pipeline.verifier]
            kind = "scripted"
            script_path = {verifier:?}
            script_mode = "sequential"
            "#,
            policy = policy_path.display().to_string(),
            generator = gen_path.display().to_string(),
            verifier = verify_path.display().to_string(),
        );
        let config = RunConfig::from_toml(&toml).unwrap();
        let sources = vec![CandidateGroup {
            source_id: "pair0".to_string(),
            kind: SourceKind::NaturalGroup,
            image_paths: vec![
                image_a.display().to_string(),
                image_b.display().to_string(),
            ],
        }];
        (config, sources)
    }

    #[test]
    fn full_pipeline_keeps_a_mid_band_item() {
        let dir = tempfile::tempdir().unwrap();
        let (config, sources) = fixture(dir.path());
        let endpoints = CurateEndpoints::from_config(&config).unwrap();
        let out_dir = dir.path().join("out");
        let report = curate(&config, &sources, &endpoints, &out_dir).unwrap();

        assert_eq!(report.stage1.groups_out, 1);
        assert_eq!(report.stage2.verified, 1);
        assert_eq!(report.stage3.in_band, 1);
        assert_eq!(report.stage3.filter.kept, 1);

        let layout = CurateLayout::new(&out_dir);
        let finals = read_qa_manifest_file(&layout.qa_final).unwrap();
        assert_eq!(finals.len(), 1);
        let difficulty = finals[0].difficulty.as_ref().unwrap();
        assert_eq!(difficulty.correct_count, 2);
        assert!(difficulty.kept);
        assert!(layout.report.exists());
    }

    #[test]
    fn rejected_posters_do_not_stop_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let (config, mut sources) = fixture(dir.path());
        // A uniform poster has no internal gutters and is rejected.
        let poster = dir.path().join("poster.png");
        image::RgbImage::from_pixel(1400, 1400, image::Rgb([33, 33, 33]))
            .save(&poster)
            .unwrap();
        sources.insert(
            0,
            CandidateGroup {
                source_id: "poster0".to_string(),
                kind: SourceKind::Poster,
                image_paths: vec![poster.display().to_string()],
            },
        );
        let endpoints = CurateEndpoints::from_config(&config).unwrap();
        let out_dir = dir.path().join("out");
        let report = curate(&config, &sources, &endpoints, &out_dir).unwrap();
        assert_eq!(report.stage1.posters_rejected, 1);
        assert_eq!(report.stage1.groups_out, 1);
        assert_eq!(report.stage2.verified, 1);
    }

    #[test]
    fn stage2_failure_names_the_stage_and_keeps_stage1_output() {
        let dir = tempfile::tempdir().unwrap();
        let (mut config, sources) = fixture(dir.path());
        // Exhaust the generator script: a second group has nothing to read.
        let mut second = sources[0].clone();
        second.source_id = "pair1".to_string();
        let sources = vec![sources[0].clone(), second];
        config.pipeline.generation_attempts = 1;
        let endpoints = CurateEndpoints::from_config(&config).unwrap();
        let out_dir = dir.path().join("out");
        let err = curate(&config, &sources, &endpoints, &out_dir).unwrap_err();
        let chain = format!("{err:#}");
        assert!(chain.contains("stage 2"), "{chain}");
        let layout = CurateLayout::new(&out_dir);
        assert!(layout.groups.exists());
        // The first group's candidate line made it to disk before the failure.
        let partial = read_qa_manifest_file(&layout.candidates).unwrap();
        assert_eq!(partial.len(), 1);
    }
}
