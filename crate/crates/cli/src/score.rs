//! Export auditing: schema checks and advantage recomputation.
//!
//! `export-check` re-reads an export file under the strict schema (every
//! line must validate). `score` additionally regroups the records and
//! recomputes group-relative advantages from the stored rewards and masks,
//! flagging any drift between what the file claims and what the rewards
//! imply.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use visloop_core::export::read_records;
use visloop_core::group::group_advantages;

const ADVANTAGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScoreReport {
    pub records: usize,
    pub groups: usize,
    pub masked_records: usize,
    pub reward_mean: f64,
    /// Human-readable descriptions of every inconsistency found.
    pub mismatches: Vec<String>,
}

impl ScoreReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "records: {} in {} groups ({} masked), reward mean {:.4}",
            self.records, self.groups, self.masked_records, self.reward_mean
        )?;
        if self.mismatches.is_empty() {
            write!(f, "advantages consistent with stored rewards")
        } else {
            writeln!(f, "{} mismatches:", self.mismatches.len())?;
            for m in &self.mismatches {
                writeln!(f, "  {m}")?;
            }
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Vec<visloop_core::ExportRecord>> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let records = read_records(std::io::BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(records)
}

/// Validate every line against the export schema. Duplicate group/member
/// pairs are rejected on top of the per-record checks.
pub fn check_exports(path: &Path) -> Result<usize> {
    let records = load(path)?;
    let mut seen = std::collections::HashSet::new();
    for record in &records {
        if !seen.insert((record.group_id, record.member_id)) {
            anyhow::bail!(
                "duplicate member: group {} member {}",
                record.group_id,
                record.member_id
            );
        }
    }
    Ok(records.len())
}

/// Recompute each group's advantages from its stored rewards and masks and
/// compare against the stored values.
pub fn score_exports(path: &Path) -> Result<ScoreReport> {
    let records = load(path)?;
    let mut report = ScoreReport {
        records: records.len(),
        ..ScoreReport::default()
    };
    let mut groups: BTreeMap<u64, Vec<&visloop_core::ExportRecord>> = BTreeMap::new();
    for record in &records {
        groups.entry(record.group_id).or_default().push(record);
    }
    report.groups = groups.len();
    let mut reward_sum = 0.0;
    for (group_id, mut members) in groups {
        members.sort_by_key(|r| r.member_id);
        let rewards: Vec<f64> = members.iter().map(|r| r.reward.total).collect();
        let mask: Vec<bool> = members.iter().map(|r| !r.trajectory_masked).collect();
        reward_sum += rewards.iter().sum::<f64>();
        report.masked_records += mask.iter().filter(|m| !**m).count();
        let expected = group_advantages(&rewards, &mask);
        for (record, expected) in members.iter().zip(expected) {
            if (record.advantage - expected).abs() > ADVANTAGE_TOLERANCE {
                report.mismatches.push(format!(
                    "group {group_id} member {}: stored advantage {} but rewards imply {expected}",
                    record.member_id, record.advantage
                ));
            }
        }
    }
    if !records.is_empty() {
        report.reward_mean = reward_sum / records.len() as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::manifest::PromptSpec;
    use crate::rollout::run_rollouts_to_file;
    use visloop_core::protocol::{answer_block, render_turn};
    use visloop_core::reward::AnswerKey;

    fn exported_file(dir: &Path) -> std::path::PathBuf {
        let script_path = dir.join("turns.jsonl");
        let turn = render_turn("count", &answer_block("two"));
        std::fs::write(&script_path, serde_json::to_string(&turn).unwrap()).unwrap();
        let config = RunConfig::from_toml(&format!(
            r#"
            [endpoint]
            kind = "scripted"
            script_path = {:?}

            [rollout]
            group_size = 2
            "#,
            script_path.display().to_string()
        ))
        .unwrap();
        let image_path = dir.join("img.png");
        image::RgbImage::from_pixel(64, 64, image::Rgb([5, 5, 5]))
            .save(&image_path)
            .unwrap();
        let prompts = vec![PromptSpec {
            prompt_id: "p0".to_string(),
            image_paths: vec![image_path.display().to_string()],
            question: "how many?".to_string(),
            answer: AnswerKey::FreeText {
                gold: "two".to_string(),
            },
        }];
        let out = dir.join("exports.jsonl");
        run_rollouts_to_file(&config, &prompts, &out).unwrap();
        out
    }

    #[test]
    fn clean_exports_check_and_score() {
        let dir = tempfile::tempdir().unwrap();
        let path = exported_file(dir.path());
        assert_eq!(check_exports(&path).unwrap(), 2);
        let report = score_exports(&path).unwrap();
        assert!(report.is_clean(), "{report}");
        assert_eq!(report.records, 2);
        assert_eq!(report.groups, 1);
        assert_eq!(report.reward_mean, 1.1);
    }

    #[test]
    fn tampered_advantage_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let path = exported_file(dir.path());
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        lines[0]["advantage"] = serde_json::json!(0.25);
        // Keep the schema valid: a masked record must stay at zero, and
        // these are unmasked, so 0.25 passes validation but not scoring.
        let tampered: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        std::fs::write(&path, tampered.join("\n")).unwrap();
        let report = score_exports(&path).unwrap();
        assert_eq!(report.mismatches.len(), 1);
        assert!(report.mismatches[0].contains("member 0"), "{}", report.mismatches[0]);
    }

    #[test]
    fn truncated_line_fails_the_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = exported_file(dir.path());
        let text = std::fs::read_to_string(&path).unwrap();
        let first_line_len = text.lines().next().unwrap().len();
        let cut = &text[..first_line_len - 5];
        std::fs::write(&path, cut).unwrap();
        assert!(check_exports(&path).is_err());
    }
}
