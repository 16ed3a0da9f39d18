//! Line-delimited input manifests.
//!
//! Three kinds of input feed the commands: training prompts (rollout),
//! benchmark items (evaluate) and raw sources (curate). All are JSON
//! objects one per line; blank lines are skipped and anything malformed is
//! an error naming the line.

use std::io::BufRead;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use visloop_core::pipeline::CandidateGroup;
use visloop_core::reward::AnswerKey;

/// One training prompt for rollout collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub prompt_id: String,
    pub image_paths: Vec<String>,
    pub question: String,
    pub answer: AnswerKey,
}

/// One benchmark item for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub item_id: String,
    pub image_paths: Vec<String>,
    pub question: String,
    pub answer: AnswerKey,
    /// Grouping label for per-subset accuracy, e.g. a benchmark split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

fn read_lines<T, R>(reader: R, what: &str) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.with_context(|| format!("reading {what} line {}", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .with_context(|| format!("{what} line {}", i + 1))?;
        items.push(item);
    }
    Ok(items)
}

fn read_file<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening {} ({what})", path.display()))?;
    read_lines(std::io::BufReader::new(file), what)
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptSpec>> {
    read_file(path, "prompt manifest")
}

pub fn read_eval_items(path: &Path) -> Result<Vec<EvalItem>> {
    read_file(path, "benchmark manifest")
}

pub fn read_sources(path: &Path) -> Result<Vec<CandidateGroup>> {
    read_file(path, "source manifest")
}
