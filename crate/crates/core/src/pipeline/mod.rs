//! Three-stage data curation pipeline for multi-image QA.
//!
//! Stage one turns raw sources into image groups: natural-image groups are
//! filtered for resolution ([`select_images`]) and posters are split into
//! region crops ([`segment::segment_poster`]). Stage two drives the
//! generator, verifier and reviser agents ([`agents::produce_qa`]). Stage
//! three calibrates difficulty against the live policy and applies the rule
//! filter ([`stage3`]). Candidates travel between stages as line-delimited
//! manifests so each stage can be rerun in isolation.

pub mod agents;
pub mod segment;
pub mod stage3;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoint::EndpointError;
use crate::protocol::BBox;
use crate::runtime::RuntimeError;
use crate::vision::VisionError;

pub use agents::{generate_qa, produce_qa, revise_loop, verify_answer, Verdict};
pub use segment::{segment_poster, SegmentError, SegmentParams, Segmentation};
pub use stage3::{
    calibrate_qa, rule_filter, CalibrationSetup, DifficultyBand, DifficultyRecord, FilterStats,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("endpoint failure: {0}")]
    Endpoint(#[from] EndpointError),
    #[error("rollout failure: {0}")]
    Runtime(#[from] RuntimeError),
    #[error("image failure: {0}")]
    Vision(#[from] VisionError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

// ---------------------------------------------------------------------------
// Candidate types
// ---------------------------------------------------------------------------

/// Where a QA claims the evidence for one reasoning step lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceRegion {
    pub image_index: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasoningStep {
    pub step: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_region: Option<ConfidenceRegion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "round", rename_all = "snake_case")]
pub enum QAStatus {
    Draft,
    Revised(u32),
    Verified,
    Rejected,
}

/// One question-answer pair moving through the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QACandidate {
    pub qa_id: String,
    pub source_id: String,
    pub image_paths: Vec<String>,
    pub question: String,
    pub answer: String,
    pub reasoning_steps: Vec<ReasoningStep>,
    /// Generation attempt that produced the accepted draft (1-based).
    pub generation_round: u32,
    pub status: QAStatus,
    /// Append-only trail of what happened to this candidate.
    pub history: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

// ---------------------------------------------------------------------------
// Stage one: image selection
// ---------------------------------------------------------------------------

/// How a raw source should enter the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// A single dense composite to split into region crops.
    Poster,
    /// Images that already belong together.
    NaturalGroup,
}

/// One raw source as listed in the intake manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateGroup {
    pub source_id: String,
    pub kind: SourceKind,
    pub image_paths: Vec<String>,
}

/// A natural-image group that survived selection, images loaded.
#[derive(Debug, Clone)]
pub struct SelectedGroup {
    pub source_id: String,
    pub paths: Vec<String>,
    pub images: Vec<RgbImage>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectStats {
    pub groups_in: usize,
    pub groups_kept: usize,
    pub images_in: usize,
    pub images_kept: usize,
    pub dropped_low_res: usize,
    pub unreadable: usize,
}

/// Load natural-image groups and drop images under `min_pixels`. Unreadable
/// files are logged and skipped, never fatal; a group with no surviving
/// images is dropped. An empty candidate list yields empty output and zero
/// stats.
pub fn select_images(
    candidates: &[CandidateGroup],
    min_pixels: u64,
) -> (Vec<SelectedGroup>, SelectStats) {
    let mut stats = SelectStats {
        groups_in: candidates.len(),
        ..SelectStats::default()
    };
    let mut selected = Vec::new();
    for group in candidates {
        let mut paths = Vec::new();
        let mut images = Vec::new();
        for path in &group.image_paths {
            stats.images_in += 1;
            let image = match image::open(Path::new(path)) {
                Ok(i) => i.to_rgb8(),
                Err(e) => {
                    stats.unreadable += 1;
                    log::warn!("{}: skipping unreadable image {path}: {e}", group.source_id);
                    continue;
                }
            };
            let pixels = u64::from(image.width()) * u64::from(image.height());
            if pixels < min_pixels {
                stats.dropped_low_res += 1;
                log::debug!(
                    "{}: dropping {path}, {pixels} px under the {min_pixels} px floor",
                    group.source_id
                );
                continue;
            }
            stats.images_kept += 1;
            paths.push(path.clone());
            images.push(image);
        }
        if images.is_empty() {
            log::debug!("{}: no images survived selection", group.source_id);
            continue;
        }
        stats.groups_kept += 1;
        selected.push(SelectedGroup {
            source_id: group.source_id.clone(),
            paths,
            images,
        });
    }
    (selected, stats)
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// One line of a curated-QA manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAManifestEntry {
    pub qa: QACandidate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<DifficultyRecord>,
}

/// Serialize entries one JSON object per line. Output bytes are a pure
/// function of the entries, so reruns diff cleanly.
pub fn write_qa_manifest<W: Write>(
    entries: &[QAManifestEntry],
    sink: &mut W,
) -> Result<(), PipelineError> {
    let mut buffer = Vec::new();
    for entry in entries {
        serde_json::to_writer(&mut buffer, entry).expect("manifest entries serialize");
        buffer.push(b'\n');
    }
    sink.write_all(&buffer).map_err(|source| PipelineError::Io {
        path: "<manifest sink>".to_string(),
        source,
    })
}

pub fn write_qa_manifest_file<P: AsRef<Path>>(
    entries: &[QAManifestEntry],
    path: P,
) -> Result<(), PipelineError> {
    let io_err = |source| PipelineError::Io {
        path: path.as_ref().display().to_string(),
        source,
    };
    let mut file = std::fs::File::create(path.as_ref()).map_err(io_err)?;
    write_qa_manifest(entries, &mut file)?;
    file.sync_all().map_err(io_err)
}

/// Strict line-delimited read; blank lines are skipped, anything else
/// malformed is an error naming the line.
pub fn read_qa_manifest<R: BufRead>(reader: R) -> Result<Vec<QAManifestEntry>, PipelineError> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: "<manifest source>".to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| PipelineError::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn read_qa_manifest_file<P: AsRef<Path>>(
    path: P,
) -> Result<Vec<QAManifestEntry>, PipelineError> {
    let file = std::fs::File::open(path.as_ref()).map_err(|source| PipelineError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    read_qa_manifest(std::io::BufReader::new(file))
}

/// Deterministic crop filename for a poster region.
pub fn region_file_name(source_id: &str, region_index: usize) -> PathBuf {
    PathBuf::from(format!("{source_id}_region{region_index}.png"))
}
