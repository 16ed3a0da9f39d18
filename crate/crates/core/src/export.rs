//! Trainer hand-off: line-delimited trajectory records.
//!
//! Each record is self-contained: conversation with trainable flags and
//! byte spans, tool events, reward breakdown, advantage, and validity. The
//! format is strict both ways: every record carries `schema_version`, reads
//! reject unknown fields, and a group is written all-or-nothing. Records
//! hold no timestamps, so identical runs export byte-identical files. Crop
//! pixels are not embedded; tool events record the call and result metadata,
//! and crops are reproducible from the served images and the call.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{build_action_mask, MaskedGroup};
use crate::message::{ImageSource, Role, Segment};
use crate::protocol::ToolCall;
use crate::reward::{RewardBreakdown, Validity};
use crate::runtime::Trajectory;
use crate::vision::ToolStatus;

/// Bumped on any breaking change to the record layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("cannot export an empty group")]
    EmptyGroup,
    #[error("trajectory {index} has no computed reward")]
    MissingReward { index: usize },
    #[error("image manifest needs {expected} paths, got {got}")]
    PathCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageManifestEntry {
    /// Path as given by the prompt manifest, recorded verbatim.
    pub path: String,
    pub served_width: u32,
    pub served_height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExportSegment {
    Text {
        text: String,
        /// Byte range of trainable content, present only on trainable text.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        span: Option<(usize, usize)>,
    },
    Image {
        source: ImageSource,
        width: u32,
        height: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportMessage {
    pub role: Role,
    pub trainable: bool,
    pub segments: Vec<ExportSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportToolStatus {
    Ok,
    Error,
}

impl From<ToolStatus> for ExportToolStatus {
    fn from(status: ToolStatus) -> Self {
        match status {
            ToolStatus::Ok => ExportToolStatus::Ok,
            ToolStatus::Error => ExportToolStatus::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportToolEvent {
    pub call: ToolCall,
    pub status: ExportToolStatus,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub image_pixels: u64,
}

/// One trajectory, ready for an external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRecord {
    pub schema_version: u32,
    pub prompt_id: String,
    pub group_id: u64,
    pub member_id: u64,
    pub question: String,
    pub image_manifest: Vec<ImageManifestEntry>,
    pub messages: Vec<ExportMessage>,
    pub tool_events: Vec<ExportToolEvent>,
    pub reward: RewardBreakdown,
    pub advantage: f64,
    pub validity: Validity,
    pub trajectory_masked: bool,
}

/// Build one export record from a scored trajectory. `trajectory_masked`
/// exports advantage 0 and all-false trainable flags regardless of roles.
pub fn make_record(
    trajectory: &Trajectory,
    group_id: u64,
    member_id: u64,
    advantage: f64,
    trajectory_masked: bool,
    image_paths: &[String],
) -> Result<ExportRecord, ExportError> {
    let reward = trajectory
        .reward
        .ok_or(ExportError::MissingReward {
            index: member_id as usize,
        })?;
    if image_paths.len() != trajectory.image_set.len() {
        return Err(ExportError::PathCount {
            expected: trajectory.image_set.len(),
            got: image_paths.len(),
        });
    }

    let image_manifest = image_paths
        .iter()
        .zip(trajectory.image_set.images())
        .map(|(path, img)| ImageManifestEntry {
            path: path.clone(),
            served_width: img.served_width(),
            served_height: img.served_height(),
        })
        .collect();

    let mask = build_action_mask(trajectory);
    let mask = if trajectory_masked {
        mask.masked_out()
    } else {
        mask
    };

    let messages = trajectory
        .messages
        .iter()
        .zip(&mask.trainable)
        .zip(&mask.spans)
        .map(|((message, &trainable), segment_spans)| ExportMessage {
            role: message.role,
            trainable,
            segments: message
                .segments
                .iter()
                .zip(segment_spans)
                .map(|(segment, &span)| match segment {
                    Segment::Text(text) => ExportSegment::Text {
                        text: text.clone(),
                        span,
                    },
                    Segment::Image(img) => ExportSegment::Image {
                        source: img.source,
                        width: img.width(),
                        height: img.height(),
                    },
                })
                .collect(),
        })
        .collect();

    let tool_events = trajectory
        .tool_events
        .iter()
        .map(|event| ExportToolEvent {
            call: event.source_call.clone(),
            status: event.status.into(),
            message: event.message.clone(),
            width: event.image.as_ref().map(|i| i.width()),
            height: event.image.as_ref().map(|i| i.height()),
            image_pixels: event.image_pixels,
        })
        .collect();

    Ok(ExportRecord {
        schema_version: SCHEMA_VERSION,
        prompt_id: trajectory.prompt_id.clone(),
        group_id,
        member_id,
        question: trajectory.question.clone(),
        image_manifest,
        messages,
        tool_events,
        reward,
        advantage: if trajectory_masked { 0.0 } else { advantage },
        validity: trajectory.validity,
        trajectory_masked,
    })
}

/// Structural checks beyond what serde enforces.
pub fn validate_record(record: &ExportRecord) -> Result<(), String> {
    if record.schema_version != SCHEMA_VERSION {
        return Err(format!(
            "schema_version {} (expected {})",
            record.schema_version, SCHEMA_VERSION
        ));
    }
    if record.trajectory_masked {
        if record.advantage != 0.0 {
            return Err("masked record with nonzero advantage".to_string());
        }
        if record.messages.iter().any(|m| m.trainable) {
            return Err("masked record with trainable messages".to_string());
        }
    }
    if record.trajectory_masked == matches!(record.validity, Validity::Valid) {
        return Err("trajectory_masked must equal (validity != valid)".to_string());
    }
    for (i, message) in record.messages.iter().enumerate() {
        if message.trainable && message.role != Role::Assistant {
            return Err(format!("message {i}: trainable non-assistant message"));
        }
        for segment in &message.segments {
            if let ExportSegment::Text { text, span } = segment {
                match span {
                    Some((start, end)) => {
                        if !message.trainable {
                            return Err(format!("message {i}: span on masked message"));
                        }
                        if start > end || *end > text.len() {
                            return Err(format!("message {i}: span out of bounds"));
                        }
                    }
                    None => {
                        if message.trainable {
                            return Err(format!(
                                "message {i}: trainable text segment without span"
                            ));
                        }
                    }
                }
            }
        }
    }
    let w = &record.reward.weights;
    let expected = record.reward.accuracy * (w.accuracy + w.tool_bonus * record.reward.tool_gain)
        + w.format * record.reward.format;
    if (record.reward.total - expected).abs() > 1e-12 {
        return Err(format!(
            "reward total {} inconsistent with components (expected {expected})",
            record.reward.total
        ));
    }
    Ok(())
}

/// Write one group as line-delimited JSON. All records are serialized,
/// re-parsed, and validated before a single write, so a failing record
/// aborts the whole group with nothing written. Returns the record count.
pub fn export_group(
    group: &MaskedGroup,
    group_id: u64,
    image_paths: &[String],
    sink: &mut dyn Write,
) -> Result<usize, ExportError> {
    if group.trajectories.is_empty() {
        return Err(ExportError::EmptyGroup);
    }
    let mut buffer = String::new();
    for (member_id, trajectory) in group.trajectories.iter().enumerate() {
        let record = make_record(
            trajectory,
            group_id,
            member_id as u64,
            group.advantages[member_id],
            !group.trajectory_mask[member_id],
            image_paths,
        )?;
        let line = serde_json::to_string(&record)
            .map_err(|e| ExportError::Schema(format!("serialization failed: {e}")))?;
        let reparsed: ExportRecord = serde_json::from_str(&line)
            .map_err(|e| ExportError::Schema(format!("round-trip failed: {e}")))?;
        validate_record(&reparsed).map_err(ExportError::Schema)?;
        buffer.push_str(&line);
        buffer.push('\n');
    }
    sink.write_all(buffer.as_bytes())?;
    Ok(group.trajectories.len())
}

/// Strict reader: rejects unknown fields, wrong schema versions, and
/// structurally invalid records, reporting the offending line number.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<ExportRecord>, ExportError> {
    let mut records = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExportRecord = serde_json::from_str(&line)
            .map_err(|e| ExportError::Schema(format!("line {}: {e}", line_no + 1)))?;
        validate_record(&record)
            .map_err(|e| ExportError::Schema(format!("line {}: {e}", line_no + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Concatenation of all trainable span bytes, in message order. For an
/// unmasked record this must equal [`assistant_concat`] byte-for-byte.
pub fn trainable_concat(record: &ExportRecord) -> String {
    let mut out = String::new();
    for message in &record.messages {
        for segment in &message.segments {
            if let ExportSegment::Text {
                text,
                span: Some((start, end)),
            } = segment
            {
                out.push_str(&text[*start..*end]);
            }
        }
    }
    out
}

/// Concatenation of all assistant-role text, in message order.
pub fn assistant_concat(record: &ExportRecord) -> String {
    let mut out = String::new();
    for message in &record.messages {
        if message.role != Role::Assistant {
            continue;
        }
        for segment in &message.segments {
            if let ExportSegment::Text { text, .. } = segment {
                out.push_str(text);
            }
        }
    }
    out
}
