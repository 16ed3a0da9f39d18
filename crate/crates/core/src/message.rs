//! Conversation primitives: roles, content segments, and messages.
//!
//! A message is an ordered list of segments, each either text or an image.
//! Images are reference-counted so a served image can be re-emitted (the
//! lookback tool does this) without copying pixels.

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

/// Who produced a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

/// Where an image segment came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageSource {
    /// One of the prepared input images, by index into the image set.
    Input { index: usize },
    /// An image returned by a tool, by index into the trajectory's tool events.
    ToolEvent { index: usize },
}

/// An image carried inside a message, with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSegment {
    pub source: ImageSource,
    pub image: Arc<RgbImage>,
}

impl ImageSegment {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn pixels(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }
}

/// One piece of message content.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(String),
    Image(ImageSegment),
}

impl Segment {
    pub fn text(s: impl Into<String>) -> Self {
        Segment::Text(s.into())
    }

    pub fn image(source: ImageSource, image: Arc<RgbImage>) -> Self {
        Segment::Image(ImageSegment { source, image })
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Segment::Text(t) => Some(t),
            Segment::Image(_) => None,
        }
    }
}

/// A single conversation message.
///
/// `trainable` is true exactly for assistant messages; everything the
/// environment injects (system prompt, user question, tool results,
/// corrective notices) is excluded from policy updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub segments: Vec<Segment>,
    pub trainable: bool,
}

impl Message {
    pub fn new(role: Role, segments: Vec<Segment>) -> Self {
        Message {
            trainable: role == Role::Assistant,
            role,
            segments,
        }
    }

    pub fn text_only(role: Role, text: impl Into<String>) -> Self {
        Message::new(role, vec![Segment::text(text)])
    }

    /// Concatenation of all text segments, in order.
    pub fn joined_text(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            if let Segment::Text(t) = seg {
                out.push_str(t);
            }
        }
        out
    }
}
