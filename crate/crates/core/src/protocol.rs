//! The textual grammar of model turns and its total parser.
//!
//! A well-formed turn is reasoning inside `<think>...</think>` followed by
//! exactly one action: either a tool call,
//!
//! ```text
//! <tool_call>{"name":"zoom_in","arguments":{"image_index":0,"bbox":[x1,y1,x2,y2],"label":"..."}}</tool_call>
//! <tool_call>{"name":"lookback_reuse","arguments":{"image_index":0,"reason":"..."}}</tool_call>
//! ```
//!
//! or a final answer, `<answer>...</answer>`.
//!
//! [`parse_turn`] is total: it returns a [`ParsedTurn`] for every input,
//! encoding all failures as [`TurnAction::Malformed`] with a diagnostic and
//! a set of [`ViolationFlag`]s that the format reward later turns into
//! score deductions. Raw model text is preserved byte-for-byte.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Bounding box in absolute pixels of the served image, origin top-left,
/// `[x1, y1, x2, y2]` with `x1 < x2` and `y1 < y2`. Coordinates may lie
/// outside the image; they are clamped at execution time, not parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl BBox {
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// A parsed visual-function request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", content = "arguments", rename_all = "snake_case")]
pub enum ToolCall {
    /// Visual confirmation: crop a region of an indexed image.
    ZoomIn {
        image_index: usize,
        bbox: BBox,
        label: String,
    },
    /// Visual reflection: re-emit a full indexed image with a stated reason.
    LookbackReuse { image_index: usize, reason: String },
}

impl ToolCall {
    pub fn tool_name(&self) -> &'static str {
        match self {
            ToolCall::ZoomIn { .. } => "zoom_in",
            ToolCall::LookbackReuse { .. } => "lookback_reuse",
        }
    }

    pub fn image_index(&self) -> usize {
        match self {
            ToolCall::ZoomIn { image_index, .. } => *image_index,
            ToolCall::LookbackReuse { image_index, .. } => *image_index,
        }
    }
}

/// The single action a turn resolves to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnAction {
    ToolCall(ToolCall),
    FinalAnswer(String),
    /// The turn could not be resolved to exactly one well-formed action.
    /// Carries a human-readable diagnostic.
    Malformed(String),
}

/// Format-violation codes recorded during parsing. Each maps to one of the
/// four deduction classes used by the format reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationFlag {
    /// Missing, unclosed, or nested `<think>` tags.
    UnbalancedThink,
    /// Tool block present but unusable: bad JSON, unknown tool, invalid
    /// arguments, or unbalanced `<tool_call>` tags.
    MalformedToolBlock,
    /// An action tag overlaps or nests with another tag region.
    OverlappingTags,
    /// More than one action block in a single turn.
    MultipleActions,
    /// More than one answer block.
    MultipleAnswers,
    /// Unclosed `<answer>` tag or stray `</answer>`.
    UnbalancedAnswerTag,
    /// Non-whitespace text after the answer block.
    TrailingAfterAnswer,
    /// Non-whitespace text outside all tags.
    StrayText,
    /// The trajectory terminated without producing an answer. Set at
    /// trajectory level by the format scorer, never by the parser.
    MissingAnswer,
}

/// The four deduction classes of the format reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationClass {
    ThinkTags,
    ToolBlock,
    TagOverlap,
    AnswerDiscipline,
}

impl ViolationFlag {
    pub fn class(self) -> ViolationClass {
        match self {
            ViolationFlag::UnbalancedThink => ViolationClass::ThinkTags,
            ViolationFlag::MalformedToolBlock => ViolationClass::ToolBlock,
            ViolationFlag::OverlappingTags | ViolationFlag::MultipleActions => {
                ViolationClass::TagOverlap
            }
            ViolationFlag::MultipleAnswers
            | ViolationFlag::UnbalancedAnswerTag
            | ViolationFlag::TrailingAfterAnswer
            | ViolationFlag::StrayText
            | ViolationFlag::MissingAnswer => ViolationClass::AnswerDiscipline,
        }
    }
}

/// The result of parsing one turn of model output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTurn {
    /// Concatenated `<think>` contents (empty when the turn has none).
    pub thinking: String,
    pub action: TurnAction,
    /// The original model text, byte-for-byte.
    pub raw: String,
    pub violation_flags: BTreeSet<ViolationFlag>,
}

impl ParsedTurn {
    /// Re-embed the turn as wire text. Successfully parsed turns round-trip
    /// to their original bytes.
    pub fn render(&self) -> &str {
        &self.raw
    }

    pub fn is_malformed(&self) -> bool {
        matches!(self.action, TurnAction::Malformed(_))
    }
}

// ---------------------------------------------------------------------------
// Tag scanning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Think,
    ToolCallTag,
    Answer,
}

impl Tag {
    fn open(self) -> &'static str {
        match self {
            Tag::Think => "<think>",
            Tag::ToolCallTag => "<tool_call>",
            Tag::Answer => "<answer>",
        }
    }

    fn close(self) -> &'static str {
        match self {
            Tag::Think => "</think>",
            Tag::ToolCallTag => "</tool_call>",
            Tag::Answer => "</answer>",
        }
    }

    fn is_action(self) -> bool {
        !matches!(self, Tag::Think)
    }
}

const ALL_TAGS: [Tag; 3] = [Tag::Think, Tag::ToolCallTag, Tag::Answer];

#[derive(Debug, Clone, Copy)]
struct TagToken {
    tag: Tag,
    is_open: bool,
    start: usize,
    end: usize,
}

/// A matched open/close pair with its content byte range.
#[derive(Debug, Clone, Copy)]
struct Region {
    tag: Tag,
    /// Span including the tags themselves.
    outer: (usize, usize),
    /// Span of the content between the tags.
    inner: (usize, usize),
}

fn scan_tokens(text: &str) -> Vec<TagToken> {
    let mut tokens = Vec::new();
    for tag in ALL_TAGS {
        for (is_open, literal) in [(true, tag.open()), (false, tag.close())] {
            for (start, m) in text.match_indices(literal) {
                tokens.push(TagToken {
                    tag,
                    is_open,
                    start,
                    end: start + m.len(),
                });
            }
        }
    }
    // An open literal never shares a start offset with a close literal, so
    // position alone gives a stable total order.
    tokens.sort_by_key(|t| t.start);
    tokens
}

/// Pair opens with their nearest following close of the same tag.
fn pair_tokens(tokens: &[TagToken]) -> (Vec<Region>, Vec<TagToken>) {
    let mut regions = Vec::new();
    let mut unmatched = Vec::new();
    let mut stacks: [Vec<TagToken>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let idx = |tag: Tag| match tag {
        Tag::Think => 0,
        Tag::ToolCallTag => 1,
        Tag::Answer => 2,
    };
    for tok in tokens {
        if tok.is_open {
            stacks[idx(tok.tag)].push(*tok);
        } else if let Some(open) = stacks[idx(tok.tag)].pop() {
            regions.push(Region {
                tag: tok.tag,
                outer: (open.start, tok.end),
                inner: (open.end, tok.start),
            });
        } else {
            unmatched.push(*tok);
        }
    }
    for stack in stacks {
        unmatched.extend(stack);
    }
    regions.sort_by_key(|r| r.outer.0);
    (regions, unmatched)
}

fn ranges_overlap(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

fn contains(outer: (usize, usize), inner: (usize, usize)) -> bool {
    outer.0 <= inner.0 && inner.1 <= outer.1
}

// ---------------------------------------------------------------------------
// Tool-call argument wire format
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireToolCall {
    name: String,
    arguments: serde_json::Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireZoomArgs {
    image_index: usize,
    bbox: [i64; 4],
    label: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireLookbackArgs {
    image_index: usize,
    reason: String,
}

fn parse_tool_json(content: &str) -> Result<ToolCall, String> {
    let wire: WireToolCall = serde_json::from_str(content.trim())
        .map_err(|e| format!("unparseable tool arguments: {e}"))?;
    match wire.name.as_str() {
        "zoom_in" => {
            let args: WireZoomArgs = serde_json::from_value(wire.arguments)
                .map_err(|e| format!("unparseable tool arguments: {e}"))?;
            let [x1, y1, x2, y2] = args.bbox;
            if x1 >= x2 || y1 >= y2 {
                return Err(format!(
                    "bbox [{x1},{y1},{x2},{y2}] must satisfy x1 < x2 and y1 < y2"
                ));
            }
            let label = args.label.trim();
            if label.is_empty() {
                return Err("zoom_in label is empty".to_string());
            }
            Ok(ToolCall::ZoomIn {
                image_index: args.image_index,
                bbox: BBox::new(x1, y1, x2, y2),
                label: label.to_string(),
            })
        }
        "lookback_reuse" => {
            let args: WireLookbackArgs = serde_json::from_value(wire.arguments)
                .map_err(|e| format!("unparseable tool arguments: {e}"))?;
            let reason = args.reason.trim();
            if reason.is_empty() {
                return Err("lookback_reuse reason is empty".to_string());
            }
            Ok(ToolCall::LookbackReuse {
                image_index: args.image_index,
                reason: reason.to_string(),
            })
        }
        other => Err(format!("unknown tool name: {other:?}")),
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

/// Parse one turn of raw model output. Total: never fails, never panics;
/// malformed input becomes [`TurnAction::Malformed`] with flags.
pub fn parse_turn(text: &str) -> ParsedTurn {
    let mut flags = BTreeSet::new();
    let tokens = scan_tokens(text);
    let (regions, unmatched) = pair_tokens(&tokens);

    for tok in &unmatched {
        flags.insert(match tok.tag {
            Tag::Think => ViolationFlag::UnbalancedThink,
            Tag::ToolCallTag => ViolationFlag::MalformedToolBlock,
            Tag::Answer => ViolationFlag::UnbalancedAnswerTag,
        });
    }

    let think_regions: Vec<&Region> = regions.iter().filter(|r| r.tag == Tag::Think).collect();
    let action_regions: Vec<&Region> = regions.iter().filter(|r| r.tag.is_action()).collect();
    if think_regions.is_empty() {
        flags.insert(ViolationFlag::UnbalancedThink);
    }

    for (i, a) in regions.iter().enumerate() {
        for b in regions.iter().skip(i + 1) {
            if ranges_overlap(a.outer, b.outer) {
                if a.tag == Tag::Think && b.tag == Tag::Think {
                    flags.insert(ViolationFlag::UnbalancedThink);
                } else {
                    flags.insert(ViolationFlag::OverlappingTags);
                }
            }
        }
    }

    // Thinking text: top-level think regions only, so nested blocks are not
    // double-counted.
    let mut thinking = String::new();
    for r in &think_regions {
        let nested = think_regions
            .iter()
            .any(|o| !std::ptr::eq(*o, *r) && contains(o.outer, r.outer));
        if !nested {
            if !thinking.is_empty() {
                thinking.push('\n');
            }
            thinking.push_str(&text[r.inner.0..r.inner.1]);
        }
    }

    // Action intents: matched action regions plus unmatched action opens.
    let unmatched_action_opens: Vec<&TagToken> = unmatched
        .iter()
        .filter(|t| t.tag.is_action() && t.is_open)
        .collect();
    let intent_count = action_regions.len() + unmatched_action_opens.len();
    let answer_intents = action_regions.iter().filter(|r| r.tag == Tag::Answer).count()
        + unmatched_action_opens
            .iter()
            .filter(|t| t.tag == Tag::Answer)
            .count();
    if answer_intents >= 2 {
        flags.insert(ViolationFlag::MultipleAnswers);
    }

    let action = if intent_count == 0 {
        TurnAction::Malformed(
            "no action block found (expected one <tool_call> or <answer>)".to_string(),
        )
    } else if intent_count > 1 {
        flags.insert(ViolationFlag::MultipleActions);
        if answer_intents >= 2 {
            TurnAction::Malformed("multiple answer blocks".to_string())
        } else {
            TurnAction::Malformed("multiple action blocks in one turn".to_string())
        }
    } else if let Some(region) = action_regions.first() {
        let content = &text[region.inner.0..region.inner.1];
        match region.tag {
            Tag::ToolCallTag => match parse_tool_json(content) {
                Ok(call) => TurnAction::ToolCall(call),
                Err(diag) => {
                    flags.insert(ViolationFlag::MalformedToolBlock);
                    TurnAction::Malformed(diag)
                }
            },
            Tag::Answer => TurnAction::FinalAnswer(content.trim().to_string()),
            Tag::Think => unreachable!("think is not an action tag"),
        }
    } else {
        // The single intent is an unclosed open tag.
        let tok = unmatched_action_opens[0];
        TurnAction::Malformed(format!("unclosed {} tag", tok.tag.open()))
    };

    // Stray text: non-whitespace bytes not covered by any matched region or
    // tag token. Text after the last answer block is flagged separately.
    let mut covered: Vec<(usize, usize)> = regions.iter().map(|r| r.outer).collect();
    covered.extend(unmatched.iter().map(|t| (t.start, t.end)));
    covered.sort_unstable();
    let answer_end = action_regions
        .iter()
        .filter(|r| r.tag == Tag::Answer)
        .map(|r| r.outer.1)
        .max();
    let mut cursor = 0usize;
    for (start, end) in covered.iter().copied().chain([(text.len(), text.len())]) {
        if cursor < start {
            let gap = &text[cursor..start];
            if !gap.trim().is_empty() {
                match answer_end {
                    Some(ae) if cursor >= ae => {
                        flags.insert(ViolationFlag::TrailingAfterAnswer);
                    }
                    _ => {
                        flags.insert(ViolationFlag::StrayText);
                    }
                }
            }
        }
        cursor = cursor.max(end);
    }

    ParsedTurn {
        thinking,
        action,
        raw: text.to_string(),
        violation_flags: flags,
    }
}

// ---------------------------------------------------------------------------
// Canonical wire-text builders
// ---------------------------------------------------------------------------

/// Canonical wire text for a tool call, suitable for scripts and prompts.
pub fn tool_call_block(call: &ToolCall) -> String {
    let json = match call {
        ToolCall::ZoomIn {
            image_index,
            bbox,
            label,
        } => serde_json::json!({
            "name": "zoom_in",
            "arguments": {"image_index": image_index, "bbox": [bbox.x1, bbox.y1, bbox.x2, bbox.y2], "label": label},
        }),
        ToolCall::LookbackReuse {
            image_index,
            reason,
        } => serde_json::json!({
            "name": "lookback_reuse",
            "arguments": {"image_index": image_index, "reason": reason},
        }),
    };
    format!("<tool_call>{json}</tool_call>")
}

pub fn answer_block(answer: &str) -> String {
    format!("<answer>{answer}</answer>")
}

pub fn think_block(thinking: &str) -> String {
    format!("<think>{thinking}</think>")
}

/// Compose a full well-formed turn from its parts.
pub fn render_turn(thinking: &str, action_block: &str) -> String {
    format!("{}{}", think_block(thinking), action_block)
}
