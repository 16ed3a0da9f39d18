//! Rollout engine and data pipeline for multi-image, tool-using vision agents.
//!
//! The crate drives a think–act–iterate loop against any chat-inference
//! endpoint: the model thinks in `<think>` tags, acts with one of two visual
//! tools (`zoom_in` for local confirmation, `lookback_reuse` for global
//! reflection) or a final `<answer>`, and iterates on the returned results
//! until it answers or runs out of interaction budget.
//!
//! Modules map onto the stages of that loop:
//!
//! - [`protocol`] — the textual turn grammar and its total parser.
//! - [`message`] — role/segment primitives shared by every layer.
//! - [`vision`] — image sets under pixel budgets and the two visual tools.
//! - [`endpoint`] — chat endpoints: HTTP chat-completions and scripted mocks.
//! - [`runtime`] — the trajectory loop, token accounting, rollout groups.
//! - [`reward`] — composite reward, format scoring, validity classification.
//! - [`group`] — action/trajectory masks and group-relative advantages.
//! - [`export`] — the line-delimited trainer export schema.
//! - [`pipeline`] — the three-stage multi-image QA curation pipeline.

pub mod endpoint;
pub mod export;
pub mod group;
pub mod message;
pub mod pipeline;
pub mod protocol;
pub mod reward;
pub mod runtime;
pub mod vision;

pub use endpoint::{ChatEndpoint, EndpointError, HttpChatEndpoint, ScriptedEndpoint};
pub use export::ExportRecord;
pub use group::{build_action_mask, build_masked_group, group_advantages, MaskedGroup};
pub use message::{Message, Role, Segment};
pub use pipeline::{QACandidate, QAStatus};
pub use protocol::{parse_turn, ParsedTurn, ToolCall, TurnAction};
pub use reward::{
    classify_validity, compute_reward, format_score, RewardBreakdown, RewardWeights, Validity,
};
pub use runtime::{run_group, run_trajectory, RunLimits, Trajectory};
pub use vision::{execute_lookback, execute_zoom_in, prepare_image_set, ImageSet, ToolResult};
