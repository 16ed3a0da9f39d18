//! Command implementations behind the `visloop` binary.
//!
//! Everything here is plumbing: TOML configuration, line-delimited manifest
//! loading, and the five commands (rollout, evaluate, curate, score,
//! export-check) wired onto the core crate. Each command is a plain
//! function over parsed inputs so the test suite can drive them without a
//! process boundary.

pub mod config;
pub mod curate;
pub mod eval;
pub mod manifest;
pub mod rollout;
pub mod score;
