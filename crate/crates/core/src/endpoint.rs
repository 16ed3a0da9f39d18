//! Generation endpoints: the trait the runtime drives, a deterministic
//! scripted endpoint for tests and offline pipelines, and an HTTP client for
//! any chat-completions service.
//!
//! Endpoints are opaque text generators. They receive the full message
//! history (text and image segments) plus sampling parameters and return one
//! assistant turn. All implementations must be safe to call from concurrent
//! rollout workers.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use thiserror::Error;

use crate::message::{Message, Role, Segment};
use crate::vision::encode_png;

#[derive(Debug, Error)]
pub enum EndpointError {
    /// A scripted endpoint was asked for more turns than its script holds.
    #[error("script exhausted: turn {requested} requested but script has {available} entries")]
    ScriptExhausted { requested: usize, available: usize },
    #[error("failed to load script {path}: {reason}")]
    ScriptLoad { path: String, reason: String },
    /// Network-level failure that persisted through retries.
    #[error("transport failure after {attempts} attempts: {reason}")]
    Transport { attempts: u32, reason: String },
    /// The service answered, but not in the expected shape.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("image encoding failed: {0}")]
    ImageEncoding(#[from] crate::vision::VisionError),
}

/// Sampling controls forwarded to the endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
    /// Per-rollout sampling seed, when the endpoint supports one.
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            max_new_tokens: 4096,
            seed: None,
        }
    }
}

/// Server-reported token accounting, when present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One assistant turn of generated text.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

/// An opaque chat generator. Implementations must be `Send + Sync`; the
/// runtime shares one endpoint across all rollouts of a group.
pub trait ChatEndpoint: Send + Sync {
    fn chat(&self, messages: &[Message], params: &SamplingParams)
        -> Result<ChatResponse, EndpointError>;
}

impl<T: ChatEndpoint + ?Sized> ChatEndpoint for &T {
    fn chat(
        &self,
        messages: &[Message],
        params: &SamplingParams,
    ) -> Result<ChatResponse, EndpointError> {
        (**self).chat(messages, params)
    }
}

impl<T: ChatEndpoint + ?Sized> ChatEndpoint for std::sync::Arc<T> {
    fn chat(
        &self,
        messages: &[Message],
        params: &SamplingParams,
    ) -> Result<ChatResponse, EndpointError> {
        (**self).chat(messages, params)
    }
}

// ---------------------------------------------------------------------------
// Scripted endpoint
// ---------------------------------------------------------------------------

/// How a [`ScriptedEndpoint`] picks the next canned turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptMode {
    /// Index by the number of assistant messages already in the request.
    /// Stateless, so concurrent trajectories each replay the same script.
    PerTurn,
    /// Serve entries in order across calls via an internal counter. Suited
    /// to single-turn agents called repeatedly (generation, verification).
    Sequential,
}

/// Deterministic endpoint replaying canned turns. Errors past the end of
/// its script rather than improvising.
pub struct ScriptedEndpoint {
    turns: Vec<String>,
    mode: ScriptMode,
    cursor: AtomicUsize,
}

impl ScriptedEndpoint {
    pub fn per_turn(turns: Vec<String>) -> Self {
        ScriptedEndpoint {
            turns,
            mode: ScriptMode::PerTurn,
            cursor: AtomicUsize::new(0),
        }
    }

    pub fn sequential(turns: Vec<String>) -> Self {
        ScriptedEndpoint {
            turns,
            mode: ScriptMode::Sequential,
            cursor: AtomicUsize::new(0),
        }
    }

    /// Load a script file. `.jsonl` holds one JSON string per line; any
    /// other extension is plain text with turns separated by `---` lines.
    pub fn from_file<P: AsRef<Path>>(path: P, mode: ScriptMode) -> Result<Self, EndpointError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| EndpointError::ScriptLoad {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let turns = parse_script(&raw, path.extension().and_then(|e| e.to_str())).map_err(
            |reason| EndpointError::ScriptLoad {
                path: path.display().to_string(),
                reason,
            },
        )?;
        Ok(match mode {
            ScriptMode::PerTurn => ScriptedEndpoint::per_turn(turns),
            ScriptMode::Sequential => ScriptedEndpoint::sequential(turns),
        })
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

fn parse_script(raw: &str, extension: Option<&str>) -> Result<Vec<String>, String> {
    let turns = if extension == Some("jsonl") {
        raw.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                serde_json::from_str::<String>(line)
                    .map_err(|e| format!("line is not a JSON string: {e}"))
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        raw.split("\n---\n")
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect()
    };
    if turns.is_empty() {
        return Err("script contains no turns".to_string());
    }
    Ok(turns)
}

impl ChatEndpoint for ScriptedEndpoint {
    fn chat(
        &self,
        messages: &[Message],
        _params: &SamplingParams,
    ) -> Result<ChatResponse, EndpointError> {
        let index = match self.mode {
            ScriptMode::PerTurn => messages.iter().filter(|m| m.role == Role::Assistant).count(),
            ScriptMode::Sequential => self.cursor.fetch_add(1, Ordering::SeqCst),
        };
        let text = self
            .turns
            .get(index)
            .ok_or(EndpointError::ScriptExhausted {
                requested: index,
                available: self.turns.len(),
            })?
            .clone();
        Ok(ChatResponse { text, usage: None })
    }
}

// ---------------------------------------------------------------------------
// HTTP chat-completions endpoint
// ---------------------------------------------------------------------------

const TRANSPORT_RETRIES: u32 = 3;

/// Client for a standard chat-completions HTTP service. Message content is
/// sent as typed parts (text, base64 PNG image). Transport failures are
/// retried with exponential backoff; generation-level errors are not.
pub struct HttpChatEndpoint {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    auth_token: Option<String>,
    backoff_base: Duration,
}

impl HttpChatEndpoint {
    pub fn new(base_url: &str, model: &str, auth_token: Option<String>) -> Self {
        let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
        HttpChatEndpoint {
            client: reqwest::blocking::Client::new(),
            url,
            model: model.to_string(),
            auth_token,
            backoff_base: Duration::from_millis(250),
        }
    }

    /// Shrink the retry backoff; test hook.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn build_body(
        &self,
        messages: &[Message],
        params: &SamplingParams,
    ) -> Result<serde_json::Value, EndpointError> {
        let mut wire_messages = Vec::with_capacity(messages.len());
        for message in messages {
            let mut parts = Vec::with_capacity(message.segments.len());
            for segment in &message.segments {
                match segment {
                    Segment::Text(text) => {
                        parts.push(serde_json::json!({"type": "text", "text": text}));
                    }
                    Segment::Image(img) => {
                        let png = encode_png(&img.image)?;
                        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
                        parts.push(serde_json::json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:image/png;base64,{b64}")},
                        }));
                    }
                }
            }
            wire_messages.push(serde_json::json!({
                "role": message.role.as_str(),
                "content": parts,
            }));
        }
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": wire_messages,
            "temperature": params.temperature,
            "max_tokens": params.max_new_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = serde_json::json!(seed);
        }
        Ok(body)
    }
}

#[derive(Deserialize)]
struct WireCompletion {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: serde_json::Value,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Extract assistant text from either a plain string or a typed-parts list.
fn content_text(content: &serde_json::Value) -> Result<String, EndpointError> {
    match content {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Array(parts) => {
            let mut out = String::new();
            for part in parts {
                if part.get("type").and_then(|t| t.as_str()) == Some("text") {
                    if let Some(text) = part.get("text").and_then(|t| t.as_str()) {
                        out.push_str(text);
                    }
                }
            }
            Ok(out)
        }
        serde_json::Value::Null => Ok(String::new()),
        other => Err(EndpointError::Protocol(format!(
            "unexpected message content shape: {other}"
        ))),
    }
}

impl ChatEndpoint for HttpChatEndpoint {
    fn chat(
        &self,
        messages: &[Message],
        params: &SamplingParams,
    ) -> Result<ChatResponse, EndpointError> {
        let body = self.build_body(messages, params)?;
        let mut last_error = String::new();
        for attempt in 0..=TRANSPORT_RETRIES {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
            }
            let mut request = self.client.post(&self.url).json(&body);
            if let Some(token) = &self.auth_token {
                request = request.bearer_auth(token);
            }
            let response = match request.send() {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            if status.is_server_error() {
                last_error = format!("server status {status}");
                continue;
            }
            if !status.is_success() {
                let detail = response.text().unwrap_or_default();
                return Err(EndpointError::Protocol(format!(
                    "status {status}: {}",
                    detail.chars().take(500).collect::<String>()
                )));
            }
            let completion: WireCompletion = response
                .json()
                .map_err(|e| EndpointError::Protocol(format!("bad completion JSON: {e}")))?;
            let choice = completion
                .choices
                .first()
                .ok_or_else(|| EndpointError::Protocol("no choices in completion".to_string()))?;
            let text = content_text(&choice.message.content)?;
            let usage = completion.usage.map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            });
            return Ok(ChatResponse { text, usage });
        }
        Err(EndpointError::Transport {
            attempts: TRANSPORT_RETRIES + 1,
            reason: last_error,
        })
    }
}
