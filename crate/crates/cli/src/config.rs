//! TOML run configuration.
//!
//! One file configures every command. Only the `[endpoint]` section is
//! required; all other sections fall back to the documented defaults.
//! Unknown keys are rejected everywhere so typos fail loudly instead of
//! silently running with defaults.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use visloop_core::endpoint::{ChatEndpoint, SamplingParams, ScriptMode};
use visloop_core::pipeline::{DifficultyBand, SegmentParams};
use visloop_core::reward::RewardWeights;
use visloop_core::runtime::RunLimits;
use visloop_core::{HttpChatEndpoint, ScriptedEndpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    /// Canned turns from a script file; no network.
    Scripted,
    /// An OpenAI-style chat-completions server.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptModeConfig {
    PerTurn,
    Sequential,
}

impl Default for ScriptModeConfig {
    fn default() -> Self {
        ScriptModeConfig::PerTurn
    }
}

impl From<ScriptModeConfig> for ScriptMode {
    fn from(mode: ScriptModeConfig) -> ScriptMode {
        match mode {
            ScriptModeConfig::PerTurn => ScriptMode::PerTurn,
            ScriptModeConfig::Sequential => ScriptMode::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub kind: EndpointKind,
    /// Remote: server base URL, e.g. "http://localhost:8000/v1".
    #[serde(default)]
    pub base_url: Option<String>,
    /// Remote: model name sent with each request.
    #[serde(default)]
    pub model: Option<String>,
    /// Remote: environment variable holding the bearer token, if any.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    /// Scripted: path to the canned turns.
    #[serde(default)]
    pub script_path: Option<String>,
    #[serde(default)]
    pub script_mode: ScriptModeConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_new_tokens() -> u32 {
    4096
}

impl EndpointConfig {
    fn validate(&self, section: &str) -> Result<()> {
        match self.kind {
            EndpointKind::Remote => {
                if self.base_url.is_none() || self.model.is_none() {
                    bail!("[{section}] remote endpoints need base_url and model");
                }
            }
            EndpointKind::Scripted => {
                if self.script_path.is_none() {
                    bail!("[{section}] scripted endpoints need script_path");
                }
            }
        }
        Ok(())
    }

    /// Instantiate the configured endpoint.
    pub fn build(&self) -> Result<Arc<dyn ChatEndpoint>> {
        match self.kind {
            EndpointKind::Scripted => {
                let path = self
                    .script_path
                    .as_deref()
                    .context("scripted endpoint without script_path")?;
                let endpoint = ScriptedEndpoint::from_file(path, self.script_mode.into())
                    .with_context(|| format!("loading script {path}"))?;
                Ok(Arc::new(endpoint))
            }
            EndpointKind::Remote => {
                let base_url = self
                    .base_url
                    .as_deref()
                    .context("remote endpoint without base_url")?;
                let model = self.model.as_deref().context("remote endpoint without model")?;
                let token = match &self.auth_token_env {
                    None => None,
                    Some(var) => Some(std::env::var(var).with_context(|| {
                        format!("auth_token_env names {var}, which is not set")
                    })?),
                };
                Ok(Arc::new(HttpChatEndpoint::new(base_url, model, token)))
            }
        }
    }

    pub fn sampling(&self, seed: Option<u64>) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitsConfig {
    pub max_interactions: u32,
    pub max_input_tokens: u64,
    pub max_response_tokens: u64,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        let limits = RunLimits::default();
        LimitsConfig {
            max_interactions: limits.max_interactions,
            max_input_tokens: limits.max_input_tokens,
            max_response_tokens: limits.max_response_tokens,
        }
    }
}

impl LimitsConfig {
    pub fn to_limits(self) -> RunLimits {
        RunLimits {
            max_interactions: self.max_interactions,
            max_input_tokens: self.max_input_tokens,
            max_response_tokens: self.max_response_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub group_size: usize,
    /// Prompts are processed and logged in batches of this size.
    pub batch_size: usize,
    pub train_pixel_budget: u64,
    /// Optional tighter per-image cap; defaults to the total budget.
    pub per_image_max_pixels: Option<u64>,
    pub seed: u64,
    /// Kept for config compatibility; the group-relative baseline replaces
    /// any KL term, so nonzero values are rejected.
    pub kl_coeff: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            group_size: 8,
            batch_size: 256,
            train_pixel_budget: 4_000_000,
            per_image_max_pixels: None,
            seed: 17,
            kl_coeff: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pixel_budget: u64,
    pub temperature: f64,
    /// 1 = single greedy pass; 3 = report the mean of three runs.
    pub runs: u32,
    pub concurrency: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pixel_budget: 16_384 * 28 * 28,
            temperature: 0.0,
            runs: 1,
            concurrency: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub min_poster_side: u32,
    pub min_region_pixels: u64,
    pub max_regions: usize,
    pub gutter_min_frac: f64,
    pub variance_threshold: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        let params = SegmentParams::default();
        SegmentConfig {
            min_poster_side: params.min_poster_side,
            min_region_pixels: params.min_region_pixels,
            max_regions: params.max_regions,
            gutter_min_frac: params.gutter_min_frac,
            variance_threshold: params.variance_threshold,
        }
    }
}

impl SegmentConfig {
    pub fn to_params(self) -> SegmentParams {
        SegmentParams {
            min_poster_side: self.min_poster_side,
            min_region_pixels: self.min_region_pixels,
            max_regions: self.max_regions,
            gutter_min_frac: self.gutter_min_frac,
            variance_threshold: self.variance_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub min_image_pixels: u64,
    pub generation_attempts: u32,
    pub max_revisions: u32,
    pub difficulty_rollouts: u32,
    /// Inclusive [low, high] band of correct rollouts a QA must land in.
    pub difficulty_band: [u32; 2],
    pub review_sample_rate: f64,
    pub seed: u64,
    pub segment: SegmentConfig,
    /// Agent endpoints; each falls back to the main `[endpoint]`.
    pub generator: Option<EndpointConfig>,
    pub verifier: Option<EndpointConfig>,
    pub reviser: Option<EndpointConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            min_image_pixels: 1_000_000,
            generation_attempts: 3,
            max_revisions: 3,
            difficulty_rollouts: 5,
            difficulty_band: [1, 4],
            review_sample_rate: 0.1,
            seed: 23,
            segment: SegmentConfig::default(),
            generator: None,
            verifier: None,
            reviser: None,
        }
    }
}

impl PipelineConfig {
    pub fn band(&self) -> DifficultyBand {
        DifficultyBand {
            low: self.difficulty_band[0],
            high: self.difficulty_band[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub endpoint: EndpointConfig,
    /// Optional judge endpoint for free-form gold answers.
    #[serde(default)]
    pub judge: Option<EndpointConfig>,
    #[serde(default)]
    pub limits: LimitsConfig,
    #[serde(default)]
    pub reward: RewardWeights,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).context("parsing config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref())
            .with_context(|| format!("reading {}", path.as_ref().display()))?;
        RunConfig::from_toml(&text)
    }

    fn validate(&self) -> Result<()> {
        self.endpoint.validate("endpoint")?;
        if let Some(judge) = &self.judge {
            judge.validate("judge")?;
        }
        for (section, agent) in [
            ("pipeline.generator", &self.pipeline.generator),
            ("pipeline.verifier", &self.pipeline.verifier),
            ("pipeline.reviser", &self.pipeline.reviser),
        ] {
            if let Some(agent) = agent {
                agent.validate(section)?;
            }
        }
        if self.rollout.kl_coeff != 0.0 {
            bail!(
                "[rollout] kl_coeff must be 0: the group-relative baseline \
                 replaces the KL term"
            );
        }
        if self.rollout.group_size == 0 {
            bail!("[rollout] group_size must be at least 1");
        }
        if self.rollout.batch_size == 0 {
            bail!("[rollout] batch_size must be at least 1");
        }
        self.limits
            .to_limits()
            .validate()
            .map_err(|reason| anyhow::anyhow!("[limits] {reason}"))?;
        if self.eval.runs == 0 {
            bail!("[eval] runs must be at least 1");
        }
        if self.eval.concurrency == 0 {
            bail!("[eval] concurrency must be at least 1");
        }
        let [low, high] = self.pipeline.difficulty_band;
        if low > high || high > self.pipeline.difficulty_rollouts {
            bail!(
                "[pipeline] difficulty_band [{low}, {high}] must be ordered \
                 and lie within 0..={}",
                self.pipeline.difficulty_rollouts
            );
        }
        if !(0.0..=1.0).contains(&self.pipeline.review_sample_rate) {
            bail!("[pipeline] review_sample_rate must be in [0, 1]");
        }
        if self.pipeline.generation_attempts == 0 {
            bail!("[pipeline] generation_attempts must be at least 1");
        }
        Ok(())
    }
}
