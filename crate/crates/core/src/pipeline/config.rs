use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    /// Describes the image.
    Caption,
    /// Explains how the gold answer follows from the caption.
    Reasoning,
    /// Writes the reworded questions and validates them.
    Meta,
}

impl AgentRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Caption => "caption",
            AgentRole::Reasoning => "reasoning",
            AgentRole::Meta => "meta",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_retries() -> u32 {
    2
}
fn default_timeout() -> u64 {
    60
}
fn default_rate() -> f64 {
    1.0
}
fn default_backoff() -> u64 {
    500
}
fn default_in_flight() -> usize {
    4
}

/// One chat-completion endpoint and how to talk to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default = "placeholder_role", skip_serializing)]
    pub role: AgentRole,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    /// Prompt template id; defaults to the role name.
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Requests per second, shared by every agent on the same endpoint.
    #[serde(default = "default_rate")]
    pub rate_limit: f64,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn placeholder_role() -> AgentRole {
    AgentRole::Meta
}

impl AgentConfig {
    pub fn new(role: AgentRole, endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        AgentConfig {
            role,
            endpoint: endpoint.into(),
            model: model.into(),
            auth_env: None,
            template: None,
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            rate_limit: default_rate(),
            backoff_ms: default_backoff(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn template_id(&self) -> &str {
        self.template.as_deref().unwrap_or(self.role.as_str())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(format!("{} agent: {msg}", self.role)));
        match ureq::http::Uri::from_str(&self.endpoint) {
            Ok(uri)
                if matches!(uri.scheme_str(), Some("http" | "https")) && uri.host().is_some() => {}
            _ => return bad(format!("malformed endpoint `{}`", self.endpoint)),
        }
        if self.model.trim().is_empty() {
            return bad("model is empty".into());
        }
        if !(self.rate_limit > 0.0 && self.rate_limit.is_finite()) {
            return bad(format!("rate limit must be positive, got {}", self.rate_limit));
        }
        if self.timeout_secs == 0 {
            return bad("timeout must be positive".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptMode {
    /// Call endpoints; keep nothing.
    Live,
    /// Call endpoints and store every exchange; stored exchanges are reused.
    #[default]
    Record,
    /// Answer only from stored exchanges.
    Replay,
}

impl FromStr for TranscriptMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(TranscriptMode::Live),
            "record" => Ok(TranscriptMode::Record),
            "replay" => Ok(TranscriptMode::Replay),
            other => Err(PipelineError::Config(format!("unknown transcript mode `{other}`"))),
        }
    }
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSettings {
    /// Items processed at once.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub transcript_mode: TranscriptMode,
    /// Transcript directory; relative paths resolve against the output directory.
    #[serde(default)]
    pub transcripts: Option<PathBuf>,
    /// Directory of `<template id>.txt` files overriding the built-in prompts.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    /// Base directory for relative image paths.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    /// Use the meta agent's reworded answers instead of the original gold answer.
    #[serde(default)]
    pub allow_reworded_answers: bool,
    #[serde(default)]
    pub validation_template: Option<String>,
    #[serde(default)]
    pub reminder_template: Option<String>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            concurrency: default_concurrency(),
            transcript_mode: TranscriptMode::default(),
            transcripts: None,
            templates_dir: None,
            image_root: None,
            allow_reworded_answers: false,
            validation_template: None,
            reminder_template: None,
        }
    }
}

/// Parsed agents file: a `[pipeline]` table plus `[agents.caption]`,
/// `[agents.reasoning]` and `[agents.meta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub settings: PipelineSettings,
    pub caption: AgentConfig,
    pub reasoning: AgentConfig,
    pub meta: AgentConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    pipeline: PipelineSettings,
    agents: BTreeMap<AgentRole, AgentConfig>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut agents = raw.agents;
        let mut take = |role: AgentRole| -> Result<AgentConfig, PipelineError> {
            let mut cfg = agents
                .remove(&role)
                .ok_or_else(|| PipelineError::Config(format!("missing [agents.{role}] table")))?;
            cfg.role = role;
            cfg.validate()?;
            Ok(cfg)
        };
        let config = PipelineConfig {
            caption: take(AgentRole::Caption)?,
            reasoning: take(AgentRole::Reasoning)?,
            meta: take(AgentRole::Meta)?,
            settings: raw.pipeline,
        };
        if config.settings.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be positive".into()));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn agents(&self) -> [&AgentConfig; 3] {
        [&self.caption, &self.reasoning, &self.meta]
    }
}
