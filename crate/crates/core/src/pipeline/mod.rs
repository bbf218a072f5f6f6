//! Cluster construction: caption, reasoning and meta agents over chat-completion
//! endpoints, local validation rules, and an offline rule-based word perturber.

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;

pub mod client;
pub mod config;
pub mod prompts;
mod rules;
mod run;

pub use client::{
    AgentClient, ChatTransport, Exchange, HttpTransport, Message, RateLimiter, Semaphore,
    Transcript, TranscriptStore, TransportError,
};
pub use config::{AgentConfig, AgentRole, PipelineConfig, PipelineSettings, TranscriptMode};
pub use rules::{item_seed, rule_word_perturb, PROTECTED, SYNONYMS};
pub use run::*;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{role} agent failed after {attempts} attempt(s): {source}")]
    Endpoint {
        role: AgentRole,
        attempts: u32,
        #[source]
        source: TransportError,
    },
    #[error("{role} agent returned an empty response")]
    EmptyResponse { role: AgentRole },
    #[error("replay: no recorded {role} exchange with key {key}")]
    MissingTranscript { role: AgentRole, key: String },
    #[error("corrupt transcript {0}")]
    Transcript(String),
    #[error("item {item_id}: meta agent reply unparseable after re-prompt: {message}")]
    Unparseable { item_id: String, message: String },
    #[error("question `{0}` has fewer than two tokens")]
    TooShort(String),
    #[error("no word-level rule applies to `{0}`")]
    NoTransformation(String),
}

impl PipelineError {
    /// True for failures talking to an endpoint, including replay misses.
    pub fn is_endpoint(&self) -> bool {
        matches!(
            self,
            PipelineError::Endpoint { .. }
                | PipelineError::EmptyResponse { .. }
                | PipelineError::MissingTranscript { .. }
        )
    }
}
