//! Uniform access to chat-completion providers.
//!
//! Two backends implement [`ChatProvider`]: [`LiveProvider`] speaks the
//! OpenAI-compatible chat-completions wire format, and [`ReplayProvider`]
//! serves recorded replies keyed by `(stage, ordinal)`. Both report a
//! [`Usage`] priced against the active [`PricingTable`].

mod live;
mod message;
mod metered;
mod redact;
mod replay;
mod usage;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use live::LiveProvider;
pub use metered::{Metered, StageUsage};
pub use message::{ChatMessage, MessageError, Role, ToolCall};
pub use redact::{redact, redact_text, redact_value, redaction_marker};
pub use replay::{FixtureEntry, FixtureUsage, RecordedRequest, ReplayProvider};
pub use usage::{cost_band, meter_session, Cost, PricingError, PricingTable, Rate, Usage};

use crate::schema::CallSchema;

/// Which agent is speaking. Replay fixtures are keyed by this label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TaskAnalyzer,
    ToolMaster,
    ToolSelector,
    CodeWriter,
    TaskSolver,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::TaskAnalyzer,
        Stage::ToolMaster,
        Stage::ToolSelector,
        Stage::CodeWriter,
        Stage::TaskSolver,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::TaskAnalyzer => "task_analyzer",
            Stage::ToolMaster => "tool_master",
            Stage::ToolSelector => "tool_selector",
            Stage::CodeWriter => "code_writer",
            Stage::TaskSolver => "task_solver",
        }
    }

    pub fn parse(label: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.as_str() == label)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One provider round-trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub reply: ChatMessage,
    pub usage: Usage,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{stage}: invalid request: {message}")]
    InvalidRequest { stage: Stage, message: String },
    #[error("{stage}: transport failure: {message}")]
    Transport { stage: Stage, message: String },
    #[error("{stage}: provider returned HTTP {status}: {body}")]
    Status {
        stage: Stage,
        status: u16,
        body: String,
    },
    #[error("{stage}: malformed provider response: {message}")]
    Malformed { stage: Stage, message: String },
    #[error("{stage}: replay fixture exhausted (no entry for ordinal {ordinal})")]
    FixtureExhausted { stage: Stage, ordinal: u32 },
    #[error("fixture {path}: {message}")]
    Fixture { path: String, message: String },
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
}

impl GatewayError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            GatewayError::InvalidRequest { stage, .. }
            | GatewayError::Transport { stage, .. }
            | GatewayError::Status { stage, .. }
            | GatewayError::Malformed { stage, .. }
            | GatewayError::FixtureExhausted { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub trait ChatProvider: Send {
    fn complete(
        &mut self,
        stage: Stage,
        messages: &[ChatMessage],
        tool_schemas: Option<&[CallSchema]>,
    ) -> Result<Exchange, GatewayError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn complete(
        &mut self,
        stage: Stage,
        messages: &[ChatMessage],
        tool_schemas: Option<&[CallSchema]>,
    ) -> Result<Exchange, GatewayError> {
        (**self).complete(stage, messages, tool_schemas)
    }
}

/// Shared precondition of every backend: a non-empty conversation that opens
/// with a system message, and well-formed messages throughout.
pub(crate) fn check_request(stage: Stage, messages: &[ChatMessage]) -> Result<(), GatewayError> {
    let invalid = |message: String| GatewayError::InvalidRequest { stage, message };
    match messages.first() {
        None => return Err(invalid("no messages".into())),
        Some(m) if m.role != Role::System => {
            return Err(invalid("first message must have role system".into()))
        }
        _ => {}
    }
    for (i, m) in messages.iter().enumerate() {
        m.validate().map_err(|e| invalid(format!("message {i}: {e}")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Live {
        endpoint: String,
        /// Name of the environment variable holding the credential.
        credential_env: String,
    },
    Replay {
        fixture_path: PathBuf,
    },
}

impl ProviderConfig {
    pub fn build(&self, pricing: PricingTable) -> Result<Box<dyn ChatProvider>, GatewayError> {
        Ok(match self {
            ProviderConfig::Live {
                endpoint,
                credential_env,
            } => Box::new(LiveProvider::from_env(endpoint, credential_env, pricing)?),
            ProviderConfig::Replay { fixture_path } => Box::new(ReplayProvider::from_file(fixture_path, pricing)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_config_shapes() {
        let live: ProviderConfig = serde_json::from_str(
            r#"{"kind":"live","endpoint":"https://api.openai.com/v1","credential_env":"OPENAI_API_KEY"}"#,
        )
        .unwrap();
        assert!(matches!(live, ProviderConfig::Live { .. }));
        let replay: ProviderConfig =
            serde_json::from_str(r#"{"kind":"replay","fixture_path":"f.json"}"#).unwrap();
        assert!(matches!(replay, ProviderConfig::Replay { .. }));
        // A replay config cannot carry live fields and vice versa.
        assert!(serde_json::from_str::<ProviderConfig>(r#"{"kind":"replay","endpoint":"x"}"#).is_err());
        assert!(serde_json::from_str::<ProviderConfig>(r#"{"kind":"live","fixture_path":"x"}"#).is_err());
    }

    #[test]
    fn request_precondition() {
        let err = check_request(Stage::TaskAnalyzer, &[]).unwrap_err();
        assert!(err.to_string().starts_with("task_analyzer"));
        assert!(check_request(Stage::TaskSolver, &[ChatMessage::user("x")]).is_err());
        assert!(check_request(Stage::TaskSolver, &[ChatMessage::system("s")]).is_ok());
    }

    #[test]
    fn stage_labels_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.as_str()), Some(s));
        }
    }
}
