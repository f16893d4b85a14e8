use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    System,
    User,
    Assistant,
    ToolResult,
}

/// A structured function call proposed by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, arguments: Map<String, Value>) -> Self {
        Self {
            id: None,
            name: name.into(),
            arguments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    /// Provider-side id of the call this message answers (tool-result only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_id: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MessageError {
    #[error("tool_call is only allowed on assistant messages (found on {0:?})")]
    MisplacedToolCall(Role),
    #[error("tool-result messages must name their tool")]
    MissingToolName,
    #[error("tool_name is only allowed on tool-result messages (found on {0:?})")]
    MisplacedToolName(Role),
}

impl ChatMessage {
    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_call: None,
            tool_name: None,
            call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn assistant_call(content: impl Into<String>, call: ToolCall) -> Self {
        Self {
            tool_call: Some(call),
            ..Self::plain(Role::Assistant, content)
        }
    }

    pub fn tool_result(
        tool_name: impl Into<String>,
        call_id: Option<String>,
        content: impl Into<String>,
    ) -> Self {
        Self {
            tool_name: Some(tool_name.into()),
            call_id,
            ..Self::plain(Role::ToolResult, content)
        }
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        if self.tool_call.is_some() && self.role != Role::Assistant {
            return Err(MessageError::MisplacedToolCall(self.role));
        }
        match (self.role, &self.tool_name) {
            (Role::ToolResult, None) => Err(MessageError::MissingToolName),
            (Role::ToolResult, Some(_)) => Ok(()),
            (role, Some(_)) => Err(MessageError::MisplacedToolName(role)),
            _ => Ok(()),
        }
    }
}
