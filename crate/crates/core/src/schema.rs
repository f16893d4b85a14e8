//! Call schemas extracted from annotated tool functions.
//!
//! The shape follows the function-calling convention of chat-completion
//! APIs: a name, a description, and a JSON-schema object of parameters.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub parameters: ParameterSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSchema {
    #[serde(rename = "type", default = "object_type")]
    pub kind: String,
    #[serde(default)]
    pub properties: Map<String, Value>,
    #[serde(default)]
    pub required: Vec<String>,
}

fn object_type() -> String {
    "object".into()
}

impl CallSchema {
    pub fn parameter_names(&self) -> Vec<&str> {
        self.parameters.properties.keys().map(String::as_str).collect()
    }

    pub fn is_required(&self, param: &str) -> bool {
        self.parameters.required.iter().any(|r| r == param)
    }

    /// OpenAI-style `tools` entry.
    pub fn to_function_tool(&self) -> Value {
        serde_json::json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.parameters,
            }
        })
    }
}
