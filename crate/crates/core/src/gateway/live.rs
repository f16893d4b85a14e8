use std::thread;
use std::time::Duration;

use serde_json::{json, Map, Value};

use super::{
    check_request, redact, redact_value, ChatMessage, ChatProvider, Exchange, GatewayError,
    PricingTable, Role, Stage, ToolCall,
};
use crate::schema::CallSchema;
use crate::vault::Secret;

const RETRY_BACKOFF: Duration = Duration::from_millis(750);

/// OpenAI-compatible chat-completions client.
pub struct LiveProvider {
    http: reqwest::blocking::Client,
    url: String,
    credential: Secret,
    pricing: PricingTable,
    redact_secrets: Vec<Secret>,
}

impl LiveProvider {
    /// `endpoint` is the API base (for example `https://api.openai.com/v1`).
    pub fn new(endpoint: &str, credential: Secret, pricing: PricingTable) -> Self {
        Self {
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(300))
                .build()
                .expect("http client"),
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            credential,
            pricing,
            redact_secrets: Vec::new(),
        }
    }

    /// Reads the credential from the named environment variable.
    pub fn from_env(
        endpoint: &str,
        credential_env: &str,
        pricing: PricingTable,
    ) -> Result<Self, GatewayError> {
        let key = std::env::var(credential_env)
            .map_err(|_| GatewayError::MissingCredential(credential_env.to_string()))?;
        Ok(Self::new(endpoint, Secret::new("provider", key), pricing))
    }

    /// Secrets scrubbed from every outbound body.
    pub fn with_redaction(mut self, secrets: Vec<Secret>) -> Self {
        self.redact_secrets = secrets;
        self
    }

    pub fn set_redaction(&mut self, secrets: Vec<Secret>) {
        self.redact_secrets = secrets;
    }

    pub fn request_body(
        &self,
        messages: &[ChatMessage],
        tool_schemas: Option<&[CallSchema]>,
    ) -> Value {
        let messages = redact(messages, &self.redact_secrets);
        let mut body = json!({
            "model": self.pricing.model_id,
            "messages": messages.iter().map(wire_message).collect::<Vec<_>>(),
        });
        if let Some(schemas) = tool_schemas.filter(|s| !s.is_empty()) {
            body["tools"] = schemas.iter().map(CallSchema::to_function_tool).collect();
        }
        redact_value(&mut body, &self.redact_secrets);
        body
    }

    fn send_once(&self, stage: Stage, body: &Value) -> Result<Value, GatewayError> {
        let resp = self
            .http
            .post(&self.url)
            .bearer_auth(self.credential.expose())
            .json(body)
            .send()
            .map_err(|e| GatewayError::Transport {
                stage,
                message: e.to_string(),
            })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport {
            stage,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(GatewayError::Status {
                stage,
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Malformed {
            stage,
            message: e.to_string(),
        })
    }
}

fn retryable(err: &GatewayError) -> bool {
    match err {
        GatewayError::Transport { .. } => true,
        GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

fn wire_message(m: &ChatMessage) -> Value {
    match m.role {
        Role::System => json!({"role": "system", "content": m.content}),
        Role::User => json!({"role": "user", "content": m.content}),
        Role::Assistant => {
            let mut v = json!({"role": "assistant", "content": m.content});
            if let Some(call) = &m.tool_call {
                let id = call.id.clone().unwrap_or_else(|| "call_0".into());
                v["tool_calls"] = json!([{
                    "id": id,
                    "type": "function",
                    "function": {
                        "name": call.name,
                        "arguments": Value::Object(call.arguments.clone()).to_string(),
                    }
                }]);
            }
            v
        }
        Role::ToolResult => match &m.call_id {
            Some(id) => json!({"role": "tool", "tool_call_id": id, "content": m.content}),
            None => json!({
                "role": "user",
                "content": format!(
                    "Result of {}:\n{}",
                    m.tool_name.as_deref().unwrap_or("tool"),
                    m.content
                ),
            }),
        },
    }
}

fn parse_reply(stage: Stage, body: &Value) -> Result<(ChatMessage, u64, u64), GatewayError> {
    let malformed = |message: &str| GatewayError::Malformed {
        stage,
        message: message.to_string(),
    };
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| malformed("missing choices[0].message"))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let reply = match message.pointer("/tool_calls/0") {
        Some(call) => {
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("tool call without function name"))?;
            let raw_args = call
                .pointer("/function/arguments")
                .and_then(Value::as_str)
                .unwrap_or("{}");
            let arguments: Map<String, Value> = serde_json::from_str(raw_args)
                .map_err(|e| malformed(&format!("tool call arguments: {e}")))?;
            let mut tc = ToolCall::new(name, arguments);
            tc.id = call.get("id").and_then(Value::as_str).map(str::to_string);
            ChatMessage::assistant_call(content, tc)
        }
        None => ChatMessage::assistant(content),
    };
    let tokens = |key: &str| {
        body.pointer(&format!("/usage/{key}"))
            .and_then(Value::as_u64)
            .ok_or_else(|| malformed(&format!("missing usage.{key}")))
    };
    Ok((reply, tokens("prompt_tokens")?, tokens("completion_tokens")?))
}

impl ChatProvider for LiveProvider {
    fn complete(
        &mut self,
        stage: Stage,
        messages: &[ChatMessage],
        tool_schemas: Option<&[CallSchema]>,
    ) -> Result<Exchange, GatewayError> {
        check_request(stage, messages)?;
        let body = self.request_body(messages, tool_schemas);
        let response = match self.send_once(stage, &body) {
            Err(e) if retryable(&e) => {
                tracing::warn!(%stage, error = %e, "provider call failed, retrying once");
                thread::sleep(RETRY_BACKOFF);
                self.send_once(stage, &body)?
            }
            other => other?,
        };
        let (reply, prompt, completion) = parse_reply(stage, &response)?;
        Ok(Exchange {
            reply,
            usage: self.pricing.usage(prompt, completion),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_is_openai_shaped_and_redacted() {
        let p = LiveProvider::new("http://localhost:1/v1/", Secret::new("provider", "pk"), PricingTable::default())
            .with_redaction(vec![Secret::new("serpapi", "sk-LEAK")]);
        let mut args = Map::new();
        args.insert("q".into(), json!("sk-LEAK"));
        let msgs = [
            ChatMessage::system("s"),
            ChatMessage::user("use sk-LEAK"),
            ChatMessage::assistant_call("", ToolCall::new("search", args)),
            ChatMessage::tool_result("search", None, "done"),
        ];
        let body = p.request_body(&msgs, None);
        let text = body.to_string();
        assert!(!text.contains("sk-LEAK"));
        assert_eq!(body["model"], "gpt-4-0613");
        assert_eq!(body["messages"][2]["tool_calls"][0]["function"]["name"], "search");
        assert_eq!(body["messages"][3]["role"], "user");
        assert!(body.get("tools").is_none());
        assert_eq!(p.url, "http://localhost:1/v1/chat/completions");
    }

    #[test]
    fn parses_tool_call_reply() {
        let body = json!({
            "choices": [{"message": {"role": "assistant", "content": null, "tool_calls": [
                {"id": "c1", "type": "function", "function": {"name": "f", "arguments": "{\"x\": 1}"}}
            ]}}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 4}
        });
        let (m, p, c) = parse_reply(Stage::TaskSolver, &body).unwrap();
        let call = m.tool_call.unwrap();
        assert_eq!((call.name.as_str(), call.id.as_deref(), p, c), ("f", Some("c1"), 3, 4));
        assert_eq!(call.arguments["x"], 1);
    }

    #[test]
    fn missing_usage_is_malformed() {
        let body = json!({"choices": [{"message": {"content": "hi"}}]});
        assert!(matches!(
            parse_reply(Stage::TaskSolver, &body),
            Err(GatewayError::Malformed { .. })
        ));
    }
}
