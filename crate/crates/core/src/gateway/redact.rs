use serde_json::Value;

use super::message::ChatMessage;
use crate::vault::Secret;

pub fn redaction_marker(secret: &Secret) -> String {
    format!("<<REDACTED:{}>>", secret.name())
}

/// Replaces every plaintext occurrence of each secret in `text`.
///
/// Longer secrets are replaced first so a secret that contains another one
/// is not split by the shorter replacement.
pub fn redact_text(text: &str, secrets: &[Secret]) -> String {
    let mut ordered: Vec<&Secret> = secrets.iter().filter(|s| !s.expose().is_empty()).collect();
    ordered.sort_by_key(|s| std::cmp::Reverse(s.expose().len()));
    let mut out = text.to_string();
    for s in ordered {
        if out.contains(s.expose()) {
            out = out.replace(s.expose(), &redaction_marker(s));
        }
    }
    out
}

pub fn redact_value(value: &mut Value, secrets: &[Secret]) {
    match value {
        Value::String(s) => *s = redact_text(s, secrets),
        Value::Array(items) => items.iter_mut().for_each(|v| redact_value(v, secrets)),
        Value::Object(map) => map.values_mut().for_each(|v| redact_value(v, secrets)),
        _ => {}
    }
}

/// Returns a copy of `messages` with no secret plaintext left in any text
/// field, including tool-call arguments.
pub fn redact(messages: &[ChatMessage], secrets: &[Secret]) -> Vec<ChatMessage> {
    if secrets.is_empty() {
        return messages.to_vec();
    }
    messages
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.content = redact_text(&m.content, secrets);
            if let Some(call) = m.tool_call.as_mut() {
                call.name = redact_text(&call.name, secrets);
                for v in call.arguments.values_mut() {
                    redact_value(v, secrets);
                }
            }
            if let Some(name) = m.tool_name.as_mut() {
                *name = redact_text(name, secrets);
            }
            m
        })
        .collect()
}
