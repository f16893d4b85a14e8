//! Final-stage agent: answers directly or runs a one-tool-per-step
//! function-calling loop over registered tools.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::approval::ApprovedSource;
use crate::extract::{code_blocks, ends_with_terminate, first_json_records, strip_terminate};
use crate::gateway::{ChatMessage, ChatProvider, GatewayError, Stage, ToolCall};
use crate::harness::{self, HarnessError};
use crate::prompts::PromptSet;
use crate::registry::ToolRecord;
use crate::retrieval::truncate_bytes;
use crate::sandbox::{Sandbox, SandboxError};
use crate::schema::CallSchema;
use crate::trace::{EventKind, TraceLog};
use crate::vault::SecretVault;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_steps: u32,
    /// Cap on each tool result fed back to the model.
    pub result_cap: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_steps: 10,
            result_cap: 16 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Proposal {
    ToolCall {
        name: String,
        arguments: Map<String, Value>,
    },
    FinalText {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StepResult {
    Ok { value: Value, artifacts: Vec<PathBuf> },
    InvalidCall { message: String },
    /// Second consecutive invalid proposal for the same tool.
    Failed { message: String },
    ToolError { code: String, message: String },
    Crash { message: String },
    NoAction,
}

impl StepResult {
    pub fn status(&self) -> &'static str {
        match self {
            StepResult::Ok { .. } => "ok",
            StepResult::InvalidCall { .. } => "invalid_call",
            StepResult::Failed { .. } => "failed",
            StepResult::ToolError { .. } => "tool_error",
            StepResult::Crash { .. } => "crash",
            StepResult::NoAction => "no_action",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStep {
    pub index: u32,
    pub proposal: Proposal,
    pub result: Option<StepResult>,
}

impl SolveStep {
    pub fn is_tool_call(&self) -> bool {
        matches!(self.proposal, Proposal::ToolCall { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveTerminal {
    Answered,
    StepBudgetExhausted,
    ToolFailureAbort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub answer: String,
    pub steps: Vec<SolveStep>,
    pub terminal: SolveTerminal,
    pub artifacts: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl SolveResult {
    pub fn tool_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.is_tool_call()).count()
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("step budget must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

pub struct SolveContext<'a> {
    pub provider: &'a mut dyn ChatProvider,
    pub sandbox: &'a mut Sandbox,
    pub vault: &'a SecretVault,
    pub trace: &'a TraceLog,
    pub prompts: &'a PromptSet,
    pub config: SolverConfig,
}

fn type_matches(value: &Value, ty: &str) -> bool {
    match ty {
        "string" => value.is_string(),
        "number" => value.is_number(),
        "integer" => value.is_i64() || value.is_u64() || value.as_f64().is_some_and(|f| f.fract() == 0.0),
        "boolean" => value.is_boolean(),
        "array" => value.is_array(),
        "object" => value.is_object(),
        "null" => value.is_null(),
        _ => true,
    }
}

fn describe(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Checks `value` against a JSON-schema fragment, appending problems.
fn check_value(path: &str, value: &Value, schema: &Value, problems: &mut Vec<String>) {
    if let Some(options) = schema.get("anyOf").and_then(Value::as_array) {
        let fits = options.iter().any(|opt| {
            let mut p = Vec::new();
            check_value(path, value, opt, &mut p);
            p.is_empty()
        });
        if !fits {
            problems.push(format!("{path}: {} does not match any allowed type", describe(value)));
        }
        return;
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            problems.push(format!("{path}: value must be one of {}", Value::Array(allowed.clone())));
        }
        return;
    }
    let types: Vec<&str> = match schema.get("type") {
        Some(Value::String(t)) => vec![t.as_str()],
        Some(Value::Array(ts)) => ts.iter().filter_map(Value::as_str).collect(),
        _ => return,
    };
    if !types.iter().any(|t| type_matches(value, t)) {
        problems.push(format!("{path}: expected {}, got {}", types.join(" or "), describe(value)));
        return;
    }
    if let (Value::Array(items), Some(item_schema)) = (value, schema.get("items")) {
        for (i, item) in items.iter().enumerate() {
            check_value(&format!("{path}[{i}]"), item, item_schema, problems);
        }
    }
    if let (Value::Array(items), Some(n)) = (value, schema.get("minItems").and_then(Value::as_u64)) {
        if (items.len() as u64) < n {
            problems.push(format!("{path}: needs at least {n} items"));
        }
    }
    if let (Value::Array(items), Some(n)) = (value, schema.get("maxItems").and_then(Value::as_u64)) {
        if (items.len() as u64) > n {
            problems.push(format!("{path}: allows at most {n} items"));
        }
    }
}

/// Validates a proposed argument map against a tool's schema.
pub fn validate_call(args: &Map<String, Value>, schema: &CallSchema) -> Result<(), String> {
    let mut problems = Vec::new();
    let missing: Vec<&str> = schema
        .parameters
        .required
        .iter()
        .filter(|r| !args.contains_key(r.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        problems.push(format!("missing required parameter(s): {}", missing.join(", ")));
    }
    let extra: Vec<&str> = args
        .keys()
        .filter(|k| !schema.parameters.properties.contains_key(k.as_str()))
        .map(String::as_str)
        .collect();
    if !extra.is_empty() {
        problems.push(format!("unexpected parameter(s): {}", extra.join(", ")));
    }
    for (name, value) in args {
        if let Some(prop) = schema.parameters.properties.get(name) {
            if prop.get("type").and_then(Value::as_str) == Some("array") && prop.get("items").is_none() {
                problems.push(format!("{name}: schema declares an array without item type"));
            }
            check_value(name, value, prop, &mut problems);
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(format!("invalid call to {}: {}", schema.name, problems.join("; ")))
    }
}

fn call_from_value(v: &Value) -> Option<ToolCall> {
    let name = v.get("name")?.as_str()?.to_string();
    let arguments = match v.get("arguments") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(Value::String(s)) => serde_json::from_str::<Map<String, Value>>(s).ok()?,
        _ => return None,
    };
    Some(ToolCall {
        id: None,
        name,
        arguments,
    })
}

/// A tool call from the structured field, else from a fenced `tool_call` or
/// `json` block in the text.
pub fn parse_proposal(reply: &ChatMessage) -> Option<ToolCall> {
    if let Some(call) = &reply.tool_call {
        return Some(call.clone());
    }
    code_blocks(&reply.content)
        .into_iter()
        .filter(|b| matches!(b.lang.as_str(), "tool_call" | "json"))
        .find_map(|b| first_json_records(&b.body).as_ref().and_then(call_from_value))
}

pub fn args_digest(args: &Map<String, Value>) -> String {
    let canonical = serde_json::to_string(args).expect("json map serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
}

fn tool_listing(tools: &[ToolRecord]) -> String {
    let mut out = String::from("\n\nTools available to you:\n");
    for t in tools {
        let params = serde_json::to_string_pretty(&t.schema.parameters).expect("schema serializes");
        out.push_str(&format!(
            "\nName: {}\nFunction: {}\nDescription: {}\nPurpose: {}\nParameters:\n{params}\nCode:\n```python\n{}```\n",
            t.name,
            t.function_name,
            t.description,
            t.schema.description,
            if t.source.ends_with('\n') { t.source.clone() } else { format!("{}\n", t.source) }
        ));
    }
    out
}

fn result_text(value: &Value, artifacts: &[PathBuf], workspace: &std::path::Path, cap: usize) -> String {
    let mut text = match value {
        Value::String(s) => s.clone(),
        v => serde_json::to_string(v).expect("json serializes"),
    };
    if !artifacts.is_empty() {
        let files: Vec<String> = artifacts
            .iter()
            .map(|a| a.strip_prefix(workspace).unwrap_or(a).display().to_string())
            .collect();
        text.push_str(&format!("\nFiles created: {}", files.join(", ")));
    }
    if text.len() > cap {
        let mut t = truncate_bytes(&text, cap.saturating_sub(32)).to_string();
        t.push_str("\n[result truncated]");
        return t;
    }
    text
}

/// Runs the solving loop over `tools` (possibly none).
pub fn solve(task: &str, tools: &[ToolRecord], ctx: &mut SolveContext<'_>) -> Result<SolveResult, SolveError> {
    if ctx.config.max_steps == 0 {
        return Err(SolveError::ZeroBudget);
    }
    let mut system = ctx.prompts.task_solver.clone();
    if !tools.is_empty() {
        system.push_str(&tool_listing(tools));
    }
    let schemas: Vec<CallSchema> = tools.iter().map(|t| t.schema.clone()).collect();
    let schemas = (!schemas.is_empty()).then_some(schemas.as_slice());
    let mut messages = vec![ChatMessage::system(system), ChatMessage::user(task)];
    let mut steps: Vec<SolveStep> = Vec::new();
    let mut artifacts: Vec<PathBuf> = Vec::new();
    let mut last_invalid: Option<String> = None;
    let mut last_text = String::new();

    for index in 1..=ctx.config.max_steps {
        let reply = ctx.provider.complete(Stage::TaskSolver, &messages, schemas)?.reply;
        let call = if ends_with_terminate(&reply.content) && reply.tool_call.is_none() {
            None
        } else {
            parse_proposal(&reply)
        };
        let Some(call) = call else {
            let text = reply.content.clone();
            messages.push(reply);
            if ends_with_terminate(&text) {
                let answer = strip_terminate(&text);
                ctx.trace.record(EventKind::SolveStep {
                    index,
                    tool: None,
                    args_digest: None,
                    outcome_status: "answered".into(),
                });
                steps.push(SolveStep {
                    index,
                    proposal: Proposal::FinalText { text: answer.clone() },
                    result: None,
                });
                return Ok(SolveResult {
                    answer,
                    steps,
                    terminal: SolveTerminal::Answered,
                    artifacts,
                    diagnostic: None,
                });
            }
            last_text = strip_terminate(&text);
            ctx.trace.record(EventKind::SolveStep {
                index,
                tool: None,
                args_digest: None,
                outcome_status: "no_action".into(),
            });
            steps.push(SolveStep {
                index,
                proposal: Proposal::FinalText { text: last_text.clone() },
                result: Some(StepResult::NoAction),
            });
            messages.push(ChatMessage::user(
                "Continue. Call one tool using a tool_call block, or give the final answer ending with TERMINATE.",
            ));
            continue;
        };

        let digest = args_digest(&call.arguments);
        let tool = tools
            .iter()
            .find(|t| t.function_name == call.name)
            .or_else(|| tools.iter().find(|t| t.name == call.name));
        let validation = match tool {
            None => Err(format!(
                "unknown tool {:?}; available functions: {}",
                call.name,
                tools.iter().map(|t| t.function_name.as_str()).collect::<Vec<_>>().join(", ")
            )),
            Some(t) => validate_call(&call.arguments, &t.schema),
        };
        let (result, feedback) = match (tool, validation) {
            (_, Err(message)) => {
                let repeated = last_invalid.as_deref() == Some(call.name.as_str());
                last_invalid = Some(call.name.clone());
                let fb = format!("Error: {message}");
                if repeated {
                    (StepResult::Failed { message }, fb)
                } else {
                    (StepResult::InvalidCall { message }, fb)
                }
            }
            (Some(t), Ok(())) => {
                last_invalid = None;
                let module = ApprovedSource::new(t.source.clone());
                match harness::invoke(ctx.sandbox, &module, ctx.vault, &t.function_name, &call.arguments) {
                    Ok(inv) => {
                        let fb = result_text(&inv.value, &inv.artifacts, ctx.sandbox.workspace(), ctx.config.result_cap);
                        artifacts.extend(inv.artifacts.iter().cloned());
                        (
                            StepResult::Ok {
                                value: inv.value,
                                artifacts: inv.artifacts,
                            },
                            fb,
                        )
                    }
                    Err(e @ HarnessError::Rejected { .. }) => {
                        let fb = truncate_bytes(&format!("Error: {}", e.feedback()), ctx.config.result_cap).to_string();
                        let HarnessError::Rejected { code, message, .. } = e else { unreachable!() };
                        (StepResult::ToolError { code, message }, fb)
                    }
                    Err(HarnessError::Sandbox(e)) => return Err(e.into()),
                    Err(e) => {
                        let message = e.to_string();
                        ctx.trace.record(EventKind::SolveStep {
                            index,
                            tool: Some(call.name.clone()),
                            args_digest: Some(digest),
                            outcome_status: "crash".into(),
                        });
                        steps.push(SolveStep {
                            index,
                            proposal: Proposal::ToolCall {
                                name: call.name.clone(),
                                arguments: call.arguments.clone(),
                            },
                            result: Some(StepResult::Crash { message: message.clone() }),
                        });
                        return Ok(SolveResult {
                            answer: String::new(),
                            steps,
                            terminal: SolveTerminal::ToolFailureAbort,
                            artifacts,
                            diagnostic: Some(message),
                        });
                    }
                }
            }
            (None, Ok(())) => unreachable!("unknown tools never validate"),
        };
        ctx.trace.record(EventKind::SolveStep {
            index,
            tool: Some(call.name.clone()),
            args_digest: Some(digest),
            outcome_status: result.status().into(),
        });
        let call_id = call.id.clone();
        let tool_name = call.name.clone();
        steps.push(SolveStep {
            index,
            proposal: Proposal::ToolCall {
                name: call.name.clone(),
                arguments: call.arguments.clone(),
            },
            result: Some(result),
        });
        messages.push(if reply.tool_call.is_some() {
            reply
        } else {
            ChatMessage::assistant(reply.content)
        });
        messages.push(ChatMessage::tool_result(tool_name, call_id, feedback));
    }

    artifacts.sort();
    artifacts.dedup();
    Ok(SolveResult {
        answer: last_text,
        steps,
        terminal: SolveTerminal::StepBudgetExhausted,
        artifacts,
        diagnostic: Some(format!("no final answer within {} steps", ctx.config.max_steps)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ParameterSchema;
    use serde_json::json;

    fn word_freq_schema() -> CallSchema {
        CallSchema {
            name: "word_frequency".into(),
            description: "Top words".into(),
            parameters: ParameterSchema {
                kind: "object".into(),
                properties: json!({
                    "sentence": {"type": "string", "description": "text"},
                    "n": {"type": "integer", "description": "how many", "default": 10},
                    "weights": {"type": "array", "items": {"type": "number"}, "description": "w"}
                })
                .as_object()
                .unwrap()
                .clone(),
                required: vec!["sentence".into()],
            },
        }
    }

    fn args(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn validate_call_examples() {
        let s = word_freq_schema();
        assert!(validate_call(&args(json!({"sentence": "a b a", "n": 10})), &s).is_ok());
        let err = validate_call(&args(json!({"n": 10})), &s).unwrap_err();
        assert!(err.contains("missing required parameter(s): sentence"));
        let err = validate_call(&args(json!({"sentence": "x", "n": "ten"})), &s).unwrap_err();
        assert!(err.contains("n: expected integer, got string"));
        let err = validate_call(&args(json!({"sentence": "x", "extra": 1})), &s).unwrap_err();
        assert!(err.contains("unexpected parameter(s): extra"));
        let err = validate_call(&args(json!({"sentence": "x", "weights": [1, "a"]})), &s).unwrap_err();
        assert!(err.contains("weights[1]: expected number, got string"));
    }

    #[test]
    fn proposals_from_field_or_fence() {
        let fenced = ChatMessage::assistant("Step 1:\n```tool_call\n{\"name\": \"f\", \"arguments\": {\"x\": 1}}\n```");
        let call = parse_proposal(&fenced).unwrap();
        assert_eq!(call.name, "f");
        assert_eq!(call.arguments["x"], 1);
        let stringly = ChatMessage::assistant("```json\n{\"name\": \"f\", \"arguments\": \"{\\\"x\\\": 2}\"}\n```");
        assert_eq!(parse_proposal(&stringly).unwrap().arguments["x"], 2);
        assert!(parse_proposal(&ChatMessage::assistant("The answer is 4. TERMINATE")).is_none());
        let structured = ChatMessage::assistant_call("", ToolCall::new("g", Map::new()));
        assert_eq!(parse_proposal(&structured).unwrap().name, "g");
    }

    #[test]
    fn digest_is_order_independent() {
        let a = args(json!({"a": 1, "b": 2}));
        let b = args(json!({"b": 2, "a": 1}));
        assert_eq!(args_digest(&a), args_digest(&b));
        assert_eq!(args_digest(&a).len(), 16);
    }

    #[test]
    fn result_text_caps_and_lists_files() {
        let ws = std::path::Path::new("/w");
        let t = result_text(&json!("ok"), &[PathBuf::from("/w/chart.png")], ws, 1000);
        assert_eq!(t, "ok\nFiles created: chart.png");
        let long = result_text(&json!("x".repeat(5000)), &[], ws, 1000);
        assert!(long.len() <= 1000);
        assert!(long.ends_with("[result truncated]"));
    }
}
