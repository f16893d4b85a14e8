//! Task Analyzer, Tool Master and Tool Selector: prompt assembly and reply
//! parsing for the three analysis agents.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::extract::{first_json_records, strip_fences};
use crate::gateway::{ChatMessage, ChatProvider, Exchange, GatewayError, Stage};
use crate::prompts::PromptSet;
use crate::registry::{ManifestEntry, RegistrySnapshot};

pub const NO_TOOL_SENTINEL: &str = "no tool required";

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{stage}: could not parse reply: {message}")]
    Parse {
        stage: Stage,
        message: String,
        raw: String,
    },
    #[error("{stage}: invalid input: {message}")]
    InvalidInput { stage: Stage, message: String },
    #[error(transparent)]
    Provider(#[from] GatewayError),
}

impl StageError {
    fn parse(stage: Stage, message: impl Into<String>, raw: &str) -> Self {
        StageError::Parse {
            stage,
            message: message.into(),
            raw: raw.to_string(),
        }
    }
}

/// A parsed stage result together with the exchange that produced it.
#[derive(Debug, Clone)]
pub struct StageCall<T> {
    pub value: T,
    pub exchange: Exchange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskPlan {
    subtasks: Vec<String>,
}

impl SubtaskPlan {
    pub fn new(subtasks: Vec<String>) -> Option<Self> {
        if subtasks.is_empty() || subtasks.iter().any(|s| s.trim().is_empty()) {
            return None;
        }
        Some(Self { subtasks })
    }

    pub fn subtasks(&self) -> &[String] {
        &self.subtasks
    }

    pub fn numbered(&self) -> String {
        self.subtasks
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {s}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRequirement {
    pub tools: Vec<ToolSpec>,
}

impl ToolRequirement {
    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub name: String,
    pub description: String,
    pub is_available: bool,
    /// Registry key of the matched tool when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_name: Option<String>,
    /// The requirement this verdict answers.
    pub requested: ToolSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub entries: Vec<SelectionEntry>,
    /// Consistency problems that were downgraded to "unavailable".
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn list_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+\s*[.):]|[-*\u{2022}])\s+(.+?)\s*$").unwrap())
}

/// Ordered subtasks from a numbered or bulleted list.
pub fn parse_subtasks(raw: &str) -> Result<SubtaskPlan, StageError> {
    let stage = Stage::TaskAnalyzer;
    let body = strip_fences(raw);
    let items: Vec<String> = body
        .lines()
        .filter_map(|l| list_line_re().captures(l).map(|c| c[1].trim().to_string()))
        .filter(|s| !s.is_empty())
        .collect();
    if !items.is_empty() {
        return SubtaskPlan::new(items)
            .ok_or_else(|| StageError::parse(stage, "empty subtask", raw));
    }
    let lines: Vec<&str> = body.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    match lines.as_slice() {
        [single] => Ok(SubtaskPlan::new(vec![single.to_string()]).expect("non-blank line")),
        [] => Err(StageError::parse(stage, "empty reply", raw)),
        _ => Err(StageError::parse(stage, "no list items found", raw)),
    }
}

fn is_sentinel(name: &str) -> bool {
    let normalized: String = name
        .trim()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    normalized == NO_TOOL_SENTINEL
}

/// Tool specs from the Tool Master's JSON reply; the sentinel yields none.
pub fn parse_tool_requirement(raw: &str) -> Result<ToolRequirement, StageError> {
    let stage = Stage::ToolMaster;
    let value = first_json_records(raw).ok_or_else(|| StageError::parse(stage, "no JSON value", raw))?;
    let items = match value {
        Value::Array(items) => items,
        obj @ Value::Object(_) => vec![obj],
        _ => unreachable!("first_json_records only yields arrays and objects"),
    };
    let mut saw_sentinel = false;
    let mut tools = Vec::new();
    for item in items {
        let name = item
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| StageError::parse(stage, "tool entry without a string name", raw))?;
        if is_sentinel(name) {
            saw_sentinel = true;
            continue;
        }
        if name.trim().is_empty() {
            return Err(StageError::parse(stage, "tool entry with empty name", raw));
        }
        let description = item.get("description").and_then(Value::as_str).unwrap_or_default();
        tools.push(ToolSpec::new(name.trim(), description.trim()));
    }
    if tools.is_empty() && !saw_sentinel {
        return Err(StageError::parse(stage, "empty tool list without the no-tool sentinel", raw));
    }
    Ok(ToolRequirement { tools })
}

fn loose(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Finds the registry entry a verdict refers to.
fn resolve<'a>(entries: &'a [ManifestEntry], name: &str, description: &str) -> Option<&'a ManifestEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .or_else(|| entries.iter().find(|e| e.function_name == name))
        .or_else(|| entries.iter().find(|e| !name.is_empty() && loose(&e.name) == loose(name)))
        .or_else(|| {
            let d = collapse_ws(description);
            entries
                .iter()
                .find(|e| !d.is_empty() && collapse_ws(&e.description) == d)
        })
}

/// Verdicts from the Tool Selector, one per requirement, in order.
///
/// Available verdicts are rebound to the matched registry entry's exact name
/// and description. A verdict claiming availability for something not in
/// `snapshot` is downgraded to unavailable and reported in `warnings`.
pub fn parse_selection(
    raw: &str,
    required: &ToolRequirement,
    snapshot: &RegistrySnapshot,
) -> Result<SelectionResult, StageError> {
    let stage = Stage::ToolSelector;
    let value = first_json_records(raw).ok_or_else(|| StageError::parse(stage, "no JSON value", raw))?;
    let items = match value {
        Value::Array(items) => items,
        obj @ Value::Object(_) => vec![obj],
        _ => unreachable!(),
    };
    if items.len() != required.tools.len() {
        return Err(StageError::parse(
            stage,
            format!("{} verdicts for {} required tools", items.len(), required.tools.len()),
            raw,
        ));
    }
    let mut result = SelectionResult::default();
    for (item, requested) in items.iter().zip(&required.tools) {
        let name = item.get("name").and_then(Value::as_str).unwrap_or_default();
        let description = item.get("description").and_then(Value::as_str).unwrap_or_default();
        let claimed = match item.get("is_available") {
            Some(Value::Bool(b)) => *b,
            Some(Value::String(s)) => s.eq_ignore_ascii_case("true"),
            _ => return Err(StageError::parse(stage, "verdict without boolean is_available", raw)),
        };
        let unavailable = SelectionEntry {
            name: requested.name.clone(),
            description: requested.description.clone(),
            is_available: false,
            function_name: None,
            requested: requested.clone(),
        };
        if !claimed {
            result.entries.push(unavailable);
            continue;
        }
        match resolve(&snapshot.entries, name, description) {
            Some(hit) => result.entries.push(SelectionEntry {
                name: hit.name.clone(),
                description: hit.description.clone(),
                is_available: true,
                function_name: Some(hit.function_name.clone()),
                requested: requested.clone(),
            }),
            None => {
                result.warnings.push(format!(
                    "selector marked {name:?} available for {:?} but no registry entry matches",
                    requested.name
                ));
                result.entries.push(unavailable);
            }
        }
    }
    Ok(result)
}

fn call<P: ChatProvider + ?Sized>(
    provider: &mut P,
    stage: Stage,
    system: &str,
    user: String,
) -> Result<Exchange, StageError> {
    let messages = [ChatMessage::system(system), ChatMessage::user(user)];
    Ok(provider.complete(stage, &messages, None)?)
}

pub fn analyze_task<P: ChatProvider + ?Sized>(
    user_task: &str,
    provider: &mut P,
    prompts: &PromptSet,
) -> Result<StageCall<SubtaskPlan>, StageError> {
    if user_task.trim().is_empty() {
        return Err(StageError::InvalidInput {
            stage: Stage::TaskAnalyzer,
            message: "task is blank".into(),
        });
    }
    let exchange = call(provider, Stage::TaskAnalyzer, &prompts.task_analyzer, user_task.to_string())?;
    let value = parse_subtasks(&exchange.reply.content)?;
    Ok(StageCall { value, exchange })
}

pub fn decide_tools<P: ChatProvider + ?Sized>(
    plan: &SubtaskPlan,
    provider: &mut P,
    prompts: &PromptSet,
) -> Result<StageCall<ToolRequirement>, StageError> {
    let exchange = call(provider, Stage::ToolMaster, &prompts.tool_master, plan.numbered())?;
    let value = parse_tool_requirement(&exchange.reply.content)?;
    Ok(StageCall { value, exchange })
}

pub fn select_tools<P: ChatProvider + ?Sized>(
    required: &ToolRequirement,
    snapshot: &RegistrySnapshot,
    provider: &mut P,
    prompts: &PromptSet,
) -> Result<StageCall<SelectionResult>, StageError> {
    if required.is_empty() {
        return Err(StageError::InvalidInput {
            stage: Stage::ToolSelector,
            message: "no required tools".into(),
        });
    }
    let listing = serde_json::to_string_pretty(&required.tools).expect("specs serialize");
    let exchange = call(
        provider,
        Stage::ToolSelector,
        &prompts.selector_prompt(&snapshot.text()),
        format!("Required Tools:\n{listing}"),
    )?;
    let value = parse_selection(&exchange.reply.content, required, snapshot)?;
    Ok(StageCall { value, exchange })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot(entries: &[(&str, &str, &str)]) -> RegistrySnapshot {
        RegistrySnapshot {
            entries: entries
                .iter()
                .map(|(n, d, f)| ManifestEntry {
                    name: n.to_string(),
                    description: d.to_string(),
                    function_name: f.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn numbered_list() {
        let plan = parse_subtasks("1. X\n2. Y\n3. Z").unwrap();
        assert_eq!(plan.subtasks(), ["X", "Y", "Z"]);
    }

    #[test]
    fn bullets_with_prose() {
        let raw = "Here is the breakdown:\n- Parse the data.\n* Draw a bar chart.\n\u{2022} Draw a box plot.\nThat's all.";
        assert_eq!(
            parse_subtasks(raw).unwrap().subtasks(),
            ["Parse the data.", "Draw a bar chart.", "Draw a box plot."]
        );
    }

    #[test]
    fn single_line_is_whole_task() {
        let task = "Who is the current president of the United States of America?";
        assert_eq!(parse_subtasks(task).unwrap().subtasks(), [task]);
    }

    #[test]
    fn prose_without_list_fails() {
        let err = parse_subtasks("I think\nthis is hard").unwrap_err();
        match err {
            StageError::Parse { raw, .. } => assert!(raw.contains("this is hard")),
            other => panic!("{other:?}"),
        }
        assert!(parse_subtasks("   \n").is_err());
    }

    #[test]
    fn tool_master_shapes() {
        let web = parse_tool_requirement(
            r#"[{"name": "Web_Scraper","description": "A tool to extract specific information from web pages by crawling and parsing their content."}]"#,
        )
        .unwrap();
        assert_eq!(web.tools.len(), 1);
        assert_eq!(web.tools[0].name, "Web_Scraper");

        let none = parse_tool_requirement(r#"{"name": "No tool Required","description": ""}"#).unwrap();
        assert!(none.is_empty());
        let wrapped = parse_tool_requirement(r#"```json
[{"name": "NO TOOL REQUIRED", "description": ""}]
```"#)
        .unwrap();
        assert!(wrapped.is_empty());

        let sql = parse_tool_requirement(
            "Output: [{\"name\": \"SQL_Query_Executor\", \"description\": \"Executes SQL.\"},\n{\"name\": \"Chart_Creator_Tool\", \"description\": \"Charts.\"}]",
        )
        .unwrap();
        let names: Vec<&str> = sql.tools.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["SQL_Query_Executor", "Chart_Creator_Tool"]);
    }

    #[test]
    fn tool_master_errors() {
        assert!(parse_tool_requirement("I need a scraper").is_err());
        assert!(parse_tool_requirement("[]").is_err());
        assert!(parse_tool_requirement(r#"[{"description": "x"}]"#).is_err());
    }

    #[test]
    fn selector_rebinds_semantic_match() {
        let snap = snapshot(&[("Bar Chart Generator", "Draws bar charts from data.", "bar_chart_generator")]);
        let req = ToolRequirement {
            tools: vec![ToolSpec::new("Data Visualizer", "Visualizes data as charts.")],
        };
        let raw = r#"[{"name": "Bar Chart Generator", "description": "Draws bar charts from data.", "is_available": true}]"#;
        let sel = parse_selection(raw, &req, &snap).unwrap();
        let e = &sel.entries[0];
        assert!(e.is_available);
        assert_eq!(e.name, "Bar Chart Generator");
        assert_eq!(e.description, "Draws bar charts from data.");
        assert_eq!(e.function_name.as_deref(), Some("bar_chart_generator"));
        assert_eq!(e.requested.name, "Data Visualizer");
    }

    #[test]
    fn selector_loose_name_match_rebinds_exactly() {
        let snap = snapshot(&[("Word Frequency Counter", "Counts words.", "word_frequency_counter")]);
        let req = ToolRequirement {
            tools: vec![ToolSpec::new("Keyword_Ranker", "Ranks keywords.")],
        };
        let raw = r#"[{"name": "word_frequency_counter", "description": "different words", "is_available": true}]"#;
        let sel = parse_selection(raw, &req, &snap).unwrap();
        assert_eq!(sel.entries[0].name, "Word Frequency Counter");
        assert_eq!(sel.entries[0].description, "Counts words.");
    }

    #[test]
    fn selector_against_empty_registry() {
        let req = ToolRequirement {
            tools: vec![ToolSpec::new("Web_Scraper", "Scrapes.")],
        };
        let raw = r#"[{"name": "Web_Scraper", "description": "Scrapes.", "is_available": true}]"#;
        let sel = parse_selection(raw, &req, &snapshot(&[])).unwrap();
        assert!(!sel.entries[0].is_available);
        assert_eq!(sel.entries[0].name, "Web_Scraper");
        assert_eq!(sel.warnings.len(), 1);
    }

    #[test]
    fn selector_cardinality() {
        let req = ToolRequirement {
            tools: vec![ToolSpec::new("A", "a"), ToolSpec::new("B", "b")],
        };
        let raw = r#"[{"name": "A", "description": "a", "is_available": false}]"#;
        assert!(matches!(
            parse_selection(raw, &req, &snapshot(&[])),
            Err(StageError::Parse { stage: Stage::ToolSelector, .. })
        ));
    }
}
