//! System prompt templates.
//!
//! The v1 set is compiled in; a directory with the same file names can
//! replace it at runtime.

use std::fs;
use std::path::Path;

pub const SELECTOR_PLACEHOLDER: &str = "{available_tools}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub version: String,
    pub task_analyzer: String,
    pub tool_master: String,
    pub tool_selector: String,
    pub code_writer: String,
    pub task_solver: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            version: "v1".into(),
            task_analyzer: include_str!("../prompts/v1/task_analyzer.txt").into(),
            tool_master: include_str!("../prompts/v1/tool_master.txt").into(),
            tool_selector: include_str!("../prompts/v1/tool_selector.txt").into(),
            code_writer: include_str!("../prompts/v1/code_writer.txt").into(),
            task_solver: include_str!("../prompts/v1/task_solver.txt").into(),
        }
    }
}

impl PromptSet {
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let read = |name: &str| fs::read_to_string(dir.join(format!("{name}.txt")));
        let set = Self {
            version: dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("custom")
                .to_string(),
            task_analyzer: read("task_analyzer")?,
            tool_master: read("tool_master")?,
            tool_selector: read("tool_selector")?,
            code_writer: read("code_writer")?,
            task_solver: read("task_solver")?,
        };
        if !set.tool_selector.contains(SELECTOR_PLACEHOLDER) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("tool_selector.txt lacks the {SELECTOR_PLACEHOLDER} placeholder"),
            ));
        }
        Ok(set)
    }

    pub fn selector_prompt(&self, manifest_text: &str) -> String {
        self.tool_selector.replace(SELECTOR_PLACEHOLDER, manifest_text)
    }
}
