//! Pulling structured content out of free-form model replies.

use serde_json::Value;

pub const TERMINATE: &str = "TERMINATE";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    pub lang: String,
    pub body: String,
}

/// Fenced code blocks in order of appearance. An unterminated final fence
/// runs to the end of the text.
pub fn code_blocks(text: &str) -> Vec<CodeBlock> {
    let mut blocks = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("```") {
            match current.take() {
                Some((lang, lines)) => blocks.push(CodeBlock {
                    lang,
                    body: join_lines(&lines),
                }),
                None => current = Some((rest.trim().to_ascii_lowercase(), Vec::new())),
            }
        } else if let Some((_, lines)) = current.as_mut() {
            lines.push(line);
        }
    }
    if let Some((lang, lines)) = current {
        blocks.push(CodeBlock {
            lang,
            body: join_lines(&lines),
        });
    }
    blocks
}

fn join_lines(lines: &[&str]) -> String {
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

/// Removes fence marker lines, keeping their contents.
pub fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The first balanced JSON array or object in `text` that parses.
pub fn first_json_value(text: &str) -> Option<Value> {
    first_json_matching(text, |_| true)
}

/// The first JSON object, or array of objects, in `text`. Bracketed prose
/// such as `[1]` is skipped.
pub fn first_json_records(text: &str) -> Option<Value> {
    first_json_matching(text, |v| match v {
        Value::Object(_) => true,
        Value::Array(items) => items.iter().all(Value::is_object),
        _ => false,
    })
}

fn first_json_matching(text: &str, accept: impl Fn(&Value) -> bool) -> Option<Value> {
    let text = strip_fences(text);
    let bytes = text.as_bytes();
    for (start, &b) in bytes.iter().enumerate() {
        if b != b'[' && b != b'{' {
            continue;
        }
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(v) = serde_json::from_str::<Value>(&text[start..=end]) {
                if accept(&v) {
                    return Some(v);
                }
            }
        }
    }
    None
}

/// Index of the bracket closing the one at `start`, honoring JSON strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'[' | b'{' => depth += 1,
            b']' | b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Whether the reply's last non-whitespace token is the terminal token.
pub fn ends_with_terminate(text: &str) -> bool {
    let t = text.trim_end().trim_end_matches(['.', '!', '*', '`', '\'', '"']);
    t.ends_with(TERMINATE)
}

/// Removes every standalone occurrence of the terminal token.
pub fn strip_terminate(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(TERMINATE) {
        let before = &rest[..pos];
        let after = &rest[pos + TERMINATE.len()..];
        let bounded_left = before.chars().last().is_none_or(|c| !c.is_alphanumeric());
        let bounded_right = after.chars().next().is_none_or(|c| !c.is_alphanumeric());
        out.push_str(before);
        if !(bounded_left && bounded_right) {
            out.push_str(TERMINATE);
        }
        rest = after;
    }
    out.push_str(rest);
    out.trim().trim_end_matches(['\'', '"', '`']).trim_end().to_string()
}
