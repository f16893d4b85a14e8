//! Persistent tool database.
//!
//! Layout under the registry directory:
//!
//! ```text
//! manifest.json        [{"name", "description", "function-name"}], sorted by function-name
//! meta.json            schema, created_at, api_requirements, disabled (keyed by function-name)
//! <function_name>.py   tool source, secrets only as placeholders
//! ```
//!
//! Every file is replaced through a temp-file-and-rename. The manifest is
//! written last, so a crash mid-registration leaves at worst an orphan script
//! or meta entry, never a manifest entry without its script.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::CallSchema;
use crate::vault::Secret;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub description: String,
    #[serde(rename = "function-name")]
    pub function_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetaEntry {
    schema: CallSchema,
    created_at: DateTime<Utc>,
    #[serde(default)]
    api_requirements: Vec<String>,
    #[serde(default)]
    disabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub name: String,
    pub description: String,
    pub function_name: String,
    pub source: String,
    pub schema: CallSchema,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub api_requirements: Vec<String>,
    #[serde(default)]
    pub disabled: bool,
}

impl ToolRecord {
    pub fn manifest_entry(&self) -> ManifestEntry {
        ManifestEntry {
            name: self.name.clone(),
            description: self.description.clone(),
            function_name: self.function_name.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid tool record: {0}")]
    Invalid(String),
    #[error("tool {0:?} is not registered")]
    NotFound(String),
    #[error("registry integrity: {0}")]
    Integrity(String),
    #[error("registry storage at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("registry file {path} is not valid JSON: {message}")]
    Corrupt { path: PathBuf, message: String },
}

/// Point-in-time copy of the enabled registry entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrySnapshot {
    pub entries: Vec<ManifestEntry>,
}

impl RegistrySnapshot {
    /// Canonical manifest text embedded in the selector prompt.
    pub fn text(&self) -> String {
        manifest_text(&self.entries)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn manifest_text(entries: &[ManifestEntry]) -> String {
    serde_json::to_string_pretty(entries).expect("manifest entries serialize")
}

fn function_name_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z][a-z0-9_]*$").unwrap())
}

fn top_level_def_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^(?:async\s+)?def\s+([A-Za-z_][A-Za-z0-9_]*)\s*\(").unwrap()
    })
}

/// Names of public (non-underscore) functions defined at module level.
pub fn public_functions(source: &str) -> Vec<String> {
    top_level_def_re()
        .captures_iter(source)
        .map(|c| c[1].to_string())
        .filter(|n| !n.starts_with('_'))
        .collect()
}

pub fn is_valid_function_name(name: &str) -> bool {
    function_name_re().is_match(name)
}

/// Renames calls and the definition of `from` to `to`.
fn rename_function(source: &str, from: &str, to: &str) -> String {
    let re = Regex::new(&format!(r"\b{}(\s*\()", regex::escape(from))).unwrap();
    re.replace_all(source, format!("{to}$1").as_str()).into_owned()
}

fn validate(record: &ToolRecord, secrets: &[Secret]) -> Result<(), RegistryError> {
    let invalid = |m: String| Err(RegistryError::Invalid(m));
    if record.name.trim().is_empty() {
        return invalid("name is empty".into());
    }
    if !is_valid_function_name(&record.function_name) {
        return invalid(format!(
            "function_name {:?} must match [a-z][a-z0-9_]*",
            record.function_name
        ));
    }
    let defs = public_functions(&record.source);
    if defs.len() != 1 || defs[0] != record.function_name {
        return invalid(format!(
            "source must define exactly one public function named {:?}, found {:?}",
            record.function_name, defs
        ));
    }
    if record.schema.name != record.function_name {
        return invalid(format!(
            "schema names {:?} but function_name is {:?}",
            record.schema.name, record.function_name
        ));
    }
    for s in secrets {
        let plain = s.expose();
        if !plain.is_empty()
            && [&record.source, &record.name, &record.description]
                .iter()
                .any(|t| t.contains(plain))
        {
            return invalid(format!("record contains plaintext of secret {:?}", s.name()));
        }
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Inner {
    manifest: BTreeMap<String, ManifestEntry>,
    meta: BTreeMap<String, MetaEntry>,
}

/// Tool database rooted at a directory. Mutations are serialized.
#[derive(Debug)]
pub struct Registry {
    root: PathBuf,
    inner: Mutex<Inner>,
}

impl Registry {
    /// Opens (creating if needed) the registry at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| RegistryError::Io {
            path: root.clone(),
            source,
        })?;
        let manifest: Vec<ManifestEntry> = read_json_or_default(&root.join(MANIFEST_FILE))?;
        let meta: BTreeMap<String, MetaEntry> = read_json_or_default(&root.join(META_FILE))?;
        let manifest = manifest
            .into_iter()
            .map(|e| (e.function_name.clone(), e))
            .collect();
        Ok(Self {
            root,
            inner: Mutex::new(Inner { manifest, meta }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn script_path(&self, function_name: &str) -> PathBuf {
        self.root.join(format!("{function_name}.py"))
    }

    pub fn len(&self) -> usize {
        self.lock().manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, function_name: &str) -> bool {
        self.lock().manifest.contains_key(function_name)
    }

    /// Enabled entries, sorted by function-name.
    pub fn snapshot(&self) -> RegistrySnapshot {
        let inner = self.lock();
        let entries = inner
            .manifest
            .values()
            .filter(|e| !inner.meta.get(&e.function_name).is_some_and(|m| m.disabled))
            .cloned()
            .collect();
        RegistrySnapshot { entries }
    }

    /// Canonical manifest text of enabled tools; `"[]"` when empty.
    pub fn snapshot_text(&self) -> String {
        self.snapshot().text()
    }

    pub fn fetch(&self, function_name: &str) -> Result<ToolRecord, RegistryError> {
        let inner = self.lock();
        self.fetch_locked(&inner, function_name)
    }

    fn fetch_locked(&self, inner: &Inner, function_name: &str) -> Result<ToolRecord, RegistryError> {
        let entry = inner
            .manifest
            .get(function_name)
            .ok_or_else(|| RegistryError::NotFound(function_name.to_string()))?;
        let meta = inner.meta.get(function_name).ok_or_else(|| {
            RegistryError::Integrity(format!("{META_FILE} has no entry for {function_name:?}"))
        })?;
        let path = self.script_path(function_name);
        let source = fs::read_to_string(&path).map_err(|e| {
            RegistryError::Integrity(format!(
                "script file {} for {function_name:?} is unreadable: {e}",
                path.display()
            ))
        })?;
        Ok(ToolRecord {
            name: entry.name.clone(),
            description: entry.description.clone(),
            function_name: function_name.to_string(),
            source,
            schema: meta.schema.clone(),
            created_at: meta.created_at,
            api_requirements: meta.api_requirements.clone(),
            disabled: meta.disabled,
        })
    }

    /// Stores `record`, returning what was stored.
    ///
    /// Re-registering identical source is a no-op. A different tool that wants
    /// a taken function name is stored under `<name>_2`, `<name>_3`, ...
    /// with its definition and call sites renamed to match. Disabled entries
    /// do not hold their name and are overwritten.
    pub fn register(&self, record: ToolRecord, secrets: &[Secret]) -> Result<ToolRecord, RegistryError> {
        validate(&record, secrets)?;
        let mut inner = self.lock();
        let base = record.function_name.clone();
        let mut suffix = 1u32;
        loop {
            let candidate = if suffix == 1 {
                base.clone()
            } else {
                format!("{base}_{suffix}")
            };
            let source = if suffix == 1 {
                record.source.clone()
            } else {
                rename_function(&record.source, &base, &candidate)
            };
            let disabled = inner.meta.get(&candidate).is_some_and(|m| m.disabled);
            if inner.manifest.contains_key(&candidate) && !disabled {
                match fs::read_to_string(self.script_path(&candidate)) {
                    Ok(existing) if existing == source => {
                        return self.fetch_locked(&inner, &candidate);
                    }
                    _ => {
                        suffix += 1;
                        continue;
                    }
                }
            }
            let mut stored = record;
            stored.function_name = candidate.clone();
            stored.schema.name = candidate.clone();
            stored.source = source;
            self.persist(&mut inner, &stored)?;
            tracing::info!(function_name = %candidate, "registered tool");
            return Ok(stored);
        }
    }

    fn persist(&self, inner: &mut Inner, record: &ToolRecord) -> Result<(), RegistryError> {
        let fname = record.function_name.clone();
        atomic_write(&self.script_path(&fname), record.source.as_bytes())?;

        let mut meta = inner.meta.clone();
        meta.insert(
            fname.clone(),
            MetaEntry {
                schema: record.schema.clone(),
                created_at: record.created_at,
                api_requirements: record.api_requirements.clone(),
                disabled: record.disabled,
            },
        );
        let meta_text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        atomic_write(&self.root.join(META_FILE), meta_text.as_bytes())?;

        let mut manifest = inner.manifest.clone();
        manifest.insert(fname, record.manifest_entry());
        let entries: Vec<ManifestEntry> = manifest.values().cloned().collect();
        atomic_write(
            &self.root.join(MANIFEST_FILE),
            format!("{}\n", manifest_text(&entries)).as_bytes(),
        )?;

        inner.meta = meta;
        inner.manifest = manifest;
        Ok(())
    }

    /// Masks or unmasks a tool from snapshots without deleting it.
    pub fn set_disabled(&self, function_name: &str, disabled: bool) -> Result<(), RegistryError> {
        let mut inner = self.lock();
        let mut meta = inner.meta.clone();
        let entry = meta
            .get_mut(function_name)
            .ok_or_else(|| RegistryError::NotFound(function_name.to_string()))?;
        entry.disabled = disabled;
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        atomic_write(&self.root.join(META_FILE), text.as_bytes())?;
        inner.meta = meta;
        Ok(())
    }

    /// Script files with no manifest entry. They are never loaded.
    pub fn orphans(&self) -> Result<Vec<PathBuf>, RegistryError> {
        let inner = self.lock();
        let read = fs::read_dir(&self.root).map_err(|source| RegistryError::Io {
            path: self.root.clone(),
            source,
        })?;
        let mut out = Vec::new();
        for entry in read.flatten() {
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "py") {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                if !inner.manifest.contains_key(stem) {
                    out.push(path);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Manifest entries whose script or metadata is missing.
    pub fn integrity_problems(&self) -> Vec<String> {
        let inner = self.lock();
        let mut problems = Vec::new();
        for fname in inner.manifest.keys() {
            if !self.script_path(fname).is_file() {
                problems.push(format!("{fname}: missing script {}", self.script_path(fname).display()));
            }
            if !inner.meta.contains_key(fname) {
                problems.push(format!("{fname}: missing {META_FILE} entry"));
            }
        }
        problems
    }
}

fn read_json_or_default<T: serde::de::DeserializeOwned + Default>(path: &Path) -> Result<T, RegistryError> {
    match fs::read_to_string(path) {
        Ok(text) if text.trim().is_empty() => Ok(T::default()),
        Ok(text) => serde_json::from_str(&text).map_err(|e| RegistryError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(T::default()),
        Err(source) => Err(RegistryError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), RegistryError> {
    let io_err = |source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ParameterSchema;

    fn record(name: &str, fname: &str, body: &str) -> ToolRecord {
        ToolRecord {
            name: name.into(),
            description: format!("{name} tool"),
            function_name: fname.into(),
            source: format!(
                "from typing import Annotated\n\ndef {fname}(x: Annotated[str, \"input\"]) -> str:\n    \"\"\"Doc.\"\"\"\n    {body}\n\nprint({fname}(\"a\"))\n"
            ),
            schema: CallSchema {
                name: fname.into(),
                description: "Doc.".into(),
                parameters: ParameterSchema {
                    kind: "object".into(),
                    properties: serde_json::from_str(r#"{"x": {"type": "string", "description": "input"}}"#).unwrap(),
                    required: vec!["x".into()],
                },
            },
            created_at: "2024-05-01T12:00:00Z".parse().unwrap(),
            api_requirements: vec![],
            disabled: false,
        }
    }

    #[test]
    fn empty_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        assert_eq!(reg.snapshot_text(), "[]");
    }

    #[test]
    fn snapshot_has_exactly_three_keys() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        reg.register(record("Word Frequency Counter", "word_frequency_counter", "return x"), &[])
            .unwrap();
        let v: serde_json::Value = serde_json::from_str(&reg.snapshot_text()).unwrap();
        let obj = v[0].as_object().unwrap();
        let mut keys: Vec<&String> = obj.keys().collect();
        keys.sort();
        assert_eq!(keys, ["description", "function-name", "name"]);
        assert_eq!(obj["name"], "Word Frequency Counter");
        assert!(dir.path().join("word_frequency_counter.py").is_file());
    }

    #[test]
    fn idempotent_and_collision_suffix() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let a = record("Sorter", "sorter", "return ''.join(sorted(x))");
        reg.register(a.clone(), &[]).unwrap();
        reg.register(a.clone(), &[]).unwrap();
        assert_eq!(reg.len(), 1);

        let b = record("Other Sorter", "sorter", "return x[::-1]");
        let stored = reg.register(b.clone(), &[]).unwrap();
        assert_eq!(stored.function_name, "sorter_2");
        assert_eq!(stored.schema.name, "sorter_2");
        assert_eq!(public_functions(&stored.source), vec!["sorter_2".to_string()]);
        assert!(stored.source.contains("print(sorter_2(\"a\"))"));
        // The renamed copy is itself idempotent.
        assert_eq!(reg.register(b, &[]).unwrap().function_name, "sorter_2");
        assert_eq!(reg.len(), 2);
    }

    #[test]
    fn rejects_invariant_violations() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let mut bad = record("X", "Bad-Name", "return x");
        bad.schema.name = bad.function_name.clone();
        assert!(matches!(reg.register(bad, &[]), Err(RegistryError::Invalid(m)) if m.contains("function_name")));

        let mut two = record("X", "f", "return x");
        two.source.push_str("\ndef g():\n    pass\n");
        assert!(matches!(reg.register(two, &[]), Err(RegistryError::Invalid(m)) if m.contains("exactly one")));

        let leaky = record("X", "f", "return 'sk-123'");
        let err = reg.register(leaky, &[Secret::new("serpapi", "sk-123")]).unwrap_err();
        assert!(err.to_string().contains("serpapi"));
        assert!(reg.is_empty());
    }

    #[test]
    fn private_helpers_are_allowed() {
        let mut r = record("X", "f", "return _helper(x)");
        r.source.push_str("\ndef _helper(v):\n    return v\n");
        let dir = tempfile::tempdir().unwrap();
        Registry::open(dir.path()).unwrap().register(r, &[]).unwrap();
    }

    #[test]
    fn fetch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        assert!(matches!(reg.fetch("nope"), Err(RegistryError::NotFound(_))));
        reg.register(record("Web Search", "web_search_tool", "return x"), &[]).unwrap();
        fs::remove_file(dir.path().join("web_search_tool.py")).unwrap();
        let err = reg.fetch("web_search_tool").unwrap_err();
        assert!(matches!(err, RegistryError::Integrity(_)));
        assert!(err.to_string().contains("web_search_tool.py"));
        assert_eq!(reg.integrity_problems().len(), 1);
    }

    #[test]
    fn orphans_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        fs::write(dir.path().join("stray.py"), "x = 1\n").unwrap();
        assert_eq!(reg.orphans().unwrap(), vec![dir.path().join("stray.py")]);
        assert!(reg.is_empty());
    }

    #[test]
    fn disabled_entries_leave_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        reg.register(record("A", "a_tool", "return x"), &[]).unwrap();
        reg.set_disabled("a_tool", true).unwrap();
        assert_eq!(reg.snapshot_text(), "[]");
        let reopened = Registry::open(dir.path()).unwrap();
        assert!(reopened.snapshot().is_empty());
        assert!(reopened.fetch("a_tool").unwrap().disabled);
    }

    #[test]
    fn disabled_entry_is_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        reg.register(record("A", "a_tool", "return x"), &[]).unwrap();
        reg.set_disabled("a_tool", true).unwrap();
        let stored = reg.register(record("A", "a_tool", "return x + x"), &[]).unwrap();
        assert_eq!(stored.function_name, "a_tool");
        assert_eq!(reg.len(), 1);
        let back = reg.fetch("a_tool").unwrap();
        assert!(!back.disabled);
        assert!(back.source.contains("x + x"));
    }
}
