//! Append-only session event log, persisted as JSON lines.
//!
//! Every event passes through secret redaction before it is stored or
//! written, so the log and its file never hold a vault secret.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::approval::{ApprovalKind, Verdict};
use crate::gateway::{redact_value, Cost, Stage};
use crate::sandbox::ExecutionStatus;
use crate::stages::{SelectionEntry, ToolSpec};
use crate::vault::Secret;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Analyzing,
    DecidingTools,
    Selecting,
    Generating,
    Solving,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Answered,
    NoToolAnswered,
    RejectedByHuman,
    GenerationExhausted,
    Error,
}

impl Terminal {
    pub fn is_success(self) -> bool {
        matches!(self, Terminal::Answered | Terminal::NoToolAnswered)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPurpose {
    Draft,
    Install,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    SessionStarted {
        session_id: String,
        task: String,
    },
    PhaseChanged {
        phase: Phase,
    },
    ProviderCall {
        stage: Stage,
        ordinal: u32,
        prompt_tokens: u64,
        completion_tokens: u64,
        cost: Cost,
    },
    SubtasksPlanned {
        subtasks: Vec<String>,
    },
    ToolsRequired {
        tools: Vec<ToolSpec>,
    },
    ToolsSelected {
        entries: Vec<SelectionEntry>,
    },
    Warning {
        message: String,
    },
    GenerationStarted {
        tool: String,
    },
    ApiKeysNeeded {
        tool: String,
        apis: Vec<String>,
    },
    DocsRetrieved {
        api: String,
        query_url: Option<String>,
        snippets: usize,
        pages: usize,
        notes: Vec<String>,
    },
    ApprovalRequested {
        request_id: String,
        approval_kind: ApprovalKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_hash: Option<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        apis: Vec<String>,
    },
    ApprovalDecided {
        request_id: String,
        verdict: Verdict,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_hash: Option<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        keys: Vec<String>,
        auto: bool,
    },
    ExecutionStarted {
        source_hash: String,
        purpose: ExecPurpose,
    },
    ExecutionFinished {
        source_hash: String,
        status: ExecutionStatus,
        exit_code: Option<i32>,
        duration_ms: u64,
        stderr_excerpt: String,
    },
    GenerationIteration {
        tool: String,
        iteration: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        draft_hash: Option<String>,
        outcome_status: String,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        stderr_excerpt: String,
    },
    GenerationFinished {
        tool: String,
        status: String,
        iterations: u32,
    },
    ToolRegistered {
        name: String,
        function_name: String,
    },
    ToolReused {
        name: String,
        function_name: String,
    },
    SolveStep {
        index: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tool: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        args_digest: Option<String>,
        outcome_status: String,
    },
    SessionFinished {
        terminal: Terminal,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        answer: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diagnostic: Option<String>,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SessionStarted { .. } => "session_started",
            EventKind::PhaseChanged { .. } => "phase_changed",
            EventKind::ProviderCall { .. } => "provider_call",
            EventKind::SubtasksPlanned { .. } => "subtasks_planned",
            EventKind::ToolsRequired { .. } => "tools_required",
            EventKind::ToolsSelected { .. } => "tools_selected",
            EventKind::Warning { .. } => "warning",
            EventKind::GenerationStarted { .. } => "generation_started",
            EventKind::ApiKeysNeeded { .. } => "api_keys_needed",
            EventKind::DocsRetrieved { .. } => "docs_retrieved",
            EventKind::ApprovalRequested { .. } => "approval_requested",
            EventKind::ApprovalDecided { .. } => "approval_decided",
            EventKind::ExecutionStarted { .. } => "execution_started",
            EventKind::ExecutionFinished { .. } => "execution_finished",
            EventKind::GenerationIteration { .. } => "generation_iteration",
            EventKind::GenerationFinished { .. } => "generation_finished",
            EventKind::ToolRegistered { .. } => "tool_registered",
            EventKind::ToolReused { .. } => "tool_reused",
            EventKind::SolveStep { .. } => "solve_step",
            EventKind::SessionFinished { .. } => "session_finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    #[serde(flatten)]
    pub event: EventKind,
}

#[derive(Default)]
struct Inner {
    events: Vec<TraceEvent>,
    file: Option<File>,
    secrets: Vec<Secret>,
    closed: bool,
}

pub struct TraceLog {
    inner: Mutex<Inner>,
    tx: watch::Sender<usize>,
}

impl std::fmt::Debug for TraceLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TraceLog").field("len", &self.len()).finish()
    }
}

impl Default for TraceLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl TraceLog {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            tx: watch::channel(0).0,
        }
    }

    /// Appends to (creating) `path` in addition to keeping events in memory.
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let log = Self::in_memory();
        log.lock().file = Some(file);
        Ok(log)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Registers a secret to scrub from every later event.
    pub fn add_secret(&self, secret: Secret) {
        self.lock().secrets.push(secret);
    }

    pub fn clear_secrets(&self) {
        self.lock().secrets.clear();
    }

    pub fn record(&self, event: EventKind) -> u64 {
        let mut inner = self.lock();
        let seq = inner.events.len() as u64 + 1;
        let mut event = TraceEvent {
            seq,
            ts: Utc::now(),
            event,
        };
        if !inner.secrets.is_empty() {
            let mut v = serde_json::to_value(&event).expect("trace events serialize");
            redact_value(&mut v, &inner.secrets);
            event = serde_json::from_value(v).expect("redacted event keeps its shape");
        }
        if let Some(file) = inner.file.as_mut() {
            let line = serde_json::to_string(&event).expect("trace events serialize");
            if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                tracing::error!(error = %e, "failed to append trace event");
            }
        }
        inner.events.push(event);
        let len = inner.events.len();
        drop(inner);
        self.tx.send_replace(len);
        seq
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.lock().events.clone()
    }

    /// Events with `seq > after`.
    pub fn events_after(&self, after: u64) -> Vec<TraceEvent> {
        let inner = self.lock();
        inner.events.iter().skip(after as usize).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Receives the event count after every append, and a final notification
    /// on close.
    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.tx.subscribe()
    }

    pub fn close(&self) {
        let mut inner = self.lock();
        inner.closed = true;
        inner.file = None;
        let len = inner.events.len();
        drop(inner);
        self.tx.send_replace(len);
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }
}

/// Checks that every execution is preceded by an approving decision for the
/// same source hash.
pub fn check_gate_soundness(events: &[TraceEvent]) -> Result<usize, String> {
    let mut approved = std::collections::HashSet::new();
    let mut executions = 0;
    for e in events {
        match &e.event {
            EventKind::ApprovalDecided {
                verdict: Verdict::Approve | Verdict::ApproveEdited,
                source_hash: Some(h),
                ..
            } => {
                approved.insert(h.clone());
            }
            EventKind::ExecutionStarted { source_hash, .. } => {
                if !approved.contains(source_hash) {
                    return Err(format!(
                        "execution at seq {} has no prior approval for hash {source_hash}",
                        e.seq
                    ));
                }
                executions += 1;
            }
            _ => {}
        }
    }
    Ok(executions)
}

/// Fields that legitimately differ between two replays of one fixture.
const VOLATILE_FIELDS: [&str; 4] = ["ts", "session_id", "request_id", "duration_ms"];

/// Events as JSON objects without volatile fields, for comparing replays.
pub fn normalized(events: &[TraceEvent]) -> Vec<serde_json::Value> {
    events
        .iter()
        .map(|e| {
            let mut v = serde_json::to_value(e).expect("trace events serialize");
            if let Some(obj) = v.as_object_mut() {
                for f in VOLATILE_FIELDS {
                    obj.remove(f);
                }
            }
            v
        })
        .collect()
}

/// Reads a `trace.jsonl` file.
pub fn read_trace_file(path: &Path) -> std::io::Result<Vec<TraceEvent>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn redacts_before_storing_and_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let log = TraceLog::create(&path).unwrap();
        log.add_secret(Secret::new("serpapi", "sk-TRACE"));
        log.record(EventKind::Warning {
            message: "leaked sk-TRACE here".into(),
        });
        log.close();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("sk-TRACE"));
        assert!(text.contains("<<REDACTED:serpapi>>"));
        let events = read_trace_file(&path).unwrap();
        assert_eq!(events, log.events());
        assert_eq!(events[0].seq, 1);
        assert!(log.is_closed());
    }

    #[test]
    fn events_after_cursor() {
        let log = TraceLog::in_memory();
        for phase in [Phase::Analyzing, Phase::DecidingTools, Phase::Solving] {
            log.record(EventKind::PhaseChanged { phase });
        }
        let tail = log.events_after(1);
        assert_eq!(tail.iter().map(|e| e.seq).collect::<Vec<_>>(), [2, 3]);
        assert_eq!(*log.subscribe().borrow(), 3);
    }

    #[test]
    fn gate_soundness_checker() {
        let log = TraceLog::in_memory();
        log.record(EventKind::ApprovalDecided {
            request_id: "r1".into(),
            verdict: Verdict::Approve,
            source_hash: Some("h1".into()),
            keys: vec![],
            auto: true,
        });
        log.record(EventKind::ExecutionStarted {
            source_hash: "h1".into(),
            purpose: ExecPurpose::Draft,
        });
        assert_eq!(check_gate_soundness(&log.events()), Ok(1));
        log.record(EventKind::ExecutionStarted {
            source_hash: "h2".into(),
            purpose: ExecPurpose::Draft,
        });
        assert!(check_gate_soundness(&log.events()).is_err());
    }

    #[test]
    fn normalization_drops_volatile_fields() {
        let a = TraceLog::in_memory();
        let b = TraceLog::in_memory();
        for (log, id) in [(&a, "s1"), (&b, "s2")] {
            log.record(EventKind::SessionStarted {
                session_id: id.into(),
                task: "t".into(),
            });
        }
        assert_ne!(a.events(), b.events());
        assert_eq!(normalized(&a.events()), normalized(&b.events()));
        assert!(normalized(&a.events())[0].get("seq").is_some());
    }
}
