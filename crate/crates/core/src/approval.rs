//! Human approval of generated code and API credentials.
//!
//! Execution in the sandbox requires an [`ApprovedSource`], which can only be
//! produced here after an approving verdict for that exact source.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::{EventKind, TraceLog};
use crate::vault::{normalize_api_name, Secret};

pub fn source_hash(source: &str) -> String {
    hex::encode(Sha256::digest(source.as_bytes()))
}

pub fn new_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalKind {
    CodeReview,
    ApiKeyRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Reject,
    ApproveEdited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ApprovalPayload {
    Code {
        tool: String,
        source: String,
        source_hash: String,
    },
    ApiKeys {
        tool: String,
        api_names: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalRequest {
    pub id: String,
    pub session_id: String,
    pub kind: ApprovalKind,
    pub payload: ApprovalPayload,
    pub created_at: DateTime<Utc>,
}

/// A reviewer's answer. Keys are accepted on input only and never serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApprovalDecision {
    pub request_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_source: Option<String>,
    #[serde(skip)]
    pub keys: Vec<Secret>,
    pub decided_at: DateTime<Utc>,
}

impl ApprovalDecision {
    pub fn new(request_id: impl Into<String>, verdict: Verdict) -> Self {
        Self {
            request_id: request_id.into(),
            verdict,
            edited_source: None,
            keys: Vec::new(),
            decided_at: Utc::now(),
        }
    }

    pub fn edited(request_id: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            edited_source: Some(source.into()),
            ..Self::new(request_id, Verdict::ApproveEdited)
        }
    }

    pub fn with_keys(request_id: impl Into<String>, keys: Vec<Secret>) -> Self {
        Self {
            keys,
            ..Self::new(request_id, Verdict::Approve)
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApprovalError {
    #[error("no approval request {0}")]
    NotFound(String),
    #[error("approval request {0} was already decided")]
    AlreadyDecided(String),
    #[error("invalid decision: {0}")]
    Invalid(String),
    #[error("timed out waiting for approval {0}")]
    TimedOut(String),
    #[error("approval broker closed")]
    Closed,
}

/// Source text that passed review. Only constructible inside the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApprovedSource {
    source: String,
    hash: String,
}

impl ApprovedSource {
    pub(crate) fn new(source: String) -> Self {
        let hash = source_hash(&source);
        Self { source, hash }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Whether the text still matches the hash it was approved under.
    pub fn verify(&self) -> bool {
        source_hash(&self.source) == self.hash
    }
}

struct Slot {
    request: ApprovalRequest,
    decision: Option<ApprovalDecision>,
    taken: bool,
}

#[derive(Default)]
struct BrokerState {
    slots: BTreeMap<String, Slot>,
    closed: bool,
}

/// Shared queue of pending approval requests. Cloning shares the queue.
#[derive(Clone, Default)]
pub struct ApprovalBroker {
    inner: Arc<(Mutex<BrokerState>, Condvar)>,
}

impl std::fmt::Debug for ApprovalBroker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApprovalBroker").field("pending", &self.pending().len()).finish()
    }
}

impl ApprovalBroker {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, BrokerState> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn submit(&self, request: ApprovalRequest) {
        let mut state = self.lock();
        state.slots.insert(
            request.id.clone(),
            Slot {
                request,
                decision: None,
                taken: false,
            },
        );
        drop(state);
        self.inner.1.notify_all();
    }

    /// Blocks until the request is decided, the timeout passes, or the broker
    /// closes.
    pub fn wait(&self, id: &str, timeout: Option<Duration>) -> Result<ApprovalDecision, ApprovalError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut state = self.lock();
        loop {
            let slot = state
                .slots
                .get_mut(id)
                .ok_or_else(|| ApprovalError::NotFound(id.to_string()))?;
            if let Some(decision) = slot.decision.as_mut() {
                slot.taken = true;
                let keys = std::mem::take(&mut decision.keys);
                let mut out = decision.clone();
                out.keys = keys;
                return Ok(out);
            }
            if state.closed {
                return Err(ApprovalError::Closed);
            }
            state = match deadline {
                None => self.inner.1.wait(state).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(ApprovalError::TimedOut(id.to_string()));
                    }
                    self.inner
                        .1
                        .wait_timeout(state, d - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    /// Requests that still await a verdict, oldest first.
    pub fn pending(&self) -> Vec<ApprovalRequest> {
        let state = self.lock();
        let mut out: Vec<_> = state
            .slots
            .values()
            .filter(|s| s.decision.is_none())
            .map(|s| s.request.clone())
            .collect();
        out.sort_by_key(|r| r.created_at);
        out
    }

    /// Every request seen so far with its verdict, oldest first.
    pub fn history(&self) -> Vec<(ApprovalRequest, Option<Verdict>)> {
        let state = self.lock();
        let mut out: Vec<_> = state
            .slots
            .values()
            .map(|s| (s.request.clone(), s.decision.as_ref().map(|d| d.verdict)))
            .collect();
        out.sort_by_key(|(r, _)| r.created_at);
        out
    }

    pub fn get(&self, id: &str) -> Option<ApprovalRequest> {
        self.lock().slots.get(id).map(|s| s.request.clone())
    }

    pub fn decide(&self, decision: ApprovalDecision) -> Result<(), ApprovalError> {
        let mut state = self.lock();
        let slot = state
            .slots
            .get_mut(&decision.request_id)
            .ok_or_else(|| ApprovalError::NotFound(decision.request_id.clone()))?;
        if slot.decision.is_some() {
            return Err(ApprovalError::AlreadyDecided(decision.request_id.clone()));
        }
        validate_decision(&slot.request, &decision)?;
        slot.decision = Some(decision);
        drop(state);
        self.inner.1.notify_all();
        Ok(())
    }

    /// Wakes all waiters with [`ApprovalError::Closed`].
    pub fn close(&self) {
        self.lock().closed = true;
        self.inner.1.notify_all();
    }
}

fn validate_decision(request: &ApprovalRequest, decision: &ApprovalDecision) -> Result<(), ApprovalError> {
    match (&request.payload, decision.verdict) {
        (ApprovalPayload::Code { .. }, Verdict::ApproveEdited) => match &decision.edited_source {
            Some(s) if !s.trim().is_empty() => Ok(()),
            _ => Err(ApprovalError::Invalid("approve_edited requires edited_source".into())),
        },
        (ApprovalPayload::Code { .. }, _) if !decision.keys.is_empty() => {
            Err(ApprovalError::Invalid("code review decisions carry no keys".into()))
        }
        (ApprovalPayload::ApiKeys { .. }, Verdict::ApproveEdited) => {
            Err(ApprovalError::Invalid("api key requests cannot be edited".into()))
        }
        (ApprovalPayload::ApiKeys { api_names, .. }, Verdict::Approve) => {
            let given: Vec<String> = decision.keys.iter().map(|k| normalize_api_name(k.name())).collect();
            let missing: Vec<&String> = api_names.iter().filter(|n| !given.contains(n)).collect();
            if !missing.is_empty() {
                return Err(ApprovalError::Invalid(format!(
                    "missing keys for: {}",
                    missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
            if decision.keys.iter().any(|k| k.expose().trim().is_empty()) {
                return Err(ApprovalError::Invalid("empty key value".into()));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

#[derive(Debug)]
pub enum CodeReview {
    Approved(ApprovedSource),
    Rejected,
}

#[derive(Debug)]
pub enum KeyReview {
    Provided(Vec<Secret>),
    Rejected,
}

/// Per-session front end to the broker that records every step in the trace.
/// Auto-approval covers code review only; credentials always need a person.
pub struct ApprovalGate {
    session_id: String,
    broker: ApprovalBroker,
    auto_approve: bool,
    timeout: Option<Duration>,
}

impl ApprovalGate {
    pub fn new(session_id: impl Into<String>, broker: ApprovalBroker, auto_approve: bool) -> Self {
        Self {
            session_id: session_id.into(),
            broker,
            auto_approve,
            timeout: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn broker(&self) -> &ApprovalBroker {
        &self.broker
    }

    pub fn auto_approve(&self) -> bool {
        self.auto_approve
    }

    fn request(&self, kind: ApprovalKind, payload: ApprovalPayload) -> ApprovalRequest {
        ApprovalRequest {
            id: new_id(),
            session_id: self.session_id.clone(),
            kind,
            payload,
            created_at: Utc::now(),
        }
    }

    pub fn review_code(&self, tool: &str, source: &str, trace: &TraceLog) -> Result<CodeReview, ApprovalError> {
        let hash = source_hash(source);
        let request = self.request(
            ApprovalKind::CodeReview,
            ApprovalPayload::Code {
                tool: tool.to_string(),
                source: source.to_string(),
                source_hash: hash.clone(),
            },
        );
        let id = request.id.clone();
        trace.record(EventKind::ApprovalRequested {
            request_id: id.clone(),
            approval_kind: ApprovalKind::CodeReview,
            source_hash: Some(hash.clone()),
            apis: vec![],
        });
        let decision = if self.auto_approve {
            ApprovalDecision::new(&id, Verdict::Approve)
        } else {
            self.broker.submit(request);
            self.broker.wait(&id, self.timeout)?
        };
        let approved = match decision.verdict {
            Verdict::Reject => None,
            Verdict::Approve => Some(ApprovedSource::new(source.to_string())),
            Verdict::ApproveEdited => Some(ApprovedSource::new(decision.edited_source.clone().unwrap_or_default())),
        };
        trace.record(EventKind::ApprovalDecided {
            request_id: id,
            verdict: decision.verdict,
            source_hash: approved.as_ref().map(|a| a.hash().to_string()),
            keys: vec![],
            auto: self.auto_approve,
        });
        Ok(match approved {
            Some(a) => CodeReview::Approved(a),
            None => CodeReview::Rejected,
        })
    }

    pub fn request_keys(&self, tool: &str, api_names: &[String], trace: &TraceLog) -> Result<KeyReview, ApprovalError> {
        let api_names: Vec<String> = api_names.iter().map(|n| normalize_api_name(n)).collect();
        let request = self.request(
            ApprovalKind::ApiKeyRequest,
            ApprovalPayload::ApiKeys {
                tool: tool.to_string(),
                api_names: api_names.clone(),
            },
        );
        let id = request.id.clone();
        trace.record(EventKind::ApprovalRequested {
            request_id: id.clone(),
            approval_kind: ApprovalKind::ApiKeyRequest,
            source_hash: None,
            apis: api_names,
        });
        self.broker.submit(request);
        let decision = self.broker.wait(&id, self.timeout)?;
        for key in &decision.keys {
            trace.add_secret(key.clone());
        }
        trace.record(EventKind::ApprovalDecided {
            request_id: id,
            verdict: decision.verdict,
            source_hash: None,
            keys: decision
                .keys
                .iter()
                .map(|k| format!("{}: <provided>", normalize_api_name(k.name())))
                .collect(),
            auto: false,
        });
        Ok(match decision.verdict {
            Verdict::Reject => KeyReview::Rejected,
            _ => KeyReview::Provided(decision.keys),
        })
    }
}
