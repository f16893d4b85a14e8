#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use toolsmith_core::approval::{ApprovalBroker, ApprovalDecision, ApprovalPayload, ApprovalRequest, Verdict};
use toolsmith_core::config::Config;
use toolsmith_core::gateway::{PricingTable, ReplayProvider};
use toolsmith_core::orchestrator::{Orchestrator, SessionHandle, SessionReport};
use toolsmith_core::retrieval::StubServer;
use toolsmith_core::trace::{read_trace_file, EventKind, TraceEvent};
use toolsmith_core::vault::Secret;

pub const SERPAPI_KEY: &str = "sk-serp-7f3a9c21d0e4b8";

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    repo_root().join("fixtures/replay").join(format!("{name}.json"))
}

pub fn replay(name: &str) -> ReplayProvider {
    let p = ReplayProvider::from_file(&fixture(name), PricingTable::default()).unwrap();
    p.check_contiguous().unwrap();
    p
}

/// How the scripted reviewer answers approval requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    ApproveAll,
    RejectCode,
    RejectKeys,
}

/// Answers approval requests on a background thread, like a human would.
pub struct Reviewer {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    pub seen: Arc<Mutex<Vec<ApprovalRequest>>>,
}

impl Reviewer {
    pub fn start(broker: ApprovalBroker, policy: Policy, keys: Vec<Secret>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (s, log) = (stop.clone(), seen.clone());
        let thread = std::thread::spawn(move || {
            while !s.load(Ordering::Relaxed) {
                for req in broker.pending() {
                    log.lock().unwrap().push(req.clone());
                    let decision = match (&req.payload, policy) {
                        (ApprovalPayload::Code { .. }, Policy::RejectCode) => {
                            ApprovalDecision::new(&req.id, Verdict::Reject)
                        }
                        (ApprovalPayload::Code { .. }, _) => ApprovalDecision::new(&req.id, Verdict::Approve),
                        (ApprovalPayload::ApiKeys { .. }, Policy::RejectKeys) => {
                            ApprovalDecision::new(&req.id, Verdict::Reject)
                        }
                        (ApprovalPayload::ApiKeys { api_names, .. }, _) => {
                            let provided = api_names
                                .iter()
                                .map(|n| {
                                    keys.iter()
                                        .find(|k| k.name() == n)
                                        .cloned()
                                        .unwrap_or_else(|| Secret::new(n.as_str(), format!("key-for-{n}")))
                                })
                                .collect();
                            ApprovalDecision::with_keys(&req.id, provided)
                        }
                    };
                    broker.decide(decision).unwrap();
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        });
        Self {
            stop,
            thread: Some(thread),
            seen,
        }
    }
}

impl Drop for Reviewer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// An isolated registry and runs directory.
pub struct Env {
    pub dir: tempfile::TempDir,
    pub config: Config,
    pub broker: ApprovalBroker,
}

impl Env {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = Config {
            registry_path: dir.path().join("tools"),
            runs_dir: dir.path().join("runs"),
            approval_timeout_secs: Some(30),
            ..Config::default()
        };
        Self {
            dir,
            config,
            broker: ApprovalBroker::new(),
        }
    }

    pub fn with_search(mut self, stub: &StubServer) -> Self {
        self.config.search.endpoint = Some(stub.url());
        self
    }

    pub fn orchestrator(&self) -> Orchestrator {
        Orchestrator::new(self.config.clone(), self.broker.clone()).unwrap()
    }

    pub fn registry_dir(&self) -> PathBuf {
        self.config.registry_path.clone()
    }
}

pub struct Run {
    pub handle: SessionHandle,
    pub report: SessionReport,
    pub provider: ReplayProvider,
    pub events: Vec<TraceEvent>,
}

impl Run {
    pub fn kinds(&self) -> impl Iterator<Item = &EventKind> {
        self.events.iter().map(|e| &e.event)
    }

    pub fn count(&self, name: &str) -> usize {
        self.kinds().filter(|k| k.name() == name).count()
    }
}

/// Runs `task` against fixture `name` with a scripted reviewer.
pub fn run(env: &Env, name: &str, task: &str, policy: Policy, keys: Vec<Secret>) -> Run {
    let orch = env.orchestrator();
    let _reviewer = Reviewer::start(env.broker.clone(), policy, keys);
    let mut provider = replay(name);
    let (handle, report) = orch.run_session(task, &mut provider).unwrap();
    let events = read_trace_file(&handle.run_dir.join("trace.jsonl")).unwrap();
    Run {
        handle,
        report,
        provider,
        events,
    }
}

pub fn stub_dir() -> PathBuf {
    repo_root().join("fixtures/stub")
}
