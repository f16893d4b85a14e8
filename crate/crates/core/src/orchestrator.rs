//! Session state machine: analysis, tool decision, selection, generation,
//! solving, and terminal-state accounting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approval::{new_id, ApprovalBroker, ApprovalGate, ApprovedSource, KeyReview};
use crate::config::Config;
use crate::gateway::{ChatProvider, Cost, Metered, Stage, StageUsage, Usage};
use crate::generator::{generate_tool, GenerationContext, GenerationError, GenerationOutcome};
use crate::harness;
use crate::prompts::PromptSet;
use crate::registry::{Registry, RegistryError, ToolRecord};
use crate::retrieval::SearchClient;
use crate::sandbox::{Sandbox, SandboxError};
use crate::solver::{solve, SolveContext, SolveError, SolveTerminal};
use crate::stages::{analyze_task, decide_tools, select_tools, StageError, ToolSpec};
use crate::trace::{EventKind, Phase, Terminal, TraceLog};
use crate::vault::{Secret, SecretVault};

/// Prefix of environment variables that pre-load API keys, e.g.
/// `TOOLSMITH_KEY_SERPAPI`.
pub const KEY_ENV_PREFIX: &str = "TOOLSMITH_KEY_";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("run directory {path}: {source}")]
    RunDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("prompt templates: {0}")]
    Prompts(std::io::Error),
}

/// Live view of a session, readable while it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub task: String,
    pub phase: Phase,
    pub terminal: Option<Terminal>,
    pub answer: Option<String>,
    pub diagnostic: Option<String>,
    pub usage_total: Usage,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Clone)]
pub struct SessionHandle {
    pub id: String,
    pub run_dir: PathBuf,
    pub trace: Arc<TraceLog>,
    view: Arc<Mutex<SessionView>>,
    report: Arc<Mutex<Option<SessionReport>>>,
}

impl std::fmt::Debug for SessionHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionHandle").field("id", &self.id).finish()
    }
}

impl SessionHandle {
    pub fn view(&self) -> SessionView {
        self.view.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn report(&self) -> Option<SessionReport> {
        self.report.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn update(&self, f: impl FnOnce(&mut SessionView)) {
        f(&mut self.view.lock().unwrap_or_else(|p| p.into_inner()));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Stage,
    pub calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalRow {
    pub calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub task: String,
    pub terminal: Terminal,
    pub answer: Option<String>,
    pub diagnostic: Option<String>,
    pub stages: Vec<StageRow>,
    pub total: TotalRow,
    pub calls: Vec<StageUsage>,
    pub tools_generated: Vec<String>,
    pub tools_reused: Vec<String>,
    pub generation_iterations: u32,
    pub solve_steps: u32,
    pub tool_steps: u32,
    pub artifacts: Vec<PathBuf>,
    pub pricing_model: String,
    pub wall_time_secs: f64,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl SessionReport {
    pub fn provider_calls(&self) -> usize {
        self.total.calls
    }
}

/// Per-stage rows (stages without calls omitted) and their total.
pub fn stage_rows(calls: &[StageUsage]) -> (Vec<StageRow>, TotalRow) {
    let mut by_stage: BTreeMap<Stage, (usize, Usage)> = BTreeMap::new();
    for c in calls {
        let e = by_stage.entry(c.stage).or_default();
        e.0 += 1;
        e.1 += c.usage;
    }
    let rows: Vec<StageRow> = Stage::ALL
        .iter()
        .filter_map(|s| by_stage.get(s).map(|(n, u)| (s, n, u)))
        .map(|(s, n, u)| StageRow {
            stage: *s,
            calls: *n,
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
            total_tokens: u.total_tokens(),
            cost: u.cost,
        })
        .collect();
    let total: Usage = calls.iter().map(|c| c.usage).sum();
    let total = TotalRow {
        calls: calls.len(),
        prompt_tokens: total.prompt_tokens,
        completion_tokens: total.completion_tokens,
        total_tokens: total.total_tokens(),
        cost: total.cost,
    };
    (rows, total)
}

/// API keys supplied through `TOOLSMITH_KEY_<NAME>` environment variables.
pub fn preset_keys() -> Vec<Secret> {
    std::env::vars()
        .filter_map(|(k, v)| {
            let name = k.strip_prefix(KEY_ENV_PREFIX)?;
            (!name.is_empty() && !v.is_empty()).then(|| Secret::new(name, v))
        })
        .collect()
}

pub struct Orchestrator {
    config: Config,
    registry: Arc<Registry>,
    broker: ApprovalBroker,
    prompts: PromptSet,
}

struct Outcome {
    terminal: Terminal,
    answer: Option<String>,
    diagnostic: Option<String>,
}

impl Outcome {
    fn error(diagnostic: impl Into<String>) -> Self {
        Self {
            terminal: Terminal::Error,
            answer: None,
            diagnostic: Some(diagnostic.into()),
        }
    }

    fn terminal(terminal: Terminal, diagnostic: Option<String>) -> Self {
        Self {
            terminal,
            answer: None,
            diagnostic,
        }
    }
}

#[derive(Default)]
struct Tally {
    generated: Vec<String>,
    reused: Vec<String>,
    iterations: u32,
    solve_steps: u32,
    tool_steps: u32,
    artifacts: Vec<PathBuf>,
}

impl Orchestrator {
    pub fn new(config: Config, broker: ApprovalBroker) -> Result<Self, OrchestratorError> {
        let registry = Arc::new(Registry::open(&config.registry_path)?);
        let prompts = match &config.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir).map_err(OrchestratorError::Prompts)?,
            None => PromptSet::default(),
        };
        Ok(Self {
            config,
            registry,
            broker,
            prompts,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn broker(&self) -> &ApprovalBroker {
        &self.broker
    }

    /// Allocates a session id, its run directory and trace file.
    pub fn prepare(&self, task: &str) -> Result<SessionHandle, OrchestratorError> {
        let id = new_id();
        let run_dir = self.config.runs_dir.join(&id);
        let io_err = |source| OrchestratorError::RunDir {
            path: run_dir.clone(),
            source,
        };
        std::fs::create_dir_all(&run_dir).map_err(io_err)?;
        let trace = Arc::new(TraceLog::create(&run_dir.join(TRACE_FILE)).map_err(io_err)?);
        Ok(SessionHandle {
            view: Arc::new(Mutex::new(SessionView {
                id: id.clone(),
                task: task.to_string(),
                phase: Phase::Analyzing,
                terminal: None,
                answer: None,
                diagnostic: None,
                usage_total: Usage::default(),
                created_at: Utc::now(),
                finished_at: None,
            })),
            report: Arc::new(Mutex::new(None)),
            id,
            run_dir,
            trace,
        })
    }

    /// Prepares and runs a session to completion.
    pub fn run_session(
        &self,
        task: &str,
        provider: &mut dyn ChatProvider,
    ) -> Result<(SessionHandle, SessionReport), OrchestratorError> {
        let handle = self.prepare(task)?;
        let report = self.run(&handle, provider);
        Ok((handle, report))
    }

    /// Drives a prepared session through every phase. Always ends in exactly
    /// one terminal state, with trace and report persisted.
    pub fn run(&self, handle: &SessionHandle, provider: &mut dyn ChatProvider) -> SessionReport {
        let started = Instant::now();
        let started_at = Utc::now();
        let trace = handle.trace.clone();
        let task = handle.view().task;
        trace.record(EventKind::SessionStarted {
            session_id: handle.id.clone(),
            task: task.clone(),
        });

        let mut vault = SecretVault::new();
        for key in preset_keys() {
            trace.add_secret(key.clone());
            vault.insert(key);
        }
        let gate = ApprovalGate::new(&handle.id, self.broker.clone(), self.config.auto_approve)
            .with_timeout(self.config.approval_timeout());
        let mut metered = Metered::new(provider, &trace);
        let mut sandbox: Option<Sandbox> = None;
        let mut tally = Tally::default();

        let outcome = self.drive(handle, &task, &mut metered, &gate, &mut vault, &mut sandbox, &mut tally);

        if let Some(mut sb) = sandbox.take() {
            sb.close();
        }
        vault.clear();
        let calls = metered.into_calls();
        let (stages, total) = stage_rows(&calls);
        self.set_phase(handle, Phase::Done);
        trace.record(EventKind::SessionFinished {
            terminal: outcome.terminal,
            answer: outcome.answer.clone(),
            diagnostic: outcome.diagnostic.clone(),
        });
        let finished_at = Utc::now();
        tally.artifacts.sort();
        tally.artifacts.dedup();
        let report = SessionReport {
            session_id: handle.id.clone(),
            task,
            terminal: outcome.terminal,
            answer: outcome.answer.clone(),
            diagnostic: outcome.diagnostic.clone(),
            stages,
            total,
            calls: calls.clone(),
            tools_generated: tally.generated,
            tools_reused: tally.reused,
            generation_iterations: tally.iterations,
            solve_steps: tally.solve_steps,
            tool_steps: tally.tool_steps,
            artifacts: tally.artifacts,
            pricing_model: self.config.pricing.model_id.clone(),
            wall_time_secs: started.elapsed().as_secs_f64(),
            started_at,
            finished_at,
        };
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        if let Err(e) = std::fs::write(handle.run_dir.join(REPORT_FILE), format!("{text}\n")) {
            tracing::error!(error = %e, "failed to write session report");
        }
        handle.update(|v| {
            v.terminal = Some(outcome.terminal);
            v.answer = outcome.answer;
            v.diagnostic = outcome.diagnostic;
            v.usage_total = calls.iter().map(|c| c.usage).sum();
            v.finished_at = Some(finished_at);
        });
        *handle.report.lock().unwrap_or_else(|p| p.into_inner()) = Some(report.clone());
        trace.clear_secrets();
        trace.close();
        report
    }

    fn set_phase(&self, handle: &SessionHandle, phase: Phase) {
        handle.update(|v| v.phase = phase);
        handle.trace.record(EventKind::PhaseChanged { phase });
    }

    fn sandbox<'s>(&self, handle: &SessionHandle, slot: &'s mut Option<Sandbox>) -> Result<&'s mut Sandbox, SandboxError> {
        if slot.is_none() {
            let sb = Sandbox::new(self.config.sandbox_policy(), &handle.run_dir)?.with_trace(handle.trace.clone());
            *slot = Some(sb);
        }
        Ok(slot.as_mut().expect("just created"))
    }

    #[allow(clippy::too_many_arguments)]
    fn drive(
        &self,
        handle: &SessionHandle,
        task: &str,
        provider: &mut Metered<'_>,
        gate: &ApprovalGate,
        vault: &mut SecretVault,
        sandbox: &mut Option<Sandbox>,
        tally: &mut Tally,
    ) -> Outcome {
        let trace = handle.trace.as_ref();
        let stage_err = |e: StageError| Outcome::error(e.to_string());

        self.set_phase(handle, Phase::Analyzing);
        let plan = match analyze_task(task, provider, &self.prompts) {
            Ok(c) => c.value,
            Err(e) => return stage_err(e),
        };
        trace.record(EventKind::SubtasksPlanned {
            subtasks: plan.subtasks().to_vec(),
        });

        self.set_phase(handle, Phase::DecidingTools);
        let required = match decide_tools(&plan, provider, &self.prompts) {
            Ok(c) => c.value,
            Err(e) => return stage_err(e),
        };
        trace.record(EventKind::ToolsRequired {
            tools: required.tools.clone(),
        });

        let mut tools: Vec<ToolRecord> = Vec::new();
        if !required.is_empty() {
            if required.tools.len() > self.config.budgets.tool_count_warning {
                trace.record(EventKind::Warning {
                    message: format!(
                        "tool master requested {} tools (warning threshold {})",
                        required.tools.len(),
                        self.config.budgets.tool_count_warning
                    ),
                });
            }
            self.set_phase(handle, Phase::Selecting);
            let snapshot = self.registry.snapshot();
            let selection = match select_tools(&required, &snapshot, provider, &self.prompts) {
                Ok(c) => c.value,
                Err(e) => return stage_err(e),
            };
            trace.record(EventKind::ToolsSelected {
                entries: selection.entries.clone(),
            });
            for w in &selection.warnings {
                trace.record(EventKind::Warning { message: w.clone() });
            }

            let mut to_generate: Vec<ToolSpec> = Vec::new();
            for entry in &selection.entries {
                let reusable = match (entry.is_available, &entry.function_name) {
                    (true, Some(f)) => match self.load_reusable(handle, f, gate, vault, sandbox) {
                        Ok(Some(record)) => Some(record),
                        Ok(None) => {
                            return Outcome::terminal(
                                Terminal::RejectedByHuman,
                                Some(format!("API key request for {f} was rejected")),
                            )
                        }
                        Err(problem) => {
                            trace.record(EventKind::Warning {
                                message: format!("registry integrity: {f}: {problem}; regenerating"),
                            });
                            if let Err(e) = self.registry.set_disabled(f, true) {
                                tracing::warn!(error = %e, function_name = %f, "could not disable broken tool");
                            }
                            None
                        }
                    },
                    _ => None,
                };
                match reusable {
                    Some(record) => {
                        trace.record(EventKind::ToolReused {
                            name: record.name.clone(),
                            function_name: record.function_name.clone(),
                        });
                        tally.reused.push(record.function_name.clone());
                        if !tools.iter().any(|t| t.function_name == record.function_name) {
                            tools.push(record);
                        }
                    }
                    None => to_generate.push(entry.requested.clone()),
                }
            }

            if !to_generate.is_empty() {
                self.set_phase(handle, Phase::Generating);
                let search = match &self.config.search.endpoint {
                    Some(ep) => match SearchClient::new(ep) {
                        Ok(c) => Some(c),
                        Err(e) => return Outcome::error(format!("search endpoint: {e}")),
                    },
                    None => None,
                };
                let gen_config = self.config.generator_config();
                for spec in &to_generate {
                    let sb = match self.sandbox(handle, sandbox) {
                        Ok(sb) => sb,
                        Err(e) => return Outcome::error(e.to_string()),
                    };
                    let mut ctx = GenerationContext {
                        provider: &mut *provider,
                        sandbox: sb,
                        registry: &self.registry,
                        gate,
                        vault: &mut *vault,
                        trace,
                        prompts: &self.prompts,
                        search: search.as_ref(),
                        config: &gen_config,
                    };
                    match generate_tool(spec, &mut ctx) {
                        Ok(GenerationOutcome::Succeeded { record, iterations }) => {
                            tally.iterations += iterations;
                            tally.generated.push(record.function_name.clone());
                            tools.push(record);
                        }
                        Ok(GenerationOutcome::Rejected { iterations }) => {
                            tally.iterations += iterations;
                            return Outcome::terminal(
                                Terminal::RejectedByHuman,
                                Some(format!("human rejected the generation of {}", spec.name)),
                            );
                        }
                        Ok(GenerationOutcome::Exhausted { iterations, last_error }) => {
                            tally.iterations += iterations;
                            let message = format!(
                                "generation of {} exhausted {iterations} iterations: {last_error}",
                                spec.name
                            );
                            if !self.config.continue_on_exhausted {
                                return Outcome::terminal(Terminal::GenerationExhausted, Some(message));
                            }
                            trace.record(EventKind::Warning {
                                message: format!("{message}; continuing without it"),
                            });
                        }
                        Err(GenerationError::Approval(e)) => return Outcome::error(format!("approval: {e}")),
                        Err(e) => return Outcome::error(e.to_string()),
                    }
                }
            }
        }

        self.set_phase(handle, Phase::Solving);
        let sb = match self.sandbox(handle, sandbox) {
            Ok(sb) => sb,
            Err(e) if tools.is_empty() => {
                tracing::debug!(error = %e, "no sandbox needed for a tool-free solve");
                return self.solve_without_sandbox(task, provider, trace, tally);
            }
            Err(e) => return Outcome::error(e.to_string()),
        };
        let mut ctx = SolveContext {
            provider,
            sandbox: sb,
            vault,
            trace,
            prompts: &self.prompts,
            config: self.config.solver_config(),
        };
        let result = match solve(task, &tools, &mut ctx) {
            Ok(r) => r,
            Err(SolveError::Sandbox(SandboxError::MissingSecrets(names))) => {
                return Outcome::error(format!("missing API keys: {}", names.join(", ")))
            }
            Err(e) => return Outcome::error(e.to_string()),
        };
        tally.solve_steps = result.steps.len() as u32;
        tally.tool_steps = result.tool_steps() as u32;
        tally.artifacts.extend(result.artifacts.iter().cloned());
        match result.terminal {
            SolveTerminal::Answered => Outcome {
                terminal: if required.is_empty() {
                    Terminal::NoToolAnswered
                } else {
                    Terminal::Answered
                },
                answer: Some(result.answer),
                diagnostic: None,
            },
            SolveTerminal::StepBudgetExhausted | SolveTerminal::ToolFailureAbort => Outcome {
                terminal: Terminal::Error,
                answer: (!result.answer.is_empty()).then_some(result.answer),
                diagnostic: result.diagnostic,
            },
        }
    }

    /// Tool-free solving does not need an interpreter; this path keeps a
    /// missing Python from failing sessions that never run code.
    fn solve_without_sandbox(
        &self,
        task: &str,
        provider: &mut Metered<'_>,
        trace: &TraceLog,
        tally: &mut Tally,
    ) -> Outcome {
        let dir = match tempfile::tempdir() {
            Ok(d) => d,
            Err(e) => return Outcome::error(e.to_string()),
        };
        let policy = crate::sandbox::SandboxPolicy {
            interpreter: Some(PathBuf::from("/bin/sh")),
            ..self.config.sandbox_policy()
        };
        let mut sb = match Sandbox::new(policy, dir.path()) {
            Ok(sb) => sb,
            Err(e) => return Outcome::error(e.to_string()),
        };
        let vault = SecretVault::new();
        let mut ctx = SolveContext {
            provider,
            sandbox: &mut sb,
            vault: &vault,
            trace,
            prompts: &self.prompts,
            config: self.config.solver_config(),
        };
        match solve(task, &[], &mut ctx) {
            Ok(r) if r.terminal == SolveTerminal::Answered => {
                tally.solve_steps = r.steps.len() as u32;
                Outcome {
                    terminal: Terminal::NoToolAnswered,
                    answer: Some(r.answer),
                    diagnostic: None,
                }
            }
            Ok(r) => Outcome::error(r.diagnostic.unwrap_or_else(|| "solver did not answer".into())),
            Err(e) => Outcome::error(e.to_string()),
        }
    }

    /// Fetches a registered tool, obtains its API keys, and re-extracts its
    /// schema. `Err` describes registry rot; `Ok(None)` means keys refused.
    fn load_reusable(
        &self,
        handle: &SessionHandle,
        function_name: &str,
        gate: &ApprovalGate,
        vault: &mut SecretVault,
        sandbox: &mut Option<Sandbox>,
    ) -> Result<Option<ToolRecord>, String> {
        let record = self.registry.fetch(function_name).map_err(|e| e.to_string())?;
        let missing = vault.missing(record.api_requirements.iter());
        if !missing.is_empty() {
            match gate.request_keys(&record.name, &missing, &handle.trace) {
                Ok(KeyReview::Provided(keys)) => keys.into_iter().for_each(|k| vault.insert(k)),
                Ok(KeyReview::Rejected) => return Ok(None),
                Err(e) => return Err(format!("key request failed: {e}")),
            }
        }
        let sb = self.sandbox(handle, sandbox).map_err(|e| e.to_string())?;
        let module = ApprovedSource::new(record.source.clone());
        let schema = harness::extract_schema(sb, &module, vault, function_name).map_err(|e| e.to_string())?;
        if schema != record.schema {
            return Err("stored schema no longer matches the script".into());
        }
        Ok(Some(record))
    }
}

/// Secrets found anywhere under `root`, as (file, secret name) pairs.
pub fn scan_for_secrets(root: &Path, secrets: &[Secret]) -> Vec<(PathBuf, String)> {
    let mut hits = Vec::new();
    for entry in walkdir::WalkDir::new(root).into_iter().flatten() {
        if !entry.file_type().is_file() {
            continue;
        }
        let Ok(bytes) = std::fs::read(entry.path()) else { continue };
        for s in secrets {
            let needle = s.expose().as_bytes();
            if !needle.is_empty() && bytes.windows(needle.len()).any(|w| w == needle) {
                hits.push((entry.path().to_path_buf(), s.name().to_string()));
            }
        }
    }
    hits
}
