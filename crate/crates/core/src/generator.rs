//! Generate-execute-repair loop producing new registered tools.

use std::sync::OnceLock;

use chrono::Utc;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approval::{source_hash, ApprovalError, ApprovalGate, ApprovedSource, CodeReview, KeyReview};
use crate::extract::{code_blocks, strip_terminate};
use crate::gateway::{ChatMessage, ChatProvider, GatewayError, Stage};
use crate::harness::{self, HarnessError};
use crate::prompts::PromptSet;
use crate::registry::{is_valid_function_name, public_functions, Registry, RegistryError, ToolRecord};
use crate::retrieval::{docs_query, ApiDocBundle, FetchLimits, SearchClient};
use crate::sandbox::{excerpt, placeholder_names, ExecutionOutcome, Sandbox, SandboxError};
use crate::stages::ToolSpec;
use crate::trace::{EventKind, TraceLog};
use crate::vault::{normalize_api_name, SecretVault};

const FEEDBACK_EXCERPT: usize = 4000;
const TRACE_EXCERPT: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub max_iterations: u32,
    pub fetch_limits: FetchLimits,
    /// API whose key authorizes documentation searches.
    pub search_api: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            fetch_limits: FetchLimits::default(),
            search_api: "serpapi".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Drafting,
    AwaitingApproval,
    AwaitingKeys,
    Executing,
    RepairedRetry,
    Succeeded,
    Exhausted,
    Rejected,
}

/// Observable state of one generation loop.
#[derive(Debug, Clone)]
pub struct GenerationLoopState {
    pub spec: ToolSpec,
    pub iteration: u32,
    pub transcript: Vec<ChatMessage>,
    pub last_outcome: Option<ExecutionOutcome>,
    pub api_needed: Vec<String>,
    pub status: LoopStatus,
}

#[derive(Debug)]
pub enum GenerationOutcome {
    Succeeded { record: ToolRecord, iterations: u32 },
    Exhausted { iterations: u32, last_error: String },
    Rejected { iterations: u32 },
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Approval(#[from] ApprovalError),
}

pub struct GenerationContext<'a> {
    pub provider: &'a mut dyn ChatProvider,
    pub sandbox: &'a mut Sandbox,
    pub registry: &'a Registry,
    pub gate: &'a ApprovalGate,
    pub vault: &'a mut SecretVault,
    pub trace: &'a TraceLog,
    pub prompts: &'a PromptSet,
    pub search: Option<&'a SearchClient>,
    pub config: &'a GeneratorConfig,
}

fn sentinel_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)\bAPI[_ ]KEY[_ ]REQUIRED\s*[:=]\s*`?<?([A-Za-z0-9][A-Za-z0-9_.\-]*)").unwrap())
}

/// API names announced with `API_KEY_REQUIRED = X` or `API KEY REQUIRED: X`,
/// normalized and deduplicated in order of appearance.
pub fn detect_api_sentinel(reply: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in sentinel_re().captures_iter(reply) {
        let name = normalize_api_name(&c[1]);
        if name != "name_of_api" && !out.contains(&name) {
            out.push(name);
        }
    }
    out
}

/// Writer prompt for a tool that needs `docs` and an API key.
pub fn augment_with_docs(spec: &ToolSpec, docs: &ApiDocBundle, key_available: bool, endpoint_hint: Option<&str>) -> String {
    let api = &docs.api_name;
    let mut out = format!("Tool name: {}\nTool description: {}\n\n", spec.name, spec.description);
    if key_available {
        out.push_str(&format!(
            "An API key for `{api}` is available. Never write the key itself and do not make it a function parameter: \
             use the literal placeholder `<<API_KEY:{api}>>` wherever the key is needed, for example \
             api_key = \"<<API_KEY:{api}>>\". It is replaced with the real key when the code runs.\n"
        ));
    } else {
        out.push_str(&format!(
            "No API key for `{api}` is available. Write the tool so it needs no key if possible.\n"
        ));
    }
    if let Some(hint) = endpoint_hint {
        out.push_str(hint);
        out.push('\n');
    }
    out.push('\n');
    if docs.is_empty() {
        out.push_str(&format!("Documentation retrieval for `{api}` returned nothing"));
        if !docs.notes.is_empty() {
            out.push_str(&format!(" ({})", docs.notes.join("; ")));
        }
        out.push_str(". Rely on your own knowledge of the API.\n");
    } else {
        out.push_str(&format!("Current documentation for `{api}`:\n"));
        if !docs.snippets.is_empty() {
            out.push_str("\nSearch results:\n");
            for s in &docs.snippets {
                out.push_str(&format!("- {} ({}): {}\n", s.title, s.link, s.snippet));
            }
        }
        for page in &docs.fetched_pages {
            out.push_str(&format!("\nPage {}:\n{}\n", page.url, page.extracted_text));
        }
    }
    out.push_str("\nNow write the complete tool following all guidelines.");
    out
}

fn initial_request(spec: &ToolSpec) -> String {
    format!("Tool name: {}\nTool description: {}", spec.name, spec.description)
}

/// The executable unit of a writer reply: every Python (or untagged) fenced
/// block, in order. The last such block is expected to hold the tool.
pub fn executable_unit(reply: &str) -> Option<String> {
    let text = strip_terminate(reply);
    let blocks: Vec<_> = code_blocks(&text)
        .into_iter()
        .filter(|b| matches!(b.lang.as_str(), "python" | "py" | "python3" | "") && !b.body.trim().is_empty())
        .collect();
    if blocks.is_empty() {
        return None;
    }
    Some(blocks.iter().map(|b| b.body.as_str()).collect::<Vec<_>>().join("\n"))
}

fn outcome_feedback(outcome: &ExecutionOutcome) -> String {
    let code = outcome.exit_code.map_or("none".to_string(), |c| c.to_string());
    let mut msg = format!("Execution {} (exit code {code}).\n", outcome.status.as_str());
    if !outcome.stderr.trim().is_empty() {
        msg.push_str(&format!("stderr:\n{}\n", excerpt(&outcome.stderr, FEEDBACK_EXCERPT)));
    }
    if !outcome.stdout.trim().is_empty() {
        msg.push_str(&format!("stdout:\n{}\n", excerpt(&outcome.stdout, FEEDBACK_EXCERPT)));
    }
    msg.push_str("Fix the error and output the FULL code again.");
    msg
}

struct Loop<'c, 'a> {
    ctx: &'c mut GenerationContext<'a>,
    state: GenerationLoopState,
    keys_handled: Vec<String>,
}

impl Loop<'_, '_> {
    fn iteration_event(&self, draft_hash: Option<String>, status: &str, stderr: &str) {
        self.ctx.trace.record(EventKind::GenerationIteration {
            tool: self.state.spec.name.clone(),
            iteration: self.state.iteration,
            draft_hash,
            outcome_status: status.to_string(),
            stderr_excerpt: excerpt(stderr, TRACE_EXCERPT),
        });
    }

    fn feedback(&mut self, text: String) {
        self.state.transcript.push(ChatMessage::user(text));
        self.state.status = LoopStatus::RepairedRetry;
    }

    /// Obtains keys for `apis` not yet in the vault. Returns false on refusal.
    fn ensure_keys(&mut self, apis: &[String]) -> Result<bool, GenerationError> {
        let missing = self.ctx.vault.missing(apis.iter());
        if missing.is_empty() {
            return Ok(true);
        }
        self.state.status = LoopStatus::AwaitingKeys;
        match self.ctx.gate.request_keys(&self.state.spec.name, &missing, self.ctx.trace)? {
            KeyReview::Rejected => Ok(false),
            KeyReview::Provided(keys) => {
                for k in keys {
                    self.ctx.vault.insert(k);
                }
                Ok(true)
            }
        }
    }

    fn retrieve_docs(&mut self, api: &str) -> Result<Option<ApiDocBundle>, GenerationError> {
        let Some(client) = self.ctx.search else {
            return Ok(Some(ApiDocBundle::empty(api, "no search endpoint configured")));
        };
        let search_api = normalize_api_name(&self.ctx.config.search_api);
        if !self.ctx.vault.contains(&search_api) && !self.ensure_keys(std::slice::from_ref(&search_api))? {
            return Ok(None);
        }
        let query = docs_query(api);
        let mut reprompted = false;
        loop {
            let key = self.ctx.vault.get(&search_api).expect("key ensured").clone();
            let url = client.redacted_url(&query, &key);
            match client.search(&query, &key) {
                Ok(results) => {
                    let bundle = client.fetch_pages(api, &results, self.ctx.config.fetch_limits);
                    self.record_docs(api, Some(url), &bundle);
                    return Ok(Some(bundle));
                }
                Err(e) if e.is_auth() && !reprompted => {
                    reprompted = true;
                    self.ctx.trace.record(EventKind::Warning {
                        message: format!("search rejected the {search_api} key; asking again"),
                    });
                    self.ctx.vault.remove(&search_api);
                    if !self.ensure_keys(std::slice::from_ref(&search_api))? {
                        return Ok(None);
                    }
                }
                Err(e) => {
                    let bundle = ApiDocBundle::empty(api, e.to_string());
                    self.record_docs(api, Some(url), &bundle);
                    return Ok(Some(bundle));
                }
            }
        }
    }

    fn record_docs(&self, api: &str, url: Option<String>, bundle: &ApiDocBundle) {
        self.ctx.trace.record(EventKind::DocsRetrieved {
            api: api.to_string(),
            query_url: url,
            snippets: bundle.snippets.len(),
            pages: bundle.fetched_pages.len(),
            notes: bundle.notes.clone(),
        });
    }

    /// Handles an API sentinel. Returns false if the human refused keys.
    fn handle_sentinel(&mut self, apis: Vec<String>) -> Result<bool, GenerationError> {
        self.ctx.trace.record(EventKind::ApiKeysNeeded {
            tool: self.state.spec.name.clone(),
            apis: apis.clone(),
        });
        self.state.api_needed = apis.clone();
        if !self.ensure_keys(&apis)? {
            return Ok(false);
        }
        let mut prompt = String::new();
        for api in &apis {
            let Some(bundle) = self.retrieve_docs(api)? else {
                return Ok(false);
            };
            let hint = (normalize_api_name(&self.ctx.config.search_api) == *api).then_some(
                "Send search requests to the base URL in the TOOLSMITH_SEARCH_ENDPOINT environment variable \
                 (GET <base>/search?q=...&api_key=...), falling back to https://serpapi.com when it is unset.",
            );
            if !prompt.is_empty() {
                prompt.push_str("\n\n");
            }
            prompt.push_str(&augment_with_docs(&self.state.spec, &bundle, true, hint));
        }
        self.keys_handled.extend(apis);
        self.state.transcript.push(ChatMessage::user(prompt));
        Ok(true)
    }

    fn run(mut self) -> Result<GenerationOutcome, GenerationError> {
        let max = self.ctx.config.max_iterations;
        let mut last_error = String::from("no draft produced");
        while self.state.iteration < max {
            self.state.iteration += 1;
            self.state.status = LoopStatus::Drafting;
            let exchange = self
                .ctx
                .provider
                .complete(Stage::CodeWriter, &self.state.transcript, None)?;
            let reply = exchange.reply.content;
            self.state.transcript.push(ChatMessage::assistant(reply.clone()));

            let apis: Vec<String> = detect_api_sentinel(&reply)
                .into_iter()
                .filter(|a| !self.keys_handled.contains(a))
                .collect();
            let unit = executable_unit(&reply);
            if !apis.is_empty() && unit.as_deref().is_none_or(|u| public_functions(u).is_empty()) {
                self.iteration_event(None, "api_key_required", "");
                if !self.handle_sentinel(apis)? {
                    self.state.status = LoopStatus::Rejected;
                    return Ok(GenerationOutcome::Rejected {
                        iterations: self.state.iteration,
                    });
                }
                continue;
            }
            let Some(unit) = unit else {
                last_error = "reply contained no fenced Python code".into();
                self.iteration_event(None, "no_code", "");
                self.feedback("Your reply contained no fenced Python code block. Output the FULL code.".into());
                continue;
            };

            self.state.status = LoopStatus::AwaitingApproval;
            let approved = match self.ctx.gate.review_code(&self.state.spec.name, &unit, self.ctx.trace)? {
                CodeReview::Approved(a) => a,
                CodeReview::Rejected => {
                    self.iteration_event(Some(source_hash(&unit)), "rejected", "");
                    self.state.status = LoopStatus::Rejected;
                    return Ok(GenerationOutcome::Rejected {
                        iterations: self.state.iteration,
                    });
                }
            };
            match self.attempt(&approved)? {
                Attempt::Registered(record) => {
                    self.state.status = LoopStatus::Succeeded;
                    return Ok(GenerationOutcome::Succeeded {
                        record,
                        iterations: self.state.iteration,
                    });
                }
                Attempt::KeysRefused => {
                    self.state.status = LoopStatus::Rejected;
                    return Ok(GenerationOutcome::Rejected {
                        iterations: self.state.iteration,
                    });
                }
                Attempt::Retry(err) => last_error = err,
            }
        }
        self.state.status = LoopStatus::Exhausted;
        Ok(GenerationOutcome::Exhausted {
            iterations: self.state.iteration,
            last_error,
        })
    }

    fn attempt(&mut self, approved: &ApprovedSource) -> Result<Attempt, GenerationError> {
        let hash = Some(approved.hash().to_string());
        let source = approved.source();
        let defs = public_functions(source);
        let wanted = placeholder_names(source);
        if !self.ensure_keys(&wanted)? {
            return Ok(Attempt::KeysRefused);
        }
        self.state.status = LoopStatus::Executing;
        let result = if defs.is_empty() {
            self.ctx.sandbox.bootstrap_environment(approved, self.ctx.vault)
        } else {
            self.ctx.sandbox.execute(approved, self.ctx.vault)
        };
        let outcome = match result {
            Ok(o) => o,
            Err(SandboxError::Policy(msg)) => {
                self.iteration_event(hash, "policy_error", &msg);
                self.feedback(format!("The environment refused to run this code: {msg}"));
                return Ok(Attempt::Retry(msg));
            }
            Err(e) => return Err(e.into()),
        };
        self.state.last_outcome = Some(outcome.clone());

        if !outcome.succeeded() {
            self.iteration_event(hash, outcome.status.as_str(), &outcome.stderr);
            self.feedback(outcome_feedback(&outcome));
            return Ok(Attempt::Retry(excerpt(&outcome.stderr, TRACE_EXCERPT)));
        }
        if defs.is_empty() {
            self.iteration_event(hash, "installed", &outcome.stderr);
            self.feedback(format!(
                "The package setup ran successfully:\n{}\nNow output the FULL code including the tool function.",
                excerpt(&outcome.stdout, FEEDBACK_EXCERPT)
            ));
            return Ok(Attempt::Retry("draft defined no function".into()));
        }
        if outcome.stdout.trim().is_empty() {
            let msg = "The code ran but printed nothing. Call the function with meaningful data and print the result.";
            self.iteration_event(hash, "no_output", &outcome.stderr);
            self.feedback(msg.into());
            return Ok(Attempt::Retry(msg.into()));
        }

        let problem = if defs.len() != 1 {
            Some(format!(
                "The code must define exactly one public function (prefix helpers with _), found: {}.",
                defs.join(", ")
            ))
        } else if !is_valid_function_name(&defs[0]) {
            Some(format!("Rename the function {} to lowercase snake_case.", defs[0]))
        } else {
            None
        };
        if let Some(msg) = problem {
            self.iteration_event(hash, "validation_failed", &msg);
            self.feedback(msg.clone());
            return Ok(Attempt::Retry(msg));
        }
        let schema = match harness::extract_schema(self.ctx.sandbox, approved, self.ctx.vault, &defs[0]) {
            Ok(s) => s,
            Err(e @ (HarnessError::Rejected { .. } | HarnessError::Crash { .. } | HarnessError::BadSchema(_))) => {
                let msg = format!("The tool could not be validated: {}", e.feedback());
                self.iteration_event(hash, "validation_failed", &msg);
                self.feedback(format!("{msg}\nFix it and output the FULL code again."));
                return Ok(Attempt::Retry(msg));
            }
            Err(HarnessError::Sandbox(e)) => return Err(e.into()),
        };

        let mut api_requirements = wanted;
        for a in &self.keys_handled {
            if !api_requirements.contains(a) {
                api_requirements.push(a.clone());
            }
        }
        api_requirements.sort();
        let record = ToolRecord {
            name: self.state.spec.name.clone(),
            description: self.state.spec.description.clone(),
            function_name: defs[0].clone(),
            source: source.to_string(),
            schema,
            created_at: Utc::now(),
            api_requirements,
            disabled: false,
        };
        let stored = match self.ctx.registry.register(record, &self.ctx.vault.secrets()) {
            Ok(r) => r,
            Err(RegistryError::Invalid(msg)) => {
                self.iteration_event(hash, "validation_failed", &msg);
                self.feedback(format!("The tool was rejected: {msg}"));
                return Ok(Attempt::Retry(msg));
            }
            Err(e) => return Err(e.into()),
        };
        self.iteration_event(hash, "succeeded", "");
        self.ctx.trace.record(EventKind::ToolRegistered {
            name: stored.name.clone(),
            function_name: stored.function_name.clone(),
        });
        Ok(Attempt::Registered(stored))
    }
}

enum Attempt {
    Registered(ToolRecord),
    KeysRefused,
    Retry(String),
}

/// Runs the loop for `spec` until a validated tool is registered, the human
/// rejects, or the iteration budget runs out.
pub fn generate_tool(spec: &ToolSpec, ctx: &mut GenerationContext<'_>) -> Result<GenerationOutcome, GenerationError> {
    ctx.trace.record(EventKind::GenerationStarted { tool: spec.name.clone() });
    let transcript = vec![
        ChatMessage::system(ctx.prompts.code_writer.clone()),
        ChatMessage::user(initial_request(spec)),
    ];
    let lp = Loop {
        ctx,
        state: GenerationLoopState {
            spec: spec.clone(),
            iteration: 0,
            transcript,
            last_outcome: None,
            api_needed: Vec::new(),
            status: LoopStatus::Drafting,
        },
        keys_handled: Vec::new(),
    };
    let trace = lp.ctx.trace;
    let outcome = lp.run()?;
    let (status, iterations) = match &outcome {
        GenerationOutcome::Succeeded { iterations, .. } => ("succeeded", *iterations),
        GenerationOutcome::Exhausted { iterations, .. } => ("exhausted", *iterations),
        GenerationOutcome::Rejected { iterations } => ("rejected", *iterations),
    };
    trace.record(EventKind::GenerationFinished {
        tool: spec.name.clone(),
        status: status.into(),
        iterations,
    });
    Ok(outcome)
}
