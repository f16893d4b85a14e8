//! Subprocess execution of approved Python sources inside a per-session
//! workspace.
//!
//! Each run gets a scrubbed environment, its own process group (so a timeout
//! reaps the whole tree), capped output capture, and a before/after scan of
//! the workspace for artifacts. Secrets are substituted into the script file
//! only, and that file is zero-filled and removed once the run ends.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;
use zeroize::Zeroizing;

use crate::approval::ApprovedSource;
use crate::gateway::redact_text;
use crate::trace::{EventKind, ExecPurpose, TraceLog};
use crate::vault::{Secret, SecretVault};

/// Directory inside the workspace holding scripts the sandbox writes itself.
pub const INTERNAL_DIR: &str = ".toolsmith";
pub const PYTHON_ENV_VAR: &str = "TOOLSMITH_PYTHON";
const ENV_ALLOWLIST: [&str; 4] = ["PATH", "LANG", "LC_ALL", "TZ"];
/// Stands in for the absolute workspace path in captured output, so output
/// does not depend on where the run directory lives.
pub const WORKSPACE_MARKER: &str = "<workspace>";
const DEAD_PROXY: &str = "http://127.0.0.1:9";
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPolicy {
    #[default]
    Allowed,
    Denied,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxPolicy {
    pub timeout: Duration,
    pub max_output_bytes: usize,
    pub network: NetworkPolicy,
    pub allow_package_install: bool,
    /// Explicit interpreter; otherwise `TOOLSMITH_PYTHON`, then `PATH`.
    pub interpreter: Option<PathBuf>,
    /// Extra variables passed to every run.
    pub env: BTreeMap<String, String>,
}

impl Default for SandboxPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            max_output_bytes: 1 << 20,
            network: NetworkPolicy::Allowed,
            allow_package_install: true,
            interpreter: None,
            env: BTreeMap::new(),
        }
    }
}

impl SandboxPolicy {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.timeout.is_zero() {
            return Err(SandboxError::Policy("timeout must be positive".into()));
        }
        if self.max_output_bytes == 0 {
            return Err(SandboxError::Policy("max_output_bytes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Succeeded,
    Failed,
    TimedOut,
    OutputTruncated,
}

impl ExecutionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionStatus::Succeeded => "succeeded",
            ExecutionStatus::Failed => "failed",
            ExecutionStatus::TimedOut => "timed_out",
            ExecutionStatus::OutputTruncated => "output_truncated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecutionStatus,
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    #[serde(with = "secs_f64")]
    pub duration: Duration,
    pub artifacts: Vec<PathBuf>,
    /// Whether either stream hit the output cap.
    pub truncated: bool,
}

impl ExecutionOutcome {
    pub fn succeeded(&self) -> bool {
        self.status == ExecutionStatus::Succeeded
    }

    fn noop() -> Self {
        Self {
            status: ExecutionStatus::Succeeded,
            exit_code: Some(0),
            stdout: String::new(),
            stderr: String::new(),
            duration: Duration::ZERO,
            artifacts: Vec::new(),
            truncated: false,
        }
    }
}

mod secs_f64 {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("python interpreter not found: {0}")]
    InterpreterNotFound(String),
    #[error("policy: {0}")]
    Policy(String),
    #[error("missing secrets for API(s): {}", .0.join(", "))]
    MissingSecrets(Vec<String>),
    #[error("approved source failed its integrity check")]
    Unapproved,
    #[error("sandbox io: {0}")]
    Io(#[from] std::io::Error),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<<API_KEY:([A-Za-z0-9_.\-]+)>>").unwrap())
}

/// API names referenced by placeholders, normalized, sorted and deduplicated.
pub fn placeholder_names(source: &str) -> Vec<String> {
    let mut names: Vec<String> = placeholder_re()
        .captures_iter(source)
        .map(|c| crate::vault::normalize_api_name(&c[1]))
        .collect();
    names.sort();
    names.dedup();
    names
}

/// Replaces every `<<API_KEY:NAME>>` with the stored secret.
pub fn inject_secrets(source: &str, vault: &SecretVault) -> Result<Zeroizing<String>, SandboxError> {
    let names = placeholder_names(source);
    let missing = vault.missing(names.iter());
    if !missing.is_empty() {
        return Err(SandboxError::MissingSecrets(missing));
    }
    let out = placeholder_re().replace_all(source, |c: &regex::Captures<'_>| {
        vault.get(&c[1]).expect("checked above").expose().to_string()
    });
    Ok(Zeroizing::new(out.into_owned()))
}

fn is_executable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    path.metadata()
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

/// Locates the interpreter: explicit path, then `TOOLSMITH_PYTHON`, then
/// `python3`/`python` on `PATH`.
pub fn find_interpreter(configured: Option<&Path>) -> Result<PathBuf, SandboxError> {
    if let Some(p) = configured {
        return if is_executable(p) {
            Ok(p.to_path_buf())
        } else {
            Err(SandboxError::InterpreterNotFound(p.display().to_string()))
        };
    }
    if let Some(p) = std::env::var_os(PYTHON_ENV_VAR).filter(|v| !v.is_empty()) {
        let p = PathBuf::from(p);
        return if is_executable(&p) {
            Ok(p)
        } else {
            Err(SandboxError::InterpreterNotFound(format!("{PYTHON_ENV_VAR}={}", p.display())))
        };
    }
    let path = std::env::var_os("PATH").unwrap_or_default();
    for dir in std::env::split_paths(&path) {
        for name in ["python3", "python"] {
            let candidate = dir.join(name);
            if is_executable(&candidate) {
                return Ok(candidate);
            }
        }
    }
    Err(SandboxError::InterpreterNotFound("no python3 or python on PATH".into()))
}

fn in_virtualenv(interpreter: &Path) -> bool {
    interpreter
        .parent()
        .and_then(Path::parent)
        .is_some_and(|root| root.join("pyvenv.cfg").is_file())
}

/// Overwrites a file with zeros before unlinking it.
pub fn shred(path: &Path) -> std::io::Result<()> {
    let len = match fs::metadata(path) {
        Ok(m) => m.len(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    {
        let mut f = fs::OpenOptions::new().write(true).open(path)?;
        let zeros = vec![0u8; 8192];
        let mut left = len;
        while left > 0 {
            let n = left.min(zeros.len() as u64) as usize;
            f.write_all(&zeros[..n])?;
            left -= n as u64;
        }
        f.sync_all()?;
    }
    fs::remove_file(path)
}

/// Truncates to at most `cap` bytes without splitting a UTF-8 sequence.
fn capped_text(bytes: &[u8], cap: usize) -> String {
    let slice = &bytes[..bytes.len().min(cap)];
    let slice = match std::str::from_utf8(slice) {
        Err(e) if e.error_len().is_none() => &slice[..e.valid_up_to()],
        _ => slice,
    };
    let mut text = String::from_utf8_lossy(slice).into_owned();
    if text.len() > cap {
        let mut end = cap;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        text.truncate(end);
    }
    text
}

/// Redacts secrets, applies the cap, and drops a trailing partial secret the
/// cap may have cut through.
fn scrubbed(raw: &[u8], cap: usize, secrets: &[Secret]) -> String {
    let redacted = redact_text(&String::from_utf8_lossy(raw), secrets);
    let mut text = capped_text(redacted.as_bytes(), cap);
    for s in secrets {
        let value = s.expose();
        for k in (4..value.len()).rev() {
            if value.is_char_boundary(k) && text.ends_with(&value[..k]) {
                text.truncate(text.len() - k);
                break;
            }
        }
    }
    text
}

fn spawn_reader<R: Read + Send + 'static>(
    mut stream: R,
    cap: usize,
    overflow: Arc<AtomicBool>,
) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = (cap + 1).saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    if kept.len() > cap {
                        overflow.store(true, Ordering::SeqCst);
                    }
                }
            }
        }
        kept
    })
}

fn kill_group(pgid: u32) {
    // SAFETY: kill(2) with a negative pid signals the process group we created.
    unsafe {
        libc::kill(-(pgid as libc::pid_t), libc::SIGKILL);
    }
}

type FileStamp = (u64, Option<SystemTime>);

pub struct Sandbox {
    policy: SandboxPolicy,
    interpreter: PathBuf,
    session_dir: PathBuf,
    workspace: PathBuf,
    internal: PathBuf,
    runs: u32,
    trace: Option<Arc<TraceLog>>,
    closed: bool,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("workspace", &self.workspace)
            .field("interpreter", &self.interpreter)
            .finish()
    }
}

impl Sandbox {
    /// Prepares `session_dir/workspace` and resolves the interpreter.
    pub fn new(policy: SandboxPolicy, session_dir: &Path) -> Result<Self, SandboxError> {
        policy.validate()?;
        let interpreter = find_interpreter(policy.interpreter.as_deref())?;
        let workspace = session_dir.join("workspace");
        fs::create_dir_all(workspace.join(INTERNAL_DIR).join("tools"))?;
        let workspace = workspace.canonicalize()?;
        let internal = workspace.join(INTERNAL_DIR);
        fs::create_dir_all(session_dir.join("home"))?;
        fs::create_dir_all(session_dir.join("pyenv"))?;
        Ok(Self {
            policy,
            interpreter,
            session_dir: session_dir.to_path_buf(),
            workspace,
            internal,
            runs: 0,
            trace: None,
            closed: false,
        })
    }

    /// Records execution start/finish events in `trace`.
    pub fn with_trace(mut self, trace: Arc<TraceLog>) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn workspace(&self) -> &Path {
        &self.workspace
    }

    pub fn policy(&self) -> &SandboxPolicy {
        &self.policy
    }

    pub fn interpreter(&self) -> &Path {
        &self.interpreter
    }

    /// Runs an approved script with secrets substituted.
    pub fn execute(&mut self, approved: &ApprovedSource, vault: &SecretVault) -> Result<ExecutionOutcome, SandboxError> {
        self.execute_as(approved, vault, ExecPurpose::Draft)
    }

    /// Runs an approved dependency-install script. Blank scripts succeed
    /// without starting the interpreter.
    pub fn bootstrap_environment(
        &mut self,
        approved: &ApprovedSource,
        vault: &SecretVault,
    ) -> Result<ExecutionOutcome, SandboxError> {
        if !self.policy.allow_package_install {
            return Err(SandboxError::Policy(
                "package installation is disabled; run offline with the required packages preinstalled".into(),
            ));
        }
        if self.policy.network == NetworkPolicy::Denied {
            return Err(SandboxError::Policy(
                "package installation needs network access, which is denied; run offline with the required packages preinstalled".into(),
            ));
        }
        let blank = approved
            .source()
            .lines()
            .all(|l| l.trim().is_empty() || l.trim_start().starts_with('#'));
        if blank {
            return Ok(ExecutionOutcome::noop());
        }
        self.execute_as(approved, vault, ExecPurpose::Install)
    }

    fn execute_as(
        &mut self,
        approved: &ApprovedSource,
        vault: &SecretVault,
        purpose: ExecPurpose,
    ) -> Result<ExecutionOutcome, SandboxError> {
        if !approved.verify() {
            return Err(SandboxError::Unapproved);
        }
        let injected = inject_secrets(approved.source(), vault)?;
        self.runs += 1;
        let script = self.internal.join(format!("run_{}.py", self.runs));
        fs::write(&script, injected.as_bytes())?;
        if let Some(trace) = &self.trace {
            trace.record(EventKind::ExecutionStarted {
                source_hash: approved.hash().to_string(),
                purpose,
            });
        }
        let result = self.run(vec![script.clone().into_os_string()], None, vault);
        let shredded = shred(&script);
        let outcome = result?;
        shredded?;
        if let Some(trace) = &self.trace {
            trace.record(EventKind::ExecutionFinished {
                source_hash: approved.hash().to_string(),
                status: outcome.status,
                exit_code: outcome.exit_code,
                duration_ms: outcome.duration.as_millis() as u64,
                stderr_excerpt: excerpt(&outcome.stderr, 2000),
            });
        }
        Ok(outcome)
    }

    /// Runs `runner` (e.g. the harness) against a secret-injected copy of an
    /// approved module. The module path is appended after `--module`.
    pub(crate) fn run_with_module(
        &mut self,
        runner_name: &str,
        runner_source: &str,
        module: &ApprovedSource,
        vault: &SecretVault,
        args: &[&str],
        stdin: &[u8],
    ) -> Result<ExecutionOutcome, SandboxError> {
        if !module.verify() {
            return Err(SandboxError::Unapproved);
        }
        let injected = inject_secrets(module.source(), vault)?;
        let runner = self.internal.join(runner_name);
        if fs::read_to_string(&runner).ok().as_deref() != Some(runner_source) {
            fs::write(&runner, runner_source)?;
        }
        self.runs += 1;
        let module_path = self.internal.join("tools").join(format!("module_{}.py", self.runs));
        fs::write(&module_path, injected.as_bytes())?;
        let mut argv: Vec<OsString> = vec![runner.into_os_string()];
        argv.extend(args.iter().map(OsString::from));
        argv.push("--module".into());
        argv.push(module_path.clone().into_os_string());
        let result = self.run(argv, Some(stdin.to_vec()), vault);
        let shredded = shred(&module_path);
        let outcome = result?;
        shredded?;
        Ok(outcome)
    }

    fn command(&self, args: Vec<OsString>) -> Command {
        let mut cmd = Command::new(&self.interpreter);
        cmd.args(args)
            .current_dir(&self.workspace)
            .env_clear()
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        for key in ENV_ALLOWLIST {
            if let Some(v) = std::env::var_os(key) {
                cmd.env(key, v);
            }
        }
        let pyenv = self.session_dir.join("pyenv");
        let path = std::env::var_os("PATH").unwrap_or_default();
        let mut dirs = vec![pyenv.join("bin")];
        dirs.extend(std::env::split_paths(&path));
        if let Ok(joined) = std::env::join_paths(dirs) {
            cmd.env("PATH", joined);
        }
        cmd.env("HOME", self.session_dir.join("home"))
            .env("PYTHONUSERBASE", &pyenv)
            .env("PIP_DISABLE_PIP_VERSION_CHECK", "1")
            .env("PYTHONUNBUFFERED", "1")
            .env("PYTHONIOENCODING", "utf-8")
            .env("PYTHONDONTWRITEBYTECODE", "1");
        if !in_virtualenv(&self.interpreter) {
            cmd.env("PIP_USER", "1");
        }
        if self.policy.network == NetworkPolicy::Denied {
            for key in ["HTTP_PROXY", "HTTPS_PROXY", "http_proxy", "https_proxy", "ALL_PROXY", "all_proxy"] {
                cmd.env(key, DEAD_PROXY);
            }
            cmd.env("NO_PROXY", "").env("no_proxy", "").env("PIP_NO_INDEX", "1");
        }
        cmd.envs(&self.policy.env);
        cmd
    }

    fn run(&mut self, args: Vec<OsString>, stdin: Option<Vec<u8>>, vault: &SecretVault) -> Result<ExecutionOutcome, SandboxError> {
        let before = self.scan();
        let cap = self.policy.max_output_bytes;
        let started = Instant::now();
        let mut child = self.command(args).spawn().map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => SandboxError::InterpreterNotFound(self.interpreter.display().to_string()),
            _ => SandboxError::Io(e),
        })?;
        let pgid = child.id();
        let overflow = Arc::new(AtomicBool::new(false));
        let out_reader = spawn_reader(child.stdout.take().expect("piped"), cap, overflow.clone());
        let err_reader = spawn_reader(child.stderr.take().expect("piped"), cap, overflow.clone());
        let mut stdin_pipe = child.stdin.take();
        let writer = thread::spawn(move || {
            if let (Some(pipe), Some(data)) = (stdin_pipe.as_mut(), stdin) {
                let _ = pipe.write_all(&data);
            }
            drop(stdin_pipe);
        });

        let deadline = started + self.policy.timeout;
        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                timed_out = true;
                kill_group(pgid);
                break child.wait()?;
            }
            if overflow.load(Ordering::SeqCst) {
                kill_group(pgid);
                break child.wait()?;
            }
            thread::sleep(POLL);
        };
        // Reap anything the script left running so the pipes close.
        kill_group(pgid);
        let duration = started.elapsed();
        let _ = writer.join();
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        let truncated = stdout.len() > cap || stderr.len() > cap;
        let secrets = vault.secrets();
        let ws = self.workspace.display().to_string();
        let stdout = scrubbed(&stdout, cap, &secrets).replace(&ws, WORKSPACE_MARKER);
        let stderr = scrubbed(&stderr, cap, &secrets).replace(&ws, WORKSPACE_MARKER);
        let exit_code = status.code();
        let status = if timed_out {
            ExecutionStatus::TimedOut
        } else if truncated {
            ExecutionStatus::OutputTruncated
        } else if exit_code == Some(0) {
            ExecutionStatus::Succeeded
        } else {
            ExecutionStatus::Failed
        };
        let artifacts = self.artifacts(&before);
        Ok(ExecutionOutcome {
            status,
            exit_code,
            stdout,
            stderr,
            duration,
            artifacts,
            truncated,
        })
    }

    fn scan(&self) -> HashMap<PathBuf, FileStamp> {
        let mut out = HashMap::new();
        let walker = WalkDir::new(&self.workspace).follow_links(false).into_iter().filter_entry(|e| {
            let name = e.file_name().to_string_lossy();
            !(e.depth() == 1 && name == INTERNAL_DIR) && name != "__pycache__"
        });
        for entry in walker.flatten() {
            if entry.file_type().is_dir() {
                continue;
            }
            let stamp = entry
                .metadata()
                .map(|m| (m.len(), m.modified().ok()))
                .unwrap_or((0, None));
            out.insert(entry.path().to_path_buf(), stamp);
        }
        out
    }

    /// Regular files created or modified since `before` whose canonical
    /// location is inside the workspace.
    fn artifacts(&self, before: &HashMap<PathBuf, FileStamp>) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = self
            .scan()
            .into_iter()
            .filter(|(path, stamp)| before.get(path) != Some(stamp))
            .filter_map(|(path, _)| match path.canonicalize() {
                Ok(real) if real.starts_with(&self.workspace) && real.is_file() => Some(real),
                _ => {
                    tracing::warn!(path = %path.display(), "ignoring artifact that is not a workspace file");
                    None
                }
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Shreds every file the sandbox wrote itself. Idempotent.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        for entry in WalkDir::new(&self.internal).into_iter().flatten() {
            if entry.file_type().is_file() {
                if let Err(e) = shred(entry.path()) {
                    tracing::warn!(path = %entry.path().display(), error = %e, "shred failed");
                }
            }
        }
        let _ = fs::remove_dir_all(&self.internal);
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        self.close();
    }
}

/// The last `max` bytes of `text`, on a character boundary.
pub fn excerpt(text: &str, max: usize) -> String {
    if text.len() <= max {
        return text.to_string();
    }
    let mut start = text.len() - max;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    text[start..].to_string()
}
