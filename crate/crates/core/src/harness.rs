//! Schema extraction and JSON invocation of generated tool functions, via
//! the bundled Python harness run inside the sandbox.

use serde::Deserialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::approval::ApprovedSource;
use crate::sandbox::{excerpt, ExecutionOutcome, ExecutionStatus, Sandbox, SandboxError};
use crate::schema::CallSchema;
use crate::vault::SecretVault;

pub const HARNESS_SOURCE: &str = include_str!("../harness/harness.py");
const HARNESS_FILE: &str = "harness.py";

#[derive(Debug, Error)]
pub enum HarnessError {
    /// The harness answered with a structured error, e.g. `VARIADIC_PARAM`
    /// or an exception raised by the tool.
    #[error("{code}: {message}")]
    Rejected {
        code: String,
        message: String,
        traceback: String,
    },
    /// The harness process did not produce a protocol response.
    #[error("harness {status}: {stderr}")]
    Crash { status: &'static str, stderr: String },
    #[error("schema returned by harness is invalid: {0}")]
    BadSchema(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

impl HarnessError {
    pub fn code(&self) -> Option<&str> {
        match self {
            HarnessError::Rejected { code, .. } => Some(code),
            _ => None,
        }
    }

    /// Text suitable as repair feedback for the code writer.
    pub fn feedback(&self) -> String {
        match self {
            HarnessError::Rejected {
                code,
                message,
                traceback,
            } if !traceback.is_empty() => format!("{code}: {message}\n{}", excerpt(traceback, 2000)),
            other => other.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct Response {
    ok: bool,
    #[serde(default)]
    result: Value,
    #[serde(default)]
    error: Option<ErrorBody>,
}

#[derive(Deserialize)]
struct ErrorBody {
    #[serde(rename = "type")]
    code: String,
    message: String,
    #[serde(default)]
    traceback_excerpt: String,
}

/// Result of invoking a tool function.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub value: Value,
    /// Whatever the tool printed (redirected to stderr by the harness).
    pub log: String,
    pub artifacts: Vec<std::path::PathBuf>,
}

fn call(
    sandbox: &mut Sandbox,
    module: &ApprovedSource,
    vault: &SecretVault,
    mode: &str,
    function: &str,
    stdin: &[u8],
) -> Result<(Value, ExecutionOutcome), HarnessError> {
    let outcome = sandbox.run_with_module(
        HARNESS_FILE,
        HARNESS_SOURCE,
        module,
        vault,
        &["--mode", mode, "--function", function],
        stdin,
    )?;
    let line = outcome.stdout.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    let response: Response = match serde_json::from_str(line) {
        Ok(r) if outcome.status != ExecutionStatus::TimedOut => r,
        _ => {
            return Err(HarnessError::Crash {
                status: outcome.status.as_str(),
                stderr: excerpt(&outcome.stderr, 2000),
            })
        }
    };
    if response.ok {
        return Ok((response.result, outcome));
    }
    let err = response.error.unwrap_or(ErrorBody {
        code: "UNKNOWN".into(),
        message: "harness reported failure without detail".into(),
        traceback_excerpt: String::new(),
    });
    Err(HarnessError::Rejected {
        code: err.code,
        message: err.message,
        traceback: err.traceback_excerpt,
    })
}

/// Extracts the function-calling schema of `function` in `module`.
pub fn extract_schema(
    sandbox: &mut Sandbox,
    module: &ApprovedSource,
    vault: &SecretVault,
    function: &str,
) -> Result<CallSchema, HarnessError> {
    let (value, _) = call(sandbox, module, vault, "schema", function, b"{}")?;
    serde_json::from_value(value).map_err(|e| HarnessError::BadSchema(e.to_string()))
}

/// Calls `function(**args)` and returns its JSON result.
pub fn invoke(
    sandbox: &mut Sandbox,
    module: &ApprovedSource,
    vault: &SecretVault,
    function: &str,
    args: &Map<String, Value>,
) -> Result<Invocation, HarnessError> {
    let request = serde_json::json!({ "args": args });
    let (value, outcome) = call(sandbox, module, vault, "invoke", function, request.to_string().as_bytes())?;
    Ok(Invocation {
        value,
        log: outcome.stderr,
        artifacts: outcome.artifacts,
    })
}
