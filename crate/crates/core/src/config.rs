//! Runtime configuration, loaded from a JSON file and overridable by flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{PricingTable, ProviderConfig};
use crate::generator::GeneratorConfig;
use crate::retrieval::FetchLimits;
use crate::sandbox::{NetworkPolicy, SandboxPolicy};
use crate::solver::SolverConfig;

/// Environment variable carrying the search endpoint into generated tools.
pub const SEARCH_ENDPOINT_ENV: &str = "TOOLSMITH_SEARCH_ENDPOINT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub timeout_secs: u64,
    pub max_output_bytes: usize,
    pub network: NetworkPolicy,
    pub allow_package_install: bool,
    pub interpreter: Option<PathBuf>,
    pub env: BTreeMap<String, String>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        let p = SandboxPolicy::default();
        Self {
            timeout_secs: p.timeout.as_secs(),
            max_output_bytes: p.max_output_bytes,
            network: p.network,
            allow_package_install: p.allow_package_install,
            interpreter: None,
            env: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub max_iterations: u32,
    pub max_steps: u32,
    /// Tool Master results above this count produce a warning.
    pub tool_count_warning: usize,
    pub result_cap_bytes: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            max_steps: 10,
            tool_count_warning: 8,
            result_cap_bytes: 16 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub endpoint: Option<String>,
    /// API whose key authorizes searches.
    pub api_name: String,
    #[serde(flatten)]
    pub limits: FetchLimits,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_name: "serpapi".into(),
            limits: FetchLimits::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub provider: Option<ProviderConfig>,
    pub pricing: PricingTable,
    pub sandbox: SandboxConfig,
    pub budgets: Budgets,
    pub registry_path: PathBuf,
    pub runs_dir: PathBuf,
    pub search: SearchConfig,
    pub auto_approve: bool,
    pub continue_on_exhausted: bool,
    /// Seconds to wait for a human decision; unset waits indefinitely.
    pub approval_timeout_secs: Option<u64>,
    /// Directory of replacement prompt templates.
    pub prompts_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            provider: None,
            pricing: PricingTable::default(),
            sandbox: SandboxConfig::default(),
            budgets: Budgets::default(),
            registry_path: PathBuf::from("tools"),
            runs_dir: PathBuf::from("runs"),
            search: SearchConfig::default(),
            auto_approve: false,
            continue_on_exhausted: false,
            approval_timeout_secs: None,
            prompts_dir: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Config = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.sandbox.timeout_secs == 0 {
            return invalid("sandbox.timeout_secs must be positive");
        }
        if self.sandbox.max_output_bytes == 0 {
            return invalid("sandbox.max_output_bytes must be positive");
        }
        if self.budgets.max_iterations == 0 {
            return invalid("budgets.max_iterations must be at least 1");
        }
        if self.budgets.max_steps == 0 {
            return invalid("budgets.max_steps must be at least 1");
        }
        self.pricing
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("pricing: {e}")))?;
        Ok(())
    }

    pub fn sandbox_policy(&self) -> SandboxPolicy {
        let mut env = self.sandbox.env.clone();
        if let Some(endpoint) = &self.search.endpoint {
            env.entry(SEARCH_ENDPOINT_ENV.to_string()).or_insert_with(|| endpoint.clone());
        }
        SandboxPolicy {
            timeout: Duration::from_secs(self.sandbox.timeout_secs),
            max_output_bytes: self.sandbox.max_output_bytes,
            network: self.sandbox.network,
            allow_package_install: self.sandbox.allow_package_install,
            interpreter: self.sandbox.interpreter.clone(),
            env,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            max_iterations: self.budgets.max_iterations,
            fetch_limits: self.search.limits,
            search_api: self.search.api_name.clone(),
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            max_steps: self.budgets.max_steps,
            result_cap: self.budgets.result_cap_bytes,
        }
    }

    pub fn approval_timeout(&self) -> Option<Duration> {
        self.approval_timeout_secs.map(Duration::from_secs)
    }
}
