use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use toolsmith_core::config::{Config, ConfigError};
use toolsmith_core::gateway::ProviderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Live,
    Replay,
}

/// Flags shared by every command that runs sessions.
#[derive(Debug, Clone, Args)]
pub struct SessionFlags {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Tool registry directory.
    #[arg(long, value_name = "PATH")]
    pub registry: Option<PathBuf>,
    /// Directory receiving one subdirectory per session.
    #[arg(long, value_name = "PATH")]
    pub runs_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Fixture file for the replay provider.
    #[arg(long, value_name = "PATH")]
    pub replay_fixture: Option<PathBuf>,
    /// Chat-completions URL for the live provider.
    #[arg(long, value_name = "URL", default_value = "https://api.openai.com/v1/chat/completions")]
    pub endpoint: String,
    /// Environment variable holding the live provider's credential.
    #[arg(long, value_name = "NAME", default_value = "OPENAI_API_KEY")]
    pub credential_env: String,
    /// Base URL of the search API used for documentation retrieval.
    #[arg(long, value_name = "URL")]
    pub search_endpoint: Option<String>,
    /// Approve generated code without review. API key requests still prompt.
    #[arg(long)]
    pub auto_approve: bool,
    /// Keep solving with the remaining tools when a tool cannot be generated.
    #[arg(long)]
    pub continue_on_exhausted: bool,
    #[arg(long, value_name = "N")]
    pub max_iterations: Option<u32>,
    #[arg(long, value_name = "N")]
    pub max_steps: Option<u32>,
    /// Wall-clock limit for each sandboxed execution.
    #[arg(long, value_name = "N")]
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum SettingsError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
}

impl SessionFlags {
    pub fn resolve(&self) -> Result<Config, SettingsError> {
        let mut c = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(r) = &self.registry {
            c.registry_path = r.clone();
        }
        if let Some(r) = &self.runs_dir {
            c.runs_dir = r.clone();
        }
        match (self.provider, &self.replay_fixture) {
            (Some(ProviderKind::Live), Some(_)) => {
                return Err(SettingsError::Usage("--replay-fixture requires --provider replay".into()))
            }
            (Some(ProviderKind::Live), None) => {
                c.provider = Some(ProviderConfig::Live {
                    endpoint: self.endpoint.clone(),
                    credential_env: self.credential_env.clone(),
                })
            }
            (Some(ProviderKind::Replay) | None, Some(path)) => {
                c.provider = Some(ProviderConfig::Replay {
                    fixture_path: path.clone(),
                })
            }
            (Some(ProviderKind::Replay), None) => {
                if !matches!(c.provider, Some(ProviderConfig::Replay { .. })) {
                    return Err(SettingsError::Usage("--provider replay requires --replay-fixture".into()));
                }
            }
            (None, None) => {}
        }
        if let Some(e) = &self.search_endpoint {
            c.search.endpoint = Some(e.clone());
        }
        c.auto_approve |= self.auto_approve;
        c.continue_on_exhausted |= self.continue_on_exhausted;
        if let Some(n) = self.max_iterations {
            c.budgets.max_iterations = n;
        }
        if let Some(n) = self.max_steps {
            c.budgets.max_steps = n;
        }
        if let Some(n) = self.timeout_secs {
            c.sandbox.timeout_secs = n;
        }
        c.validate()?;
        if c.provider.is_none() {
            return Err(SettingsError::Usage(
                "no provider configured: pass --provider or set \"provider\" in --config".into(),
            ));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ServeFlags {
    /// Address to listen on, e.g. 127.0.0.1:8080.
    #[arg(long, value_name = "ADDR")]
    pub bind: SocketAddr,
    /// Serve the web console's static files from this directory.
    #[arg(long, value_name = "PATH")]
    pub static_dir: Option<PathBuf>,
}
