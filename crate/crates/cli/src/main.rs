mod approver;
mod report;
mod server;
mod settings;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use toolsmith_core::approval::{ApprovalBroker, ApprovalDecision, ApprovalPayload};
use toolsmith_core::config::Config;
use toolsmith_core::gateway::{ProviderConfig, ReplayProvider};
use toolsmith_core::orchestrator::Orchestrator;
use toolsmith_core::registry::{Registry, RegistryError};
use toolsmith_core::retrieval::StubServer;
use toolsmith_core::trace;
use toolsmith_core::vault::Secret;

use crate::settings::{ServeFlags, SessionFlags, SettingsError};

#[derive(Parser)]
#[command(name = "toolsmith", version, about = "Build, review and reuse Python tools to solve tasks with an LLM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one task, prompting on the terminal for approvals.
    Run {
        task: String,
        #[command(flatten)]
        flags: SessionFlags,
        /// Print the session report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API used by the web console.
    Serve {
        #[command(flatten)]
        flags: SessionFlags,
        #[command(flatten)]
        serve: ServeFlags,
    },
    /// Inspect the tool registry.
    Tools {
        #[command(subcommand)]
        action: ToolsAction,
        #[arg(long, value_name = "PATH", global = true)]
        registry: Option<PathBuf>,
        #[arg(long, value_name = "PATH", global = true)]
        config: Option<PathBuf>,
    },
    /// Replay a fixture twice and check both traces agree.
    ReplayCheck {
        task: String,
        #[command(flatten)]
        flags: SessionFlags,
    },
    /// Serve canned search results and pages from a directory.
    SearchStub {
        #[arg(long, value_name = "PATH")]
        dir: PathBuf,
        #[arg(long, value_name = "ADDR", default_value = "127.0.0.1:0")]
        bind: SocketAddr,
    },
}

#[derive(Subcommand)]
enum ToolsAction {
    /// List registered tools.
    List,
    /// Print one tool's metadata and source.
    Show { function_name: String },
    /// Report missing files and unregistered scripts.
    Check,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { task, flags, json } => settings(&flags).and_then(|c| run(c, &task, json)),
        Command::Serve { flags, serve } => settings(&flags).and_then(|c| serve_blocking(c, serve)),
        Command::Tools {
            action,
            registry,
            config,
        } => tools(action, registry, config),
        Command::ReplayCheck { task, flags } => settings(&flags).and_then(|c| replay_check(c, &task)),
        Command::SearchStub { dir, bind } => search_stub(&dir, bind),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn settings(flags: &SessionFlags) -> anyhow::Result<Config> {
    match flags.resolve() {
        Ok(c) => Ok(c),
        Err(SettingsError::Usage(msg)) => {
            use clap::CommandFactory;
            Cli::command().error(clap::error::ErrorKind::ArgumentConflict, msg).exit()
        }
        Err(e) => Err(e.into()),
    }
}

fn provider_config(config: &Config) -> &ProviderConfig {
    config.provider.as_ref().expect("settings require a provider")
}

fn run(config: Config, task: &str, json: bool) -> anyhow::Result<ExitCode> {
    let mut provider = provider_config(&config).build(config.pricing.clone())?;
    let broker = ApprovalBroker::new();
    let orch = Orchestrator::new(config, broker.clone())?;
    let approver = approver::TerminalApprover::start(broker.clone());
    let (handle, report) = orch.run_session(task, provider.as_mut())?;
    broker.close();
    drop(approver);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report::render(&report, &handle.run_dir));
    }
    Ok(ExitCode::from(report::exit_code(report.terminal)))
}

fn serve_blocking(config: Config, flags: ServeFlags) -> anyhow::Result<ExitCode> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(server::serve(config, flags))?;
    Ok(ExitCode::SUCCESS)
}

fn open_registry(registry: Option<PathBuf>, config: Option<PathBuf>) -> anyhow::Result<Registry> {
    let path = match (registry, config) {
        (Some(r), _) => r,
        (None, Some(c)) => Config::load(&c)?.registry_path,
        (None, None) => Config::default().registry_path,
    };
    Registry::open(&path).with_context(|| format!("opening registry {}", path.display()))
}

fn tools(action: ToolsAction, registry: Option<PathBuf>, config: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let reg = open_registry(registry, config)?;
    match action {
        ToolsAction::List => {
            for e in reg.snapshot().entries {
                let disabled = reg.fetch(&e.function_name).map(|r| r.disabled).unwrap_or(false);
                let flag = if disabled { " (disabled)" } else { "" };
                println!("{}\t{}{}\t{}", e.function_name, e.name, flag, e.description);
            }
            Ok(ExitCode::SUCCESS)
        }
        ToolsAction::Show { function_name } => match reg.fetch(&function_name) {
            Ok(r) => {
                println!("name: {}", r.name);
                println!("function: {}", r.function_name);
                println!("description: {}", r.description);
                println!("created: {}", r.created_at.to_rfc3339());
                if !r.api_requirements.is_empty() {
                    println!("api keys: {}", r.api_requirements.join(", "));
                }
                if r.disabled {
                    println!("disabled: true");
                }
                println!("schema: {}", serde_json::to_string(&r.schema)?);
                println!("\n{}", r.source);
                Ok(ExitCode::SUCCESS)
            }
            Err(RegistryError::NotFound(_)) => {
                eprintln!("no tool named {function_name}");
                Ok(ExitCode::from(1))
            }
            Err(e) => Err(e.into()),
        },
        ToolsAction::Check => {
            let mut problems = reg.integrity_problems();
            problems.extend(reg.orphans()?.into_iter().map(|p| format!("unregistered script {}", p.display())));
            for p in &problems {
                println!("{p}");
            }
            if problems.is_empty() {
                println!("{} tools, no problems", reg.len());
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
    }
}

/// Approves nothing itself; answers key requests with placeholder values.
fn answer_key_requests(broker: ApprovalBroker, stop: Arc<AtomicBool>) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            for req in broker.pending() {
                if let ApprovalPayload::ApiKeys { api_names, .. } = &req.payload {
                    let keys = api_names
                        .iter()
                        .map(|n| Secret::new(n.as_str(), format!("replay-{n}")))
                        .collect();
                    let _ = broker.decide(ApprovalDecision::with_keys(&req.id, keys));
                }
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    })
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

struct Replayed {
    events: Vec<serde_json::Value>,
    unused: Vec<String>,
}

fn replay_once(config: &Config, fixture: &Path, task: &str) -> anyhow::Result<Replayed> {
    let scratch = tempfile::tempdir()?;
    let mut config = config.clone();
    let registry = scratch.path().join("tools");
    if config.registry_path.is_dir() {
        copy_dir(&config.registry_path, &registry)?;
    }
    config.registry_path = registry;
    config.runs_dir = scratch.path().join("runs");
    config.auto_approve = true;
    let mut provider = ReplayProvider::from_file(fixture, config.pricing.clone())?;
    let broker = ApprovalBroker::new();
    let orch = Orchestrator::new(config, broker.clone())?;
    let stop = Arc::new(AtomicBool::new(false));
    let responder = answer_key_requests(broker.clone(), stop.clone());
    let outcome = orch.run_session(task, &mut provider);
    stop.store(true, Ordering::Relaxed);
    broker.close();
    let _ = responder.join();
    let (handle, _) = outcome?;
    Ok(Replayed {
        events: trace::normalized(&handle.trace.events()),
        unused: provider
            .unused()
            .into_iter()
            .map(|(stage, n)| format!("{}#{n}", stage.as_str()))
            .collect(),
    })
}

fn replay_check(config: Config, task: &str) -> anyhow::Result<ExitCode> {
    let ProviderConfig::Replay { fixture_path } = provider_config(&config).clone() else {
        anyhow::bail!("replay-check needs a replay fixture");
    };
    let first = replay_once(&config, &fixture_path, task)?;
    let second = replay_once(&config, &fixture_path, task)?;
    let mut ok = true;
    if first.events.len() != second.events.len() {
        println!("trace lengths differ: {} vs {}", first.events.len(), second.events.len());
        ok = false;
    }
    if let Some((i, (a, b))) = first
        .events
        .iter()
        .zip(&second.events)
        .enumerate()
        .find(|(_, (a, b))| a != b)
    {
        println!("first difference at event {}:\n  {a}\n  {b}", i + 1);
        ok = false;
    }
    if !first.unused.is_empty() {
        println!("unused fixture entries: {}", first.unused.join(", "));
        ok = false;
    }
    if ok {
        println!("replay deterministic: {} events", first.events.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn search_stub(dir: &Path, bind: SocketAddr) -> anyhow::Result<ExitCode> {
    let server = StubServer::start_on(dir, bind)?;
    println!("search stub listening on {}", server.url());
    server.join();
    Ok(ExitCode::SUCCESS)
}
