//! Terminal prompts answering approval requests for CLI sessions.

use std::io::{BufRead, IsTerminal, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use toolsmith_core::approval::{ApprovalBroker, ApprovalDecision, ApprovalPayload, ApprovalRequest, Verdict};
use toolsmith_core::vault::Secret;

const POLL: Duration = Duration::from_millis(25);

/// Polls the broker and asks the operator about each pending request.
pub struct TerminalApprover {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl TerminalApprover {
    pub fn start(broker: ApprovalBroker) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            let mut input = Input::new();
            while !flag.load(Ordering::Relaxed) {
                for req in broker.pending() {
                    let decision = ask(&req, &mut input);
                    if let Err(e) = broker.decide(decision) {
                        eprintln!("decision not recorded: {e}");
                    }
                }
                std::thread::sleep(POLL);
            }
        });
        Self {
            stop,
            thread: Some(thread),
        }
    }
}

impl Drop for TerminalApprover {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Line input from stdin; hidden input when stdin is a terminal.
struct Input {
    interactive: bool,
    closed: bool,
}

impl Input {
    fn new() -> Self {
        Self {
            interactive: std::io::stdin().is_terminal(),
            closed: false,
        }
    }

    fn line(&mut self, prompt: &str) -> Option<String> {
        if self.closed {
            return None;
        }
        eprint!("{prompt}");
        let _ = std::io::stderr().flush();
        let mut buf = String::new();
        match std::io::stdin().lock().read_line(&mut buf) {
            Ok(0) | Err(_) => {
                self.closed = true;
                eprintln!();
                None
            }
            Ok(_) => Some(buf.trim_end_matches(['\r', '\n']).to_string()),
        }
    }

    fn secret(&mut self, prompt: &str) -> Option<String> {
        if self.interactive {
            rpassword::prompt_password(prompt).ok()
        } else {
            self.line(prompt)
        }
    }
}

fn ask(req: &ApprovalRequest, input: &mut Input) -> ApprovalDecision {
    match &req.payload {
        ApprovalPayload::Code { tool, source, source_hash } => {
            eprintln!("\n--- code review for {tool} (sha256 {}) ---", &source_hash[..12.min(source_hash.len())]);
            for (i, line) in source.lines().enumerate() {
                eprintln!("{:>4} | {line}", i + 1);
            }
            eprintln!("---");
            loop {
                let Some(answer) = input.line("Run this code? [a]pprove / [r]eject / [e]dit: ") else {
                    eprintln!("no input available; rejecting");
                    return ApprovalDecision::new(&req.id, Verdict::Reject);
                };
                match answer.trim().to_ascii_lowercase().as_str() {
                    "a" | "approve" | "y" | "yes" => return ApprovalDecision::new(&req.id, Verdict::Approve),
                    "r" | "reject" | "n" | "no" => return ApprovalDecision::new(&req.id, Verdict::Reject),
                    "e" | "edit" => match edit(source) {
                        Ok(edited) if edited.trim().is_empty() => eprintln!("edited source is empty"),
                        Ok(edited) => return ApprovalDecision::edited(&req.id, edited),
                        Err(e) => eprintln!("editing failed: {e}"),
                    },
                    _ => eprintln!("please answer a, r or e"),
                }
            }
        }
        ApprovalPayload::ApiKeys { tool, api_names } => {
            eprintln!("\n{tool} needs API keys for: {}", api_names.join(", "));
            let mut keys = Vec::new();
            for name in api_names {
                match input.secret(&format!("API key for {name} (empty to refuse): ")) {
                    Some(v) if !v.trim().is_empty() => keys.push(Secret::new(name.as_str(), v.trim())),
                    _ => return ApprovalDecision::new(&req.id, Verdict::Reject),
                }
            }
            ApprovalDecision::with_keys(&req.id, keys)
        }
    }
}

/// Opens `$VISUAL` or `$EDITOR` on a copy of `source`.
fn edit(source: &str) -> anyhow::Result<String> {
    let editor = std::env::var("VISUAL")
        .or_else(|_| std::env::var("EDITOR"))
        .map_err(|_| anyhow::anyhow!("set $EDITOR to edit code"))?;
    let file = tempfile::Builder::new().suffix(".py").tempfile()?;
    std::fs::write(file.path(), source)?;
    let status = std::process::Command::new("sh")
        .arg("-c")
        .arg(format!("{editor} \"$1\""))
        .arg("editor")
        .arg(file.path())
        .status()?;
    anyhow::ensure!(status.success(), "editor exited with {status}");
    Ok(std::fs::read_to_string(file.path())?)
}
