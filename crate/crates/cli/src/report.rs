use std::fmt::Write;
use std::path::Path;

use toolsmith_core::orchestrator::SessionReport;
use toolsmith_core::trace::Terminal;

/// Process exit code for a session's terminal state.
pub fn exit_code(terminal: Terminal) -> u8 {
    match terminal {
        Terminal::Answered | Terminal::NoToolAnswered => 0,
        Terminal::RejectedByHuman => 3,
        Terminal::GenerationExhausted => 4,
        Terminal::Error => 5,
    }
}

fn terminal_label(t: Terminal) -> &'static str {
    match t {
        Terminal::Answered => "answered",
        Terminal::NoToolAnswered => "answered without tools",
        Terminal::RejectedByHuman => "rejected by human",
        Terminal::GenerationExhausted => "tool generation exhausted",
        Terminal::Error => "error",
    }
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        "none".into()
    } else {
        items.join(", ")
    }
}

pub fn render(report: &SessionReport, run_dir: &Path) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Session {}: {}", report.session_id, terminal_label(report.terminal));
    if let Some(answer) = &report.answer {
        let _ = writeln!(out, "\n{}\n", answer.trim());
    }
    if let Some(d) = &report.diagnostic {
        let _ = writeln!(out, "Diagnostic: {d}");
    }
    let _ = writeln!(
        out,
        "{:<14} {:>5} {:>8} {:>11} {:>8} {:>10}",
        "stage", "calls", "prompt", "completion", "total", "cost USD"
    );
    for r in &report.stages {
        let _ = writeln!(
            out,
            "{:<14} {:>5} {:>8} {:>11} {:>8} {:>10}",
            r.stage.as_str(),
            r.calls,
            r.prompt_tokens,
            r.completion_tokens,
            r.total_tokens,
            format!("{:.4}", r.cost.as_usd())
        );
    }
    let t = &report.total;
    let _ = writeln!(
        out,
        "{:<14} {:>5} {:>8} {:>11} {:>8} {:>10}",
        "total",
        t.calls,
        t.prompt_tokens,
        t.completion_tokens,
        t.total_tokens,
        format!("{:.4}", t.cost.as_usd())
    );
    let _ = writeln!(out, "Pricing: {}", report.pricing_model);
    let _ = writeln!(
        out,
        "Tools generated: {}; reused: {}",
        list(&report.tools_generated),
        list(&report.tools_reused)
    );
    let _ = writeln!(
        out,
        "Generation iterations: {}; solve steps: {} ({} tool calls)",
        report.generation_iterations, report.solve_steps, report.tool_steps
    );
    for a in &report.artifacts {
        let _ = writeln!(out, "Artifact: {}", a.display());
    }
    let _ = writeln!(out, "Wall time: {:.2}s", report.wall_time_secs);
    let _ = writeln!(out, "Run directory: {}", run_dir.display());
    out
}
