use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/replay").join(format!("{name}.json"))
}

fn toolsmith(args: &[&str], dir: &tempfile::TempDir, stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_toolsmith"))
        .args(args)
        .arg("--registry")
        .arg(dir.path().join("tools"))
        .arg("--runs-dir")
        .arg(dir.path().join("runs"))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn run_fixture(name: &str, extra: &[&str], stdin: &str) -> (Output, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(name);
    let mut args = vec!["run", "a task", "--replay-fixture", fx.to_str().unwrap()];
    args.extend_from_slice(extra);
    (toolsmith(&args, &dir, stdin), dir)
}

#[test]
fn auto_approved_run_answers_and_exits_zero() {
    let (out, dir) = run_fixture("sorting_miss", &["--auto-approve", "--json"], "");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["terminal"], "answered");
    assert_eq!(report["tools_generated"], serde_json::json!(["sort_numbers"]));
    let id = report["session_id"].as_str().unwrap();
    let run_dir = dir.path().join("runs").join(id);
    assert!(run_dir.join("trace.jsonl").is_file());
    assert!(run_dir.join("report.json").is_file());
}

#[test]
fn terminal_approval_runs_the_tool() {
    let (out, _dir) = run_fixture("repair_nameerror", &[], "a\na\na\n");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("code review for"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("celsius_to_fahrenheit"));
}

#[test]
fn rejecting_code_exits_three() {
    let (out, _dir) = run_fixture("reject", &[], "r\n");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn closed_stdin_rejects() {
    let (out, _dir) = run_fixture("reject", &[], "");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exhausted_generation_exits_four() {
    let (out, _dir) = run_fixture("exhausted", &["--auto-approve"], "");
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(toolsmith(&["run"], &dir, "").status.code(), Some(2));
    assert_eq!(toolsmith(&["run", "task"], &dir, "").status.code(), Some(2));
    assert_eq!(
        toolsmith(&["run", "task", "--provider", "live", "--replay-fixture", "x.json"], &dir, "").status.code(),
        Some(2)
    );
}

#[test]
fn replay_check_passes_for_a_complete_fixture() {
    let fx = fixture("task02");
    let out = Command::new(env!("CARGO_BIN_EXE_toolsmith"))
        .args(["replay-check", "compose", "--replay-fixture", fx.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("replay deterministic"));
}

#[test]
fn tools_commands_read_the_registry() {
    let (out, dir) = run_fixture("sorting_miss", &["--auto-approve"], "");
    assert_eq!(out.status.code(), Some(0));
    let reg = dir.path().join("tools");
    let tools = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_toolsmith"))
            .arg("tools")
            .args(args)
            .arg("--registry")
            .arg(&reg)
            .output()
            .unwrap()
    };
    let list = tools(&["list"]);
    assert!(String::from_utf8_lossy(&list.stdout).starts_with("sort_numbers\t"));
    let show = tools(&["show", "sort_numbers"]);
    assert!(String::from_utf8_lossy(&show.stdout).contains("def sort_numbers"));
    assert_eq!(tools(&["show", "missing"]).status.code(), Some(1));
    assert_eq!(tools(&["check"]).status.code(), Some(0));
    std::fs::write(reg.join("stray.py"), "x = 1\n").unwrap();
    let check = tools(&["check"]);
    assert_eq!(check.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&check.stdout).contains("stray.py"));
}
