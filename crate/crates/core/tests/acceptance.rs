//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use common::*;
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use toolsmith_core::approval::{ApprovalBroker, ApprovalGate, ApprovedSource, CodeReview};
use toolsmith_core::gateway::{cost_band, meter_session, FixtureEntry, PricingTable, Role, Stage, Usage};
use toolsmith_core::harness;
use toolsmith_core::orchestrator::scan_for_secrets;
use toolsmith_core::registry::{Registry, ToolRecord, MANIFEST_FILE};
use toolsmith_core::retrieval::StubServer;
use toolsmith_core::sandbox::{ExecutionStatus, Sandbox, SandboxPolicy};
use toolsmith_core::schema::{CallSchema, ParameterSchema};
use toolsmith_core::trace::{check_gate_soundness, EventKind, Terminal};
use toolsmith_core::vault::{Secret, SecretVault};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn approve(source: &str) -> ApprovedSource {
    let gate = ApprovalGate::new("acceptance", ApprovalBroker::new(), true);
    match gate.review_code("acceptance", source, &Default::default()).unwrap() {
        CodeReview::Approved(a) => a,
        CodeReview::Rejected => unreachable!(),
    }
}

fn sandbox(policy: SandboxPolicy) -> (tempfile::TempDir, Sandbox) {
    let dir = tempfile::tempdir().unwrap();
    let sb = Sandbox::new(policy, dir.path()).unwrap();
    (dir, sb)
}

const TASK03: &str = "Who is the current president of the United States of America?";
const TASK02: &str = "Extract all email addresses from this text: \"Contact us at support@example.com or \
                      sales@example.org for more information.\" After extracting the email addresses, reverse \
                      those strings. And after that, convert all characters in that string into uppercase and give \
                      me that final output.";

fn task03() -> Result<String, String> {
    let stub = StubServer::start(&stub_dir()).map_err(|e| e.to_string())?;
    let env = Env::new().with_search(&stub);
    let secret = Secret::new("serpapi", SERPAPI_KEY);
    let started = Instant::now();
    let run = run(&env, "task03", TASK03, Policy::ApproveAll, vec![secret.clone()]);
    let elapsed = started.elapsed();
    ensure(run.report.terminal == Terminal::Answered, || format!("terminal {:?}", run.report.terminal))?;

    let registry = Registry::open(env.registry_dir()).map_err(|e| e.to_string())?;
    ensure(registry.len() == 1, || format!("registry has {} records", registry.len()))?;
    let record = registry.snapshot().entries[0].function_name.clone();
    let record = registry.fetch(&record).map_err(|e| e.to_string())?;

    // the registered tool's declared parameters drive a real call whose
    // output must be organic_results-shaped
    let mut args = serde_json::Map::new();
    for p in &record.schema.parameters.required {
        args.insert(p.clone(), json!("current president of the United States"));
    }
    let (_d, mut sb) = sandbox(env.config.sandbox_policy());
    let mut vault = SecretVault::new();
    vault.insert(secret.clone());
    let value = harness::invoke(&mut sb, &approve(&record.source), &vault, &record.function_name, &args)
        .map_err(|e| e.to_string())?
        .value;
    let organic = value["organic_results"].as_array().ok_or("no organic_results array")?;
    ensure(
        !organic.is_empty() && organic.iter().all(|r| ["title", "link", "snippet"].iter().all(|k| r[k].is_string())),
        || format!("unexpected shape: {value}"),
    )?;

    let hits = scan_for_secrets(&run.handle.run_dir, std::slice::from_ref(&secret));
    ensure(hits.is_empty(), || format!("secret found in {hits:?}"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("answered in {:.2}s, 1 record, 0 secret hits", elapsed.as_secs_f64()))
}

fn task02() -> Result<String, String> {
    let env = Env::new();
    let started = Instant::now();
    let run = run(&env, "task02", TASK02, Policy::ApproveAll, vec![]);
    let elapsed = started.elapsed();
    ensure(run.report.terminal == Terminal::Answered, || format!("terminal {:?}", run.report.terminal))?;
    let answer = run.report.answer.clone().unwrap_or_default();
    for want in ["MOC.ELPMAXE@TROPPUS", "GRO.ELPMAXE@SELAS"] {
        ensure(answer.matches(want).count() == 1, || format!("{want} not exactly once in {answer:?}"))?;
    }
    let registry = Registry::open(env.registry_dir()).map_err(|e| e.to_string())?;
    ensure(run.report.tools_generated.len() == 3 && registry.len() == 3, || {
        format!("generated {:?}", run.report.tools_generated)
    })?;

    let (_d, mut sb) = sandbox(SandboxPolicy::default());
    let vault = SecretVault::new();
    let mut call = |f: &str, args: Value| -> Result<Value, String> {
        let rec = registry.fetch(f).map_err(|e| e.to_string())?;
        harness::invoke(&mut sb, &approve(&rec.source), &vault, f, args.as_object().unwrap())
            .map(|i| i.value)
            .map_err(|e| e.to_string())
    };
    let inputs = ["support@example.com", "sales@example.org"];
    let extracted = call(
        "extract_emails",
        json!({"text": format!("Contact us at {} or {} for more information.", inputs[0], inputs[1])}),
    )?;
    ensure(extracted == json!(inputs), || format!("extracted {extracted}"))?;
    for input in inputs {
        let reversed = call("reverse_string", json!({"input_string": input}))?;
        let upper = call("convert_to_uppercase", json!({"input_string": reversed}))?;
        let oracle: String = input.chars().rev().collect::<String>().to_uppercase();
        ensure(upper == json!(oracle), || format!("{input}: tools gave {upper}, oracle {oracle}"))?;
    }
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("3 tools, both strings present, oracle agrees, {:.2}s", elapsed.as_secs_f64()))
}

fn tree_bytes(root: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = walkdir::WalkDir::new(root)
        .into_iter()
        .flatten()
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().to_path_buf(), std::fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

fn reuse() -> Result<String, String> {
    let env = Env::new();
    let origin = run(
        &env,
        "wordfreq_origin",
        "Find 10 most common words in the sentence: the quick fox and the lazy dog and the cat saw the fox",
        Policy::ApproveAll,
        vec![],
    );
    ensure(origin.report.tools_generated == ["most_common_words"], || {
        format!("origin generated {:?}", origin.report.tools_generated)
    })?;
    let before = tree_bytes(&env.registry_dir());
    let alternatives = [
        ("wordfreq_alt1", "Rank the following keywords in order of relevance in this document."),
        ("wordfreq_alt2", "Can you find the unique words in this sentence and tell me how rare they are?"),
        ("wordfreq_alt3", "Find out how similar these two texts are based on their most commonly used words."),
    ];
    for (name, task) in alternatives {
        let run = run(&env, name, task, Policy::ApproveAll, vec![]);
        ensure(run.report.terminal == Terminal::Answered, || format!("{name}: {:?}", run.report.diagnostic))?;
        ensure(run.report.generation_iterations == 0 && run.count("generation_iteration") == 0, || {
            format!("{name}: {} iterations", run.report.generation_iterations)
        })?;
        ensure(tree_bytes(&env.registry_dir()) == before, || format!("{name}: registry changed"))?;
        let entry = run
            .kinds()
            .find_map(|k| match k {
                EventKind::ToolsSelected { entries } => entries.first().cloned(),
                _ => None,
            })
            .ok_or("no selection")?;
        ensure(
            entry.is_available
                && entry.name == "Word_Frequency_Counter"
                && entry.function_name.as_deref() == Some("most_common_words")
                && entry.requested.name != entry.name,
            || format!("{name}: selection {entry:?}"),
        )?;
    }
    Ok("3 alternatives reused it with 0 iterations and 0 registry writes".into())
}

fn repair() -> Result<String, String> {
    let env = Env::new();
    let fixed = run(&env, "repair_nameerror", "Convert 37 degrees Celsius to Fahrenheit.", Policy::ApproveAll, vec![]);
    ensure(fixed.report.terminal == Terminal::Answered, || format!("{:?}", fixed.report.diagnostic))?;
    ensure(fixed.report.generation_iterations == 2, || {
        format!("{} iterations", fixed.report.generation_iterations)
    })?;
    let writer: Vec<_> = fixed.provider.requests().iter().filter(|r| r.stage == Stage::CodeWriter).collect();
    let excerpt = fixed
        .kinds()
        .find_map(|k| match k {
            EventKind::GenerationIteration { iteration: 1, stderr_excerpt, .. } => Some(stderr_excerpt.clone()),
            _ => None,
        })
        .ok_or("no first iteration event")?;
    let error_line = excerpt.lines().rev().find(|l| l.contains("NameError")).ok_or("no NameError excerpt")?;
    let prompt = writer.get(1).and_then(|r| r.messages.last()).ok_or("no iteration-2 request")?;
    ensure(prompt.role == Role::User && prompt.content.contains(error_line), || {
        format!("iteration-2 prompt lacks {error_line:?}")
    })?;

    let env = Env::new();
    let dead = run(&env, "exhausted", "Check whether 97 is a prime number.", Policy::ApproveAll, vec![]);
    ensure(dead.report.terminal == Terminal::GenerationExhausted, || format!("{:?}", dead.report.terminal))?;
    let max = env.config.budgets.max_iterations;
    ensure(dead.report.generation_iterations == max, || format!("{} iterations", dead.report.generation_iterations))?;
    Ok(format!("repaired in 2 iterations; exhausted after {max}"))
}

/// Every fixture with the task and reviewer behavior it is meant for.
fn all_scenarios() -> Vec<(String, Run)> {
    let stub = StubServer::start(&stub_dir()).unwrap();
    let mut out = Vec::new();
    let fresh = |name: &str, task: &str, policy: Policy| {
        let env = Env::new().with_search(&stub);
        let r = run(&env, name, task, policy, vec![Secret::new("serpapi", SERPAPI_KEY)]);
        (name.to_string(), r)
    };
    out.push(fresh("task03", TASK03, Policy::ApproveAll));
    out.push(fresh("task02", TASK02, Policy::ApproveAll));
    out.push(fresh("repair_nameerror", "Convert 37 C to F.", Policy::ApproveAll));
    out.push(fresh("exhausted", "Is 97 prime?", Policy::ApproveAll));
    out.push(fresh("reject", "Reverse \"approval\".", Policy::RejectCode));
    out.push(fresh("no_tool", "Summarize this passage.", Policy::ApproveAll));
    out.push(fresh("solver_validation", "Add 2 and 3.", Policy::ApproveAll));

    let shared = Env::new();
    for (name, task) in [
        ("wordfreq_origin", "Find 10 most common words in the sentence."),
        ("wordfreq_alt1", "Rank the keywords."),
        ("wordfreq_alt2", "Find the unique words."),
        ("wordfreq_alt3", "Compare two texts."),
        ("sorting_miss", "Sort 34, 7, 23, 32, 5, 62."),
        ("sorting_hit", "Sort 9, 3, 14, 1 descending."),
    ] {
        out.push((name.to_string(), run(&shared, name, task, Policy::ApproveAll, vec![])));
    }
    out
}

fn gate_soundness() -> Result<String, String> {
    let runs = all_scenarios();
    let mut executions = 0;
    for (name, run) in &runs {
        executions += check_gate_soundness(&run.events).map_err(|e| format!("{name}: {e}"))?;
        ensure(run.count("session_finished") == 1, || format!("{name}: not exactly one terminal event"))?;
    }
    let (_, rejected) = runs.iter().find(|(n, _)| n == "reject").unwrap();
    ensure(rejected.report.terminal == Terminal::RejectedByHuman, || "reject fixture not rejected".into())?;
    ensure(rejected.count("execution_started") == 0, || "rejected code was executed".into())?;
    ensure(executions > 0, || "no executions observed".into())?;
    Ok(format!("{} traces, {executions} executions all preceded by approval", runs.len()))
}

fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn decimal(text: &str) -> BigRational {
    let (whole, frac) = text.split_once('.').unwrap_or((text, ""));
    let den = 10u64.pow(frac.len() as u32);
    let num: u64 = format!("{whole}{frac}").parse().unwrap();
    ratio(num, den)
}

/// USD of a usage record at $0.03 / $0.06 per 1K tokens, computed exactly.
fn oracle_cost(prompt: u64, completion: u64) -> BigRational {
    ratio(prompt * 3, 100_000) + ratio(completion * 6, 100_000)
}

fn close_enough(oracle: &BigRational, usd: f64) -> bool {
    let got = BigRational::from_float(usd).unwrap();
    let diff = if &got > oracle { got - oracle } else { oracle - got };
    diff <= ratio(1, 1_000_000_000_000)
}

fn cost_accounting() -> Result<String, String> {
    let pricing = PricingTable::default();
    let dir = common::repo_root().join("fixtures/replay");
    let mut fixtures = 0;
    for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let entries: Vec<FixtureEntry> =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).map_err(|e| e.to_string())?;
        let usages: Vec<Usage> = entries
            .iter()
            .map(|e| pricing.usage(e.usage.prompt_tokens, e.usage.completion_tokens))
            .collect();
        let total = meter_session(&usages);
        let oracle = entries
            .iter()
            .fold(ratio(0, 1), |acc, e| acc + oracle_cost(e.usage.prompt_tokens, e.usage.completion_tokens));
        ensure(close_enough(&oracle, total.cost.as_usd()), || {
            format!("{}: meter {} vs oracle {oracle}", path.display(), total.cost)
        })?;
        fixtures += 1;
    }

    // sessions: the report total must match the oracle over the calls made
    let env = Env::new();
    let miss = run(&env, "sorting_miss", "Sort 34, 7, 23, 32, 5, 62.", Policy::ApproveAll, vec![]);
    let hit = run(&env, "sorting_hit", "Sort 9, 3, 14, 1 descending.", Policy::ApproveAll, vec![]);
    for r in [&miss, &hit] {
        let oracle = r
            .report
            .calls
            .iter()
            .fold(ratio(0, 1), |acc, c| acc + oracle_cost(c.usage.prompt_tokens, c.usage.completion_tokens));
        ensure(close_enough(&oracle, r.report.total.cost.as_usd()), || {
            format!("session meter {} vs oracle {oracle}", r.report.total.cost)
        })?;
    }
    ensure(miss.report.provider_calls() > hit.report.provider_calls(), || {
        format!("miss {} calls, hit {} calls", miss.report.provider_calls(), hit.report.provider_calls())
    })?;

    // published (total tokens, USD) pairs
    let table: [(&str, u64, &str, u64, &str); 8] = [
        ("Sorting", 3161, "0.1127", 2337, "0.0781"),
        ("Reversing", 3195, "0.1078", 1678, "0.0536"),
        ("Cleaning", 2627, "0.0918", 1901, "0.0620"),
        ("Extraction", 2620, "0.0891", 1930, "0.0617"),
        ("Graph Generation", 3881, "0.1363", 2118, "0.0703"),
        ("Stock Exchange", 2495, "0.0875", 1740, "0.0558"),
        ("Sentiment", 2588, "0.0909", 1822, "0.0586"),
        ("SerpAPI", 2596, "0.0909", 1838, "0.0591"),
    ];
    let mut pairs = 0;
    for (task, t_miss, c_miss, t_hit, c_hit) in table {
        for (tokens, cost) in [(t_miss, c_miss), (t_hit, c_hit)] {
            let lo = ratio(tokens * 3, 100_000);
            let hi = ratio(tokens * 6, 100_000);
            let c = decimal(cost);
            ensure(lo <= c && c <= hi, || format!("{task}: {cost} outside [{lo}, {hi}] for {tokens} tokens"))?;
            let (blo, bhi) = cost_band(&pricing, tokens);
            ensure(close_enough(&lo, blo.as_usd()) && close_enough(&hi, bhi.as_usd()), || {
                format!("{task}: cost_band disagrees with oracle")
            })?;
            pairs += 1;
        }
    }
    Ok(format!(
        "{fixtures} fixtures match the rational oracle; {pairs}/16 table pairs in band; calls miss {} > hit {}",
        miss.report.provider_calls(),
        hit.report.provider_calls()
    ))
}

fn random_record(rng: &mut StdRng, i: usize) -> ToolRecord {
    const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "sort", "parse", "fetch", "count"];
    let pick = |rng: &mut StdRng| WORDS[rng.gen_range(0..WORDS.len())];
    let fname = format!("{}_{}_{i}", pick(rng), pick(rng));
    let n_params = rng.gen_range(0..4);
    let mut props = serde_json::Map::new();
    let mut required = Vec::new();
    let mut sig = Vec::new();
    for p in 0..n_params {
        let (ty, py) = [("string", "str"), ("integer", "int"), ("number", "float"), ("boolean", "bool")]
            [rng.gen_range(0..4)];
        let pname = format!("p{p}_{}", pick(rng));
        props.insert(pname.clone(), json!({"type": ty, "description": format!("{} ü {p}", pick(rng))}));
        required.push(pname.clone());
        sig.push(format!("{pname}: Annotated[{py}, \"{}\"]", pick(rng)));
    }
    let literal: String = (0..rng.gen_range(1..40)).map(|_| rng.gen_range('a'..='z')).collect();
    let source = format!(
        "from typing import Annotated\n\n\ndef {fname}({}):\n    \"\"\"Returns a constant.\"\"\"\n    return \"{literal}\"\n\n\nprint({fname}())\n",
        sig.join(", ")
    );
    let secs = rng.gen_range(1_600_000_000i64..1_800_000_000);
    let nanos = rng.gen_range(0..1_000_000_000u32);
    ToolRecord {
        name: format!("{}_{}_Tool_{i}", pick(rng), pick(rng)),
        description: format!("{} {} tool ü \"quoted\" \\ {i}", pick(rng), pick(rng)),
        function_name: fname.clone(),
        source,
        schema: CallSchema {
            name: fname,
            description: "Returns a constant.".into(),
            parameters: ParameterSchema {
                kind: "object".into(),
                properties: props,
                required,
            },
        },
        created_at: Utc.timestamp_opt(secs, nanos).unwrap(),
        api_requirements: if rng.gen_bool(0.3) { vec![pick(rng).to_string()] } else { vec![] },
        disabled: false,
    }
}

fn registry_round_trip() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(0x7001_5e11);
    let records: Vec<ToolRecord> = (0..100).map(|i| random_record(&mut rng, i)).collect();
    {
        let registry = Registry::open(dir.path()).map_err(|e| e.to_string())?;
        for r in &records {
            let stored = registry.register(r.clone(), &[]).map_err(|e| e.to_string())?;
            ensure(&stored == r, || format!("{} changed on register", r.function_name))?;
        }
    }
    let reloaded = Registry::open(dir.path()).map_err(|e| e.to_string())?;
    ensure(reloaded.len() == 100, || format!("{} records after reload", reloaded.len()))?;
    for r in &records {
        let back = reloaded.fetch(&r.function_name).map_err(|e| e.to_string())?;
        ensure(&back == r, || format!("{} differs after reload", r.function_name))?;
        let bytes = std::fs::read(reloaded.script_path(&r.function_name)).map_err(|e| e.to_string())?;
        ensure(bytes == r.source.as_bytes(), || format!("{} script bytes differ", r.function_name))?;
    }

    // a different tool wanting a taken name is stored under a fresh one
    let mut clash = records[0].clone();
    clash.source = clash.source.replace("Returns a constant.", "Returns another constant.");
    let stored = reloaded.register(clash, &[]).map_err(|e| e.to_string())?;
    ensure(stored.function_name != records[0].function_name, || "function_name reused".into())?;
    let again = reloaded.register(records[1].clone(), &[]).map_err(|e| e.to_string())?;
    ensure(again.function_name == records[1].function_name && reloaded.len() == 101, || {
        "identical re-register was not a no-op".into()
    })?;

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).map_err(|e| e.to_string())?;
    let entries = manifest.as_array().ok_or("manifest is not an array")?;
    ensure(
        entries.iter().all(|e| e.get("function-name").is_some() && e.get("function_name").is_none()),
        || "manifest key is not spelled function-name".into(),
    )?;
    let mut names: Vec<_> = entries.iter().map(|e| e["function-name"].as_str().unwrap()).collect();
    names.sort();
    names.dedup();
    ensure(names.len() == entries.len(), || "duplicate function-name in manifest".into())?;
    Ok("100 random records byte-exact after reload; names unique; key \"function-name\"".into())
}

fn pid_alive(pid: i32) -> bool {
    // zombies still answer signal 0; check the process state instead
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => !stat.rsplit(')').next().unwrap_or("").trim_start().starts_with('Z'),
        Err(_) => false,
    }
}

fn sandbox_properties() -> Result<String, String> {
    let timeout = Duration::from_secs(2);
    let (dir, mut sb) = sandbox(SandboxPolicy {
        timeout,
        ..Default::default()
    });
    let src = "import subprocess, sys\n\
               child = subprocess.Popen([sys.executable, '-c', 'while True: pass'])\n\
               open('child.pid', 'w').write(str(child.pid))\n\
               while True: pass\n";
    let out = sb.execute(&approve(src), &SecretVault::new()).map_err(|e| e.to_string())?;
    ensure(out.status == ExecutionStatus::TimedOut, || format!("status {:?}", out.status))?;
    ensure(out.duration <= timeout + Duration::from_secs(2), || format!("killed after {:?}", out.duration))?;
    let pid: i32 = std::fs::read_to_string(sb.workspace().join("child.pid"))
        .map_err(|e| e.to_string())?
        .trim()
        .parse()
        .map_err(|e: std::num::ParseIntError| e.to_string())?;
    std::thread::sleep(Duration::from_millis(200));
    ensure(!pid_alive(pid), || format!("grandchild {pid} survived"))?;
    let killed_after = out.duration;
    drop(sb);
    drop(dir);

    let cap = 4096;
    let (_d, mut sb) = sandbox(SandboxPolicy {
        max_output_bytes: cap,
        ..Default::default()
    });
    let write = |n: usize| format!("import sys\nsys.stdout.write('x' * {n})\n");
    let at_cap = sb.execute(&approve(&write(cap)), &SecretVault::new()).map_err(|e| e.to_string())?;
    ensure(!at_cap.truncated && at_cap.stdout.len() == cap, || "cap-sized output flagged".into())?;
    let over = sb.execute(&approve(&write(cap + 1)), &SecretVault::new()).map_err(|e| e.to_string())?;
    ensure(over.truncated && over.status == ExecutionStatus::OutputTruncated, || {
        format!("cap+1 output not flagged: {:?}", over.status)
    })?;

    let outside = tempfile::tempdir().unwrap();
    let target = outside.path().join("escape.txt").display().to_string();
    let (_d, mut sb) = sandbox(SandboxPolicy::default());
    let src = format!(
        "import os\n\
         open('kept.txt', 'w').write('ok')\n\
         os.makedirs('a/b', exist_ok=True)\n\
         open('a/b/../../nested.txt', 'w').write('ok')\n\
         open('../sibling.txt', 'w').write('x')\n\
         open('a/../../up.txt', 'w').write('x')\n\
         open({target:?}, 'w').write('x')\n\
         os.symlink({target:?}, 'link.txt')\n\
         os.symlink('..', 'a/parent')\n"
    );
    let out = sb.execute(&approve(&src), &SecretVault::new()).map_err(|e| e.to_string())?;
    ensure(out.succeeded(), || out.stderr.clone())?;
    let root = sb.workspace().canonicalize().map_err(|e| e.to_string())?;
    for a in &out.artifacts {
        let real = a.canonicalize().map_err(|e| e.to_string())?;
        ensure(real.starts_with(&root), || format!("artifact {a:?} escapes the workspace"))?;
    }
    let mut names: Vec<_> = out.artifacts.iter().map(|p| p.strip_prefix(&root).unwrap().to_path_buf()).collect();
    names.sort();
    ensure(names == [Path::new("kept.txt"), Path::new("nested.txt")], || format!("artifacts {names:?}"))?;
    Ok(format!(
        "killed after {:.2}s; flag at cap+1; {} contained artifacts",
        killed_after.as_secs_f64(),
        names.len()
    ))
}

const LISTING: &str = r#"
from typing import Annotated, Tuple, List, Union

# Define a type alias for Coordinate, specifying that it's a list of two floats
Coordinate = Annotated[List[Union[float, int]], "The coordinates of a vertex as a list of two numbers (x, y)."]

def calculate_triangle_area(
    vertex1: Coordinate,
    vertex2: Coordinate,
    vertex3: Coordinate
) -> Annotated[float, "The area of the triangle."]:
    """
    Calculate the area of a triangle given the coordinates of its three vertices.

    Args:
        vertex1 (Coordinate): The coordinates of the first vertex.
        vertex2 (Coordinate): The coordinates of the second vertex.
        vertex3 (Coordinate): The coordinates of the third vertex.

    Returns:
        float: The area of the triangle.
    """
    x1, y1 = vertex1
    x2, y2 = vertex2
    x3, y3 = vertex3

    return abs(0.5 * (x1*(y2-y3) + x2*(y3-y1) + x3*(y1-y2)))

# Example call to the calculate_triangle_area function with meaningful data.
area = calculate_triangle_area([0, 0], [5, 0], [0, 5])
print(area)
"#;

fn harness_schema() -> Result<String, String> {
    let (_d, mut sb) = sandbox(SandboxPolicy::default());
    let vault = SecretVault::new();
    let module = approve(LISTING);
    let schema =
        harness::extract_schema(&mut sb, &module, &vault, "calculate_triangle_area").map_err(|e| e.to_string())?;
    ensure(schema.parameters.required == ["vertex1", "vertex2", "vertex3"], || {
        format!("required {:?}", schema.parameters.required)
    })?;
    for p in &schema.parameters.required {
        let prop = &schema.parameters.properties[p];
        ensure(prop["type"] == "array" && prop["items"]["type"] == "number", || format!("{p}: {prop}"))?;
    }
    let args = json!({"vertex1": [0, 0], "vertex2": [5, 0], "vertex3": [0, 5]});
    let value = harness::invoke(&mut sb, &module, &vault, "calculate_triangle_area", args.as_object().unwrap())
        .map_err(|e| e.to_string())?
        .value;
    ensure(value == json!(12.5), || format!("area {value}"))?;

    let code = |src: &str, sb: &mut Sandbox| {
        harness::extract_schema(sb, &approve(src), &vault, "f")
            .err()
            .and_then(|e| e.code().map(str::to_string))
    };
    let variadic = code("def f(*args):\n    \"\"\"Sum.\"\"\"\n    return sum(args)\n", &mut sb);
    let unannotated = code("def f(x):\n    \"\"\"Echo.\"\"\"\n    return x\n", &mut sb);
    ensure(variadic.is_some() && unannotated.is_some() && variadic != unannotated, || {
        format!("codes {variadic:?} and {unannotated:?}")
    })?;
    Ok(format!(
        "3 required array<number> params; area 12.5; rejections {} / {}",
        variadic.unwrap(),
        unannotated.unwrap()
    ))
}

fn main() {
    let checks: [(&str, Check); 9] = [
        ("end-to-end replay: web search task", task03),
        ("end-to-end replay: email string task", task02),
        ("tool reuse across alternative prompts", reuse),
        ("repair loop and iteration budget", repair),
        ("approval gate soundness", gate_soundness),
        ("cost accounting", cost_accounting),
        ("registry round-trip", registry_round_trip),
        ("sandbox properties", sandbox_properties),
        ("harness schema extraction", harness_schema),
    ];
    let last_panic = Arc::new(Mutex::new(String::new()));
    let sink = last_panic.clone();
    std::panic::set_hook(Box::new(move |info| {
        *sink.lock().unwrap() = info.to_string();
    }));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err(format!("panicked: {}", last_panic.lock().unwrap())));
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
