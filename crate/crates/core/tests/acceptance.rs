//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line and
//! then asserts, so a failing criterion never hides the others.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use arbor_core::checkpoint::RunStatus;
use arbor_core::config::RunConfig;
use arbor_core::executor::{execute_node, is_alive, run_experiment, ExitClass, JobMode, NodeJob, SandboxConfig};
use arbor_core::gateway::{Gateway, MockRule, MockScenario, Role};
use arbor_core::ideation::{generate_ideas, IdeationConfig, FINALIZE_ACTION, SEARCH_ACTION};
use arbor_core::orchestrator::{self, RunOutcome, TREE_FILE};
use arbor_core::policy::{select_candidates, NodeScore, SearchRng, SelectionPolicy};
use arbor_core::stage::summarize_replicas;
use arbor_core::tree::{ExperimentTree, Metrics, NodeKind, NodeStatus, StageId, TreeError};
use arbor_core::writeup::audit::{audit_figures, FigureAuditReport};
use common::{finish, idea, mock_config, report};
use rand::{Rng, SeedableRng};

fn within(start: Instant, limit_seconds: f64) -> (bool, String) {
    let elapsed = start.elapsed().as_secs_f64();
    (elapsed < limit_seconds, format!("{elapsed:.2} s of {limit_seconds} s"))
}

#[test]
fn config_fidelity() {
    let start = Instant::now();
    let config = RunConfig::default();
    let mut problems = Vec::new();
    if config.stage_budgets != [21, 12, 12, 12] {
        problems.push(format!("stage budgets {:?}", config.stage_budgets));
    }
    if config.policy.debug_probability != 1.0 {
        problems.push(format!("debug probability {}", config.policy.debug_probability));
    }
    if config.policy.max_debug_depth != 3 {
        problems.push(format!("max debug depth {}", config.policy.max_debug_depth));
    }
    if config.budget.per_node_timeout_seconds != 3600.0 {
        problems.push(format!("node timeout {}", config.budget.per_node_timeout_seconds));
    }
    if config.budget.max_wall_clock_seconds != 15.0 * 3600.0 {
        problems.push(format!("wall clock {}", config.budget.max_wall_clock_seconds));
    }
    let expected_temperature = [
        (Role::CodeGeneration, 0.5),
        (Role::FeedbackAgent, 0.5),
        (Role::VlmFeedback, 0.5),
        (Role::SummaryReport, 1.0),
    ];
    let roles = config.roles();
    for (role, temperature) in expected_temperature {
        match roles.iter().find(|r| r.role == role) {
            Some(r) if r.temperature == temperature && r.max_tokens == 8192 => {}
            Some(r) => problems.push(format!("{role:?}: temperature {} max_tokens {}", r.temperature, r.max_tokens)),
            None => problems.push(format!("{role:?} missing")),
        }
    }
    match RunConfig::from_json("{}") {
        Ok(parsed) if parsed == config => {}
        Ok(_) => problems.push("an empty config file does not materialize the defaults".into()),
        Err(e) => problems.push(format!("empty config rejected: {e}")),
    }
    let (fast, timing) = within(start, 1.0);
    let passed = problems.is_empty() && fast;
    report("config fidelity", passed, &format!("{problems:?}; {timing}"));
    assert!(passed);
}

/// Every structural and stage-level property the final tree must satisfy.
fn run_invariant_violations(outcome: &RunOutcome, config: &RunConfig) -> Vec<String> {
    let tree = &outcome.tree;
    let mut problems = tree.validate();
    if outcome.status != RunStatus::Done {
        problems.push(format!("status {:?}: {:?}", outcome.status, outcome.reason));
    }
    for node in tree.nodes() {
        if !node.status.is_terminal() {
            problems.push(format!("node {} left {}", node.id, node.status));
        }
        if node.status == NodeStatus::NonBuggy && (node.metrics.is_empty() || node.figure_paths.is_empty()) {
            problems.push(format!("non_buggy node {} lacks metrics or figures", node.id));
        }
        if node.status == NodeStatus::Buggy && node.error_trace.is_none() {
            problems.push(format!("buggy node {} lacks an error trace", node.id));
        }
        if tree.debug_depth(node.id).unwrap_or(u32::MAX) > config.policy.max_debug_depth {
            problems.push(format!("node {} exceeds the debug bound", node.id));
        }
    }
    if outcome.stages.len() != 4 {
        problems.push(format!("{} stage states", outcome.stages.len()));
    }
    let mut previous_root = None;
    for (state, budget) in outcome.stages.iter().zip(config.stage_budgets) {
        let stage = state.stage;
        if !state.completed {
            problems.push(format!("stage {stage} not completed"));
        }
        if state.node_budget != budget || state.nodes_used > state.node_budget {
            problems.push(format!("stage {stage} used {} of {}", state.nodes_used, state.node_budget));
        }
        match state.best_node.and_then(|id| tree.get(id)) {
            Some(best) if best.status == NodeStatus::NonBuggy && best.stage == stage && best.kind.is_search() => {}
            _ => problems.push(format!("stage {stage} best node {:?} is not a non_buggy search node", state.best_node)),
        }
        match tree.stage_root(stage) {
            Some(root) => {
                if previous_root.is_some_and(|p| p >= root) {
                    problems.push(format!("stage {stage} root precedes the previous stage"));
                }
                previous_root = Some(root);
            }
            None => problems.push(format!("stage {stage} has no root")),
        }
    }
    for after in &config.criteria.replicate_after {
        let stage = StageId::new(*after).expect("valid stage");
        let count = |kind| tree.stage_nodes(stage).filter(|n| n.kind == kind).count();
        if count(NodeKind::Replication) != config.budget.replication_count as usize || count(NodeKind::Aggregation) != 1 {
            problems.push(format!("stage {stage} lacks its replications or aggregation"));
        }
    }
    match &outcome.writeup {
        Some(w) if w.manuscript.latex_source.contains("\\begin{document}") => {}
        _ => problems.push("no manuscript".into()),
    }
    problems
}

#[test]
fn end_to_end_mock_run() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = mock_config(dir.path());
    let (passed, detail) = match orchestrator::run(&config, &idea(), false) {
        Ok(outcome) => {
            let problems = run_invariant_violations(&outcome, &config);
            let first = outcome.tree.get(arbor_core::tree::NodeId(0));
            let repaired = first.is_some_and(|n| n.status == NodeStatus::Buggy)
                && outcome
                    .tree
                    .children(arbor_core::tree::NodeId(0))
                    .any(|c| c.kind == NodeKind::Debug && c.status == NodeStatus::NonBuggy);
            let (fast, timing) = within(start, 60.0);
            (
                problems.is_empty() && repaired && fast,
                format!(
                    "{} nodes, first draft repaired by debug child: {repaired}, violations {problems:?}; {timing}",
                    outcome.tree.len()
                ),
            )
        }
        Err(e) => (false, format!("run failed: {e}")),
    };
    report("end-to-end mock run", passed, &detail);
    assert!(passed);
}

#[test]
fn selection_statistics() {
    let start = Instant::now();
    let s1 = StageId::new(1).unwrap();
    let mut tree = ExperimentTree::new(3);
    let buggy = tree.add_node(None, NodeKind::Draft, "a", "", s1).unwrap();
    let good = tree.add_node(None, NodeKind::Draft, "b", "", s1).unwrap();
    finish(&mut tree, buggy, false);
    finish(&mut tree, good, true);
    let ranking = vec![NodeScore {
        node_id: good,
        score: 1.0,
        rationale: String::new(),
    }];
    let count_buggy = |probability: f64| {
        let policy = SelectionPolicy {
            debug_probability: probability,
            ..SelectionPolicy::default()
        };
        let mut rng = SearchRng::seed_from_u64(20_240_601);
        (0..10_000)
            .filter(|_| select_candidates(&tree, s1, &policy, &ranking, &mut rng, 1).unwrap() == [buggy])
            .count()
    };
    let half = count_buggy(0.5);
    let always = count_buggy(1.0);
    let (fast, timing) = within(start, 5.0);
    let passed = (4850..=5150).contains(&half) && always == 10_000 && fast;
    report(
        "selection statistics",
        passed,
        &format!("p=0.5 chose buggy {half}/10000, p=1.0 chose buggy {always}/10000; {timing}"),
    );
    assert!(passed);
}

#[test]
fn debug_bound() {
    let start = Instant::now();
    let s1 = StageId::new(1).unwrap();
    let mut rng = SearchRng::seed_from_u64(7);
    let mut violations = 0usize;
    let mut fourth_rejections = 0usize;
    for _ in 0..1000 {
        let mut tree = ExperimentTree::new(3);
        let root = tree.add_node(None, NodeKind::Draft, "root", "", s1).unwrap();
        finish(&mut tree, root, rng.gen_bool(0.5));
        for _ in 0..40 {
            let parent = arbor_core::tree::NodeId(rng.gen_range(0..tree.len() as u64));
            let kind = if rng.gen_bool(0.7) { NodeKind::Debug } else { NodeKind::Refine };
            if let Ok(child) = tree.add_node(Some(parent), kind, "", "", s1) {
                finish(&mut tree, child, rng.gen_bool(0.2));
            }
        }
        if tree.nodes().iter().any(|n| tree.debug_depth(n.id).unwrap() > 3) {
            violations += 1;
        }

        let mut chain = tree.add_node(None, NodeKind::Draft, "chain", "", s1).unwrap();
        finish(&mut tree, chain, false);
        for _ in 0..3 {
            chain = tree.add_node(Some(chain), NodeKind::Debug, "", "", s1).unwrap();
            finish(&mut tree, chain, false);
        }
        if tree.add_node(Some(chain), NodeKind::Debug, "", "", s1)
            == Err(TreeError::MaxDebugDepthExceeded { depth: 4, max: 3 })
        {
            fourth_rejections += 1;
        }
    }
    let (fast, timing) = within(start, 5.0);
    let passed = violations == 0 && fourth_rejections == 1000 && fast;
    report(
        "debug bound",
        passed,
        &format!("{violations} trees over depth 3, 4th debug child rejected {fourth_rejections}/1000; {timing}"),
    );
    assert!(passed);
}

/// Mean and sample std computed without the library: the std through the
/// pairwise-difference identity, which shares no arithmetic with a
/// two-pass formula.
fn brute_force(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut pairs = 0.0;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            pairs += (values[i] - values[j]).powi(2);
        }
    }
    (mean, (pairs / (n * (n - 1.0))).sqrt())
}

fn relative_error(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

#[test]
fn aggregation_oracle() {
    let start = Instant::now();
    let mut rng = SearchRng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut shape_errors = 0;
    for _ in 0..50 {
        let replicas = rng.gen_range(2..=6);
        let len = rng.gen_range(1..=12);
        let sets: Vec<Metrics> = (0..replicas)
            .map(|_| {
                let mut m = Metrics::new();
                m.insert("val_loss".into(), (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect());
                m
            })
            .collect();
        let refs: Vec<&Metrics> = sets.iter().collect();
        let (aggregated, std_omitted) = summarize_replicas(&refs).unwrap();
        if std_omitted {
            shape_errors += 1;
        }
        for i in 0..len {
            let column: Vec<f64> = sets.iter().map(|m| m["val_loss"][i]).collect();
            let (mean, std) = brute_force(&column);
            worst = worst
                .max(relative_error(aggregated["val_loss_mean"][i], mean))
                .max(relative_error(aggregated["val_loss_std"][i], std));
        }
    }
    let sets: Vec<Metrics> = [1.0, 2.0, 3.0]
        .iter()
        .map(|v| Metrics::from([("x".to_string(), vec![*v])]))
        .collect();
    let refs: Vec<&Metrics> = sets.iter().collect();
    let (small, _) = summarize_replicas(&refs).unwrap();
    let sample_std = small["x_std"][0];
    let (fast, timing) = within(start, 1.0);
    let passed = worst <= 1e-12 && shape_errors == 0 && sample_std == 1.0 && small["x_mean"][0] == 2.0 && fast;
    report(
        "aggregation oracle",
        passed,
        &format!("worst relative error {worst:.3e} over 50 sets, std([1,2,3]) = {sample_std}; {timing}"),
    );
    assert!(passed);
}

const NPY_WRITER: &str = r#"import os
import struct


def save(path, values):
    header = "{'descr': '<f8', 'fortran_order': False, 'shape': (%d,), }" % len(values)
    header += " " * ((64 - (11 + len(header)) % 64) % 64) + "\n"
    with open(path, "wb") as fh:
        fh.write(b"\x93NUMPY\x01\x00" + struct.pack("<H", len(header)) + header.encode())
        fh.write(struct.pack("<%dd" % len(values), *values))


os.makedirs("metrics", exist_ok=True)
save("metrics/val_accuracy.npy", [0.5, 0.6, 0.7])
save("metrics/val_loss.npy", [0.9, 0.7, 0.6])
"#;

fn plot_script(note: Option<&str>) -> String {
    let note = match note {
        Some(n) => format!("{n:?}"),
        None => "None".into(),
    };
    format!(
        r#"import os
import struct
import zlib

NOTE = {note}


def chunk(tag, payload):
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


w, h = 16, 8
raw = b"".join(b"\x00" + bytes([(x * 16) % 256 for x in range(w)]) for _ in range(h))
png = b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
if NOTE:
    png += chunk(b"tEXt", b"Comment\x00" + NOTE.encode("latin-1"))
png += chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b"")
os.makedirs("figures", exist_ok=True)
with open("figures/val_accuracy.png", "wb") as fh:
    fh.write(png)
"#
    )
}

#[test]
fn gate_truth_table() {
    let start = Instant::now();
    let gateway = Gateway::mock(0, MockScenario::default());
    let sandbox = SandboxConfig {
        timeout_seconds: 20.0,
        deterministic_timing: true,
        ..SandboxConfig::default()
    };
    let combos: Vec<(bool, bool, bool)> = (0..8).map(|i| (i & 4 != 0, i & 2 != 0, i & 1 != 0)).collect();
    let results: Vec<Result<NodeStatus, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = combos
            .iter()
            .enumerate()
            .map(|(i, &(exec_ok, plot_ok, vlm_pass))| {
                let (gateway, sandbox) = (&gateway, &sandbox);
                scope.spawn(move || {
                    let dir = tempfile::tempdir().unwrap();
                    let script = if exec_ok { NPY_WRITER.to_string() } else { "raise RuntimeError('boom')\n".into() };
                    let viz = if plot_ok {
                        plot_script(if vlm_pass { None } else { Some("vlm-flag: unreadable axis labels") })
                    } else {
                        "raise RuntimeError('plotting broke')\n".into()
                    };
                    let job = NodeJob {
                        node_id: arbor_core::tree::NodeId(i as u64),
                        plan: "truth table".into(),
                        script,
                        viz_script: Some(viz),
                        workspace: dir.path().join("ws"),
                        path_base: dir.path().to_path_buf(),
                        mode: JobMode::Experiment,
                    };
                    execute_node(&job, sandbox, gateway).map(|c| c.status).map_err(|e| e.to_string())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut wrong = Vec::new();
    for (&(exec_ok, plot_ok, vlm_pass), result) in combos.iter().zip(&results) {
        let expected = if exec_ok && plot_ok && vlm_pass {
            NodeStatus::NonBuggy
        } else {
            NodeStatus::Buggy
        };
        if result.as_ref() != Ok(&expected) {
            wrong.push(format!("({exec_ok},{plot_ok},{vlm_pass}) -> {result:?}"));
        }
    }
    let (fast, timing) = within(start, 1.0);
    let passed = wrong.is_empty() && fast;
    report("gate truth table", passed, &format!("mismatches {wrong:?}; {timing}"));
    assert!(passed);
}

const SLEEP_FOREVER: &str = r#"import os
import subprocess
import sys
import time

child = subprocess.Popen([sys.executable, "-c",
    "import subprocess, time\n"
    "p = subprocess.Popen(['sleep', '1000'])\n"
    "open('grandchild.pid', 'w').write(str(p.pid))\n"
    "time.sleep(1000)\n"])
detached = subprocess.Popen([sys.executable, "-c", "import os, time\nos.setsid()\ntime.sleep(1000)\n"])
with open("pids.txt", "w") as fh:
    fh.write("%d %d %d" % (os.getpid(), child.pid, detached.pid))
while True:
    time.sleep(1)
"#;

#[test]
fn timeout_kill() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let workspace = dir.path().join("ws");
    let sandbox = SandboxConfig {
        timeout_seconds: 2.0,
        ..SandboxConfig::default()
    };
    let outcome = run_experiment(SLEEP_FOREVER, &workspace, &sandbox).unwrap();
    let mut pids: Vec<i32> = std::fs::read_to_string(workspace.join("pids.txt"))
        .unwrap_or_default()
        .split_whitespace()
        .filter_map(|p| p.parse().ok())
        .collect();
    if let Ok(text) = std::fs::read_to_string(workspace.join("grandchild.pid")) {
        pids.extend(text.trim().parse::<i32>().ok());
    }
    let deadline = Instant::now() + Duration::from_secs(2);
    let mut survivors: Vec<i32> = pids.iter().copied().filter(|p| is_alive(*p)).collect();
    while !survivors.is_empty() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(50));
        survivors.retain(|p| is_alive(*p));
    }
    let (fast, timing) = within(start, 10.0);
    let passed = outcome.exit_class == ExitClass::Timeout && pids.len() == 4 && survivors.is_empty() && fast;
    report(
        "timeout kill",
        passed,
        &format!(
            "class {:?}, {} processes tracked, survivors {survivors:?}; {timing}",
            outcome.exit_class,
            pids.len()
        ),
    );
    for pid in survivors {
        // SAFETY: cleanup of processes this test spawned.
        unsafe {
            libc::kill(pid, libc::SIGKILL);
        }
    }
    assert!(passed);
}

#[test]
fn resume_equivalence() {
    let start = Instant::now();
    let straight = tempfile::tempdir().unwrap();
    let interrupted = tempfile::tempdir().unwrap();
    let reference = orchestrator::run(&mock_config(straight.path()), &idea(), false).unwrap();

    let mut halting = mock_config(interrupted.path());
    halting.halt_after_checkpoints = Some(2);
    let halted = orchestrator::run(&halting, &idea(), false).unwrap();
    let resumed = orchestrator::run(&mock_config(interrupted.path()), &idea(), true).unwrap();

    let a = std::fs::read(reference.run_dir.join(TREE_FILE)).unwrap();
    let b = std::fs::read(resumed.run_dir.join(TREE_FILE)).unwrap();
    let identical = a == b && reference.tree.to_json() == resumed.tree.to_json();
    let (fast, timing) = within(start, 90.0);
    let passed = halted.halted && halted.status != RunStatus::Done && resumed.status == RunStatus::Done && identical && fast;
    report(
        "resume equivalence",
        passed,
        &format!(
            "halted in {:?} with {} nodes, resumed tree byte-identical: {identical} ({} bytes); {timing}",
            halted.status,
            halted.tree.len(),
            a.len()
        ),
    );
    assert!(passed);
}

#[test]
fn ideation_protocol() {
    let start = Instant::now();
    let premature = r#"ACTION:
FinalizeIdea

ARGUMENTS:
{"idea": {"Name": "premature", "Title": "t", "Short Hypothesis": "h", "Related Work": "r", "Abstract": "a", "Experiments": "e", "Risk Factors and Limitations": "l"}}"#;
    let scenario = MockScenario {
        rules: vec![MockRule {
            role: Some(Role::Ideation),
            contains: "Begin by generating an interestingly new".into(),
            response: premature.into(),
        }],
        ..MockScenario::default()
    };
    let gateway = Gateway::mock(3, scenario);
    let literature = arbor_core::gateway::FixtureLiterature::synthetic();
    let config = IdeationConfig {
        count: 3,
        reflection_rounds: 3,
        seed: 5,
    };
    let report_ = generate_ideas("Calibration of small language models under distribution shift.", &config, &gateway, &literature)
        .unwrap();
    let mut problems = Vec::new();
    for t in &report_.transcripts {
        let first = t.actions.first();
        if !first.is_some_and(|a| a.action == FINALIZE_ACTION && !a.accepted) {
            problems.push(format!("slot {}: premature finalize not rejected", t.slot));
        }
        let reprompted = t.messages.iter().any(|m| m.text.contains("FinalizeIdea was rejected"));
        if !reprompted {
            problems.push(format!("slot {}: no reprompt after rejection", t.slot));
        }
        let accepted = t.actions.iter().position(|a| a.action == FINALIZE_ACTION && a.accepted);
        let searched = t.actions.iter().position(|a| a.action == SEARCH_ACTION && a.accepted);
        if !matches!((searched, accepted), (Some(s), Some(f)) if s < f) {
            problems.push(format!("slot {}: no accepted finalize after a search", t.slot));
        }
    }
    if report_.ideas.len() != 3 {
        problems.push(format!("{} ideas accepted", report_.ideas.len()));
    }
    for idea in &report_.ideas {
        let value = serde_json::to_value(idea).unwrap();
        let object = value.as_object().unwrap();
        let complete = object.len() == 7
            && idea.fields().iter().all(|(k, v)| object.contains_key(*k) && !v.trim().is_empty());
        if !complete {
            problems.push(format!("idea {} is missing fields", idea.name));
        }
    }
    let (fast, timing) = within(start, 5.0);
    let passed = problems.is_empty() && fast;
    report("ideation protocol", passed, &format!("problems {problems:?}; {timing}"));
    assert!(passed);
}

/// Independent scanner for `\includegraphics` targets: character by
/// character, no regular expressions.
fn reference_refs(latex: &str) -> Vec<String> {
    const COMMAND: &str = "\\includegraphics";
    let mut text = String::new();
    for line in latex.lines() {
        let mut prev = ' ';
        for c in line.chars() {
            if c == '%' && prev != '\\' {
                break;
            }
            text.push(c);
            prev = c;
        }
        text.push('\n');
    }
    let chars: Vec<char> = text.chars().collect();
    let command: Vec<char> = COMMAND.chars().collect();
    let mut refs = Vec::new();
    let mut i = 0;
    while i + command.len() <= chars.len() {
        if chars[i..i + command.len()] != command[..] {
            i += 1;
            continue;
        }
        i += command.len();
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i < chars.len() && chars[i] == '[' {
            while i < chars.len() && chars[i] != ']' {
                i += 1;
            }
            i += 1;
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
        }
        if i < chars.len() && chars[i] == '{' {
            let close = chars[i..].iter().position(|c| *c == '}').map(|p| p + i);
            if let Some(close) = close {
                let target: String = chars[i + 1..close].iter().collect();
                let name = target.trim().split('/').next_back().unwrap_or("").to_string();
                if !name.is_empty() {
                    refs.push(name);
                }
                i = close + 1;
            }
        }
    }
    refs
}

fn reference_audit(latex: &str, figures: &Path) -> FigureAuditReport {
    let extensions = ["png", "jpg", "jpeg", "pdf"];
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in std::fs::read_dir(figures).unwrap().flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        let ext = name.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).unwrap_or_default();
        if extensions.contains(&ext.as_str()) {
            files.insert(name, std::fs::read(entry.path()).unwrap());
        }
    }
    let mut report = FigureAuditReport::default();
    for r in reference_refs(latex) {
        let hit = if files.contains_key(&r) {
            Some(r.clone())
        } else if !r.contains('.') {
            extensions.iter().map(|e| format!("{r}.{e}")).find(|c| files.contains_key(c))
        } else {
            None
        };
        match hit {
            Some(name) => report.used.insert(name),
            None => report.invalid_refs.insert(r),
        };
    }
    let names: Vec<&String> = files.keys().collect();
    for name in &names {
        if !report.used.contains(*name) {
            report.unused.insert((*name).clone());
        }
    }
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            if files[*a] == files[*b] {
                report.duplicates.insert(((*a).clone(), (*b).clone()));
            }
        }
    }
    report
}

fn truth(path: &Path) -> FigureAuditReport {
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let set = |key: &str| -> BTreeSet<String> {
        value[key].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect()
    };
    FigureAuditReport {
        used: set("used"),
        unused: set("unused"),
        invalid_refs: set("invalid_refs"),
        duplicates: value["duplicates"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| (p[0].as_str().unwrap().to_string(), p[1].as_str().unwrap().to_string()))
            .collect(),
    }
}

#[test]
fn figure_audit() {
    let start = Instant::now();
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/audit");
    let mut problems = Vec::new();
    let mut documents = 0;
    for doc in ["doc1", "doc2", "doc3", "doc4", "doc5"] {
        let dir = corpus.join(doc);
        let latex = std::fs::read_to_string(dir.join("paper.tex")).unwrap();
        let expected = truth(&dir.join("truth.json"));
        let actual = audit_figures(&latex, &dir.join("figures"));
        let reference = reference_audit(&latex, &dir.join("figures"));
        if actual != expected {
            problems.push(format!("{doc}: audit {actual:?} != truth {expected:?}"));
        }
        if reference != expected {
            problems.push(format!("{doc}: reference parser {reference:?} != truth"));
        }
        documents += 1;
    }
    let (fast, timing) = within(start, 5.0);
    let passed = problems.is_empty() && documents == 5 && fast;
    report("figure audit", passed, &format!("{documents} documents, problems {problems:?}; {timing}"));
    assert!(passed);
}
