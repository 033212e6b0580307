//! Whole-run behaviour against the mock backend.

mod common;

use std::time::Instant;

use arbor_core::checkpoint::{Checkpoint, CheckpointError, RunStatus};
use arbor_core::export::{export, ExportFormat};
use arbor_core::gateway::{MockRule, Role};
use arbor_core::orchestrator::{self, RunError, ABORT_REPORT_FILE, RUN_RECORD_FILE, TREE_FILE};
use arbor_core::tree::{NodeKind, NodeStatus};
use common::{idea, mock_config, scenario_mut};

#[test]
fn wall_clock_limit_aborts_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = mock_config(dir.path());
    config.stage_budgets = [21, 12, 12, 12];
    config.budget.max_wall_clock_seconds = 5.0;
    config.budget.per_node_timeout_seconds = 4.0;
    scenario_mut(&mut config).experiment_sleep_seconds = 1.0;
    let start = Instant::now();
    let outcome = orchestrator::run(&config, &idea(), false).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(outcome.status, RunStatus::Aborted);
    assert!(outcome.reason.as_deref().unwrap().contains("wall-clock"), "{:?}", outcome.reason);
    assert!(elapsed < 5.0 + config.budget.per_node_timeout_seconds + 5.0, "took {elapsed:.1} s");
    let (_, checkpoint) = Checkpoint::latest(&outcome.run_dir).unwrap();
    assert_eq!(checkpoint.progress.status, RunStatus::Aborted);
    assert!(checkpoint.budget.elapsed_seconds >= 5.0);
}

#[test]
fn unrepairable_stage_one_aborts_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = mock_config(dir.path());
    config.stage_budgets = [4, 2, 2, 2];
    scenario_mut(&mut config).rules.push(MockRule {
        role: Some(Role::CodeGeneration),
        contains: "Task: experiment/".into(),
        response: "Plan: fail.\n\n```python\nraise RuntimeError('always broken')\n```\n".into(),
    });
    let outcome = orchestrator::run(&config, &idea(), false).unwrap();
    assert_eq!(outcome.status, RunStatus::Aborted);
    assert!(outcome.tree.nodes().iter().all(|n| n.status == NodeStatus::Buggy));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outcome.run_dir.join(ABORT_REPORT_FILE)).unwrap()).unwrap();
    let leaves = report["buggy_leaves"].as_array().expect("buggy leaves listed");
    assert!(!leaves.is_empty());
    assert!(leaves.iter().all(|l| l["error_trace"].as_str().unwrap().contains("always broken")));
}

#[test]
fn fresh_runs_are_reproducible_and_exportable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = orchestrator::run(&mock_config(a.path()), &idea(), false).unwrap();
    let second = orchestrator::run(&mock_config(b.path()), &idea(), false).unwrap();
    assert_eq!(first.status, RunStatus::Done);
    assert_eq!(first.tree.to_json(), second.tree.to_json());
    assert!(first.run_dir.join(RUN_RECORD_FILE).is_file());

    let json = export(&first.run_dir, ExportFormat::Json).unwrap();
    assert_eq!(json, std::fs::read_to_string(first.run_dir.join(TREE_FILE)).unwrap());
    let dot = export(&first.run_dir, ExportFormat::Dot).unwrap();
    assert_eq!(dot.matches("subgraph cluster_stage").count(), 4);
    let aggregations = first.tree.nodes().iter().filter(|n| n.kind == NodeKind::Aggregation).count();
    assert_eq!(aggregations, 2);
    assert!(dot.contains("style=dashed"));
}

#[test]
fn existing_runs_and_missing_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = mock_config(dir.path());
    assert!(matches!(
        orchestrator::run(&config, &idea(), true),
        Err(RunError::Checkpoint(CheckpointError::MissingCheckpoint(_)))
    ));
    orchestrator::run(&config, &idea(), false).unwrap();
    assert!(matches!(orchestrator::run(&config, &idea(), false), Err(RunError::RunExists(_))));
}

#[test]
fn invalid_ideas_are_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = idea();
    bad.experiments = "  ".into();
    assert!(matches!(
        orchestrator::run(&mock_config(dir.path()), &bad, false),
        Err(RunError::InvalidIdea(_))
    ));
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}
