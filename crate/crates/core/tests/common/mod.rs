//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use arbor_core::config::{BackendConfig, RunConfig};
use arbor_core::gateway::MockScenario;
use arbor_core::ideation::Idea;
use arbor_core::tree::{Evidence, ExperimentTree, Metrics, NodeId, NodeStatus};

pub fn idea() -> Idea {
    Idea {
        name: "label_noise".into(),
        title: "Label noise and early stopping".into(),
        short_hypothesis: "Early stopping hides most of the damage done by symmetric label noise.".into(),
        related_work: "Work on noisy labels mostly studies large image models.".into(),
        abstract_text: "We measure how validation accuracy degrades under label noise.".into(),
        experiments: "Train a small classifier on two synthetic datasets with increasing noise.".into(),
        risk_factors_and_limitations: "Synthetic data may not transfer.".into(),
    }
}

/// Small mock run: budgets (3,2,2,2), 2 s node timeout, stage-1 drafts
/// crash until a debug child fixes them.
pub fn mock_config(out: &Path) -> RunConfig {
    let mut config = RunConfig::default();
    config.stage_budgets = [3, 2, 2, 2];
    config.budget.per_node_timeout_seconds = 2.0;
    config.output_dir = out.to_path_buf();
    config.backend = BackendConfig::Mock {
        scenario: MockScenario {
            buggy_stage1_drafts: true,
            ..MockScenario::default()
        },
        fixture_dir: None,
        literature_dir: None,
    };
    config
}

pub fn scenario_mut(config: &mut RunConfig) -> &mut MockScenario {
    match &mut config.backend {
        BackendConfig::Mock { scenario, .. } => scenario,
        _ => panic!("not a mock config"),
    }
}

/// Drives a drafted node to a terminal status with valid evidence.
pub fn finish(tree: &mut ExperimentTree, id: NodeId, ok: bool) {
    tree.transition(id, NodeStatus::Running, Evidence::default()).unwrap();
    let evidence = if ok {
        let mut metrics = Metrics::new();
        metrics.insert("val_accuracy".into(), vec![0.5, 0.6]);
        Evidence {
            metrics: Some(metrics),
            figure_paths: Some(vec!["figures/acc.png".into()]),
            ..Evidence::default()
        }
    } else {
        Evidence::failure("Traceback: RuntimeError")
    };
    let status = if ok { NodeStatus::NonBuggy } else { NodeStatus::Buggy };
    tree.transition(id, status, evidence).unwrap();
}

/// Writes one result line straight to stdout so it shows up even when the
/// harness captures test output.
pub fn report(criterion: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let line = format!("{verdict} {criterion}: {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}
