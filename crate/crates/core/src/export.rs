//! Tree export from a run directory: canonical JSON or a Graphviz graph
//! with one cluster per stage.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::tree::{ExperimentTree, NodeStatus, StageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Dot,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "dot" => Ok(ExportFormat::Dot),
            other => Err(format!("unknown export format {other:?} (expected json or dot)")),
        }
    }
}

/// The tree of the latest checkpoint in `run_dir`.
pub fn load_tree(run_dir: &Path) -> Result<ExperimentTree, CheckpointError> {
    Checkpoint::latest(run_dir).map(|(_, cp)| cp.tree)
}

pub fn export(run_dir: &Path, format: ExportFormat) -> Result<String, CheckpointError> {
    let tree = load_tree(run_dir)?;
    Ok(match format {
        ExportFormat::Json => tree.to_json(),
        ExportFormat::Dot => to_dot(&tree),
    })
}

fn color(status: NodeStatus) -> &'static str {
    match status {
        NodeStatus::NonBuggy => "palegreen",
        NodeStatus::Buggy => "lightcoral",
        NodeStatus::Running => "lightgoldenrod",
        NodeStatus::Drafted => "lightgray",
    }
}

pub fn to_dot(tree: &ExperimentTree) -> String {
    let mut out = String::from("digraph experiment_tree {\n  rankdir=TB;\n  node [shape=box, style=filled];\n");
    for stage in StageId::ALL {
        let _ = writeln!(out, "  subgraph cluster_stage{} {{", stage.get());
        let _ = writeln!(out, "    label=\"stage {} ({})\";", stage.get(), crate::stage::stage_label(stage));
        for node in tree.stage_nodes(stage) {
            let root = if tree.stage_root(stage) == Some(node.id) { " (root)" } else { "" };
            let _ = writeln!(
                out,
                "    n{} [label=\"{} {}{}\\n{}\", fillcolor={}];",
                node.id.0,
                node.id.0,
                node.kind.as_str(),
                root,
                node.status.as_str(),
                color(node.status)
            );
        }
        out.push_str("  }\n");
    }
    for node in tree.nodes() {
        if let Some(parent) = node.parent_id {
            let _ = writeln!(out, "  n{} -> n{};", parent.0, node.id.0);
        }
        for input in &node.inputs {
            let _ = writeln!(out, "  n{} -> n{} [style=dashed];", input.0, node.id.0);
        }
    }
    for (stage, root) in tree.stage_roots() {
        if let Some(prev) = StageId::new(stage.get().wrapping_sub(1)) {
            if let Some(prev_root) = tree.stage_root(prev) {
                let _ = writeln!(
                    out,
                    "  n{} -> n{} [style=dotted, label=\"next stage\"];",
                    prev_root.0, root.0
                );
            }
        }
    }
    out.push_str("}\n");
    out
}
