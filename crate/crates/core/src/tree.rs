//! Experiment tree: node identity, parentage, kinds, status lifecycle and
//! the per-node evidence record.
//!
//! The tree is mutated by a single coordinator. Workers only ever see
//! cloned snapshots of individual nodes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::review::VlmFeedback;

/// Default bound on consecutive debug attempts.
pub const DEFAULT_MAX_DEBUG_DEPTH: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Experiment stage, 1 through 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct StageId(u8);

impl StageId {
    pub const ALL: [StageId; 4] = [StageId(1), StageId(2), StageId(3), StageId(4)];

    pub fn new(stage: u8) -> Option<Self> {
        (1..=4).contains(&stage).then_some(StageId(stage))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn next(self) -> Option<Self> {
        Self::new(self.0 + 1)
    }
}

impl TryFrom<u8> for StageId {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        StageId::new(value).ok_or_else(|| format!("stage must be in 1..=4, got {value}"))
    }
}

impl From<StageId> for u8 {
    fn from(s: StageId) -> u8 {
        s.0
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Draft,
    Debug,
    Refine,
    Hyperparameter,
    Ablation,
    Replication,
    Aggregation,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Draft => "draft",
            NodeKind::Debug => "debug",
            NodeKind::Refine => "refine",
            NodeKind::Hyperparameter => "hyperparameter",
            NodeKind::Ablation => "ablation",
            NodeKind::Replication => "replication",
            NodeKind::Aggregation => "aggregation",
        }
    }

    /// Kinds produced by the search loop (as opposed to post-stage bookkeeping).
    pub fn is_search(self) -> bool {
        !matches!(self, NodeKind::Replication | NodeKind::Aggregation)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Drafted,
    Running,
    Buggy,
    NonBuggy,
}

impl NodeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeStatus::Drafted => "drafted",
            NodeStatus::Running => "running",
            NodeStatus::Buggy => "buggy",
            NodeStatus::NonBuggy => "non_buggy",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, NodeStatus::Buggy | NodeStatus::NonBuggy)
    }

    fn can_become(self, next: NodeStatus) -> bool {
        matches!(
            (self, next),
            (NodeStatus::Drafted, NodeStatus::Running)
                | (NodeStatus::Running, NodeStatus::Buggy)
                | (NodeStatus::Running, NodeStatus::NonBuggy)
        )
    }
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Numeric series keyed by metric name.
pub type Metrics = BTreeMap<String, Vec<f64>>;

/// One candidate experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent_id: Option<NodeId>,
    pub kind: NodeKind,
    pub stage: StageId,
    pub plan: String,
    pub script: String,
    pub error_trace: Option<String>,
    pub runtime_seconds: f64,
    pub metrics: Metrics,
    pub exec_feedback: Option<String>,
    pub viz_script: Option<String>,
    pub figure_paths: Vec<String>,
    pub vlm_feedback: Option<VlmFeedback>,
    pub status: NodeStatus,
    pub seed: Option<u64>,
    pub config_fingerprint: Option<String>,
    /// Replication nodes consolidated by an aggregation node; empty otherwise.
    pub inputs: Vec<NodeId>,
}

/// Evidence merged into a node on a status transition. Absent fields leave
/// the node untouched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evidence {
    pub error_trace: Option<String>,
    pub runtime_seconds: Option<f64>,
    pub metrics: Option<Metrics>,
    pub exec_feedback: Option<String>,
    pub viz_script: Option<String>,
    pub figure_paths: Option<Vec<String>>,
    pub vlm_feedback: Option<VlmFeedback>,
}

impl Evidence {
    pub fn failure(trace: impl Into<String>) -> Self {
        Evidence {
            error_trace: Some(trace.into()),
            ..Default::default()
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("unknown parent node {0}")]
    UnknownParent(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("debug depth {depth} would exceed the maximum of {max}")]
    MaxDebugDepthExceeded { depth: u32, max: u32 },
    #[error("cannot attach a {kind} node to a {parent_status} parent")]
    KindMismatch {
        kind: NodeKind,
        parent_status: &'static str,
    },
    #[error("illegal transition {from} -> {to} on node {node}")]
    IllegalTransition {
        node: NodeId,
        from: NodeStatus,
        to: NodeStatus,
    },
    #[error("transition to {to} on node {node} lacks {missing}")]
    MissingEvidence {
        node: NodeId,
        to: NodeStatus,
        missing: &'static str,
    },
    #[error("child stage {child} differs from parent stage {parent}")]
    StageMismatch { parent: StageId, child: StageId },
    #[error("invalid aggregation input {0}: {1}")]
    InvalidAggregationInput(NodeId, &'static str),
    #[error("node {0} is not a parentless root")]
    NotARoot(NodeId),
    #[error("node {0} is no longer drafted")]
    NotDrafted(NodeId),
}

/// The experiment tree (a forest of per-stage trees).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTree {
    nodes: Vec<TreeNode>,
    stage_roots: BTreeMap<StageId, NodeId>,
    #[serde(skip, default = "default_max_debug_depth")]
    max_debug_depth: u32,
}

fn default_max_debug_depth() -> u32 {
    DEFAULT_MAX_DEBUG_DEPTH
}

impl Default for ExperimentTree {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_DEBUG_DEPTH)
    }
}

impl ExperimentTree {
    pub fn new(max_debug_depth: u32) -> Self {
        ExperimentTree {
            nodes: Vec::new(),
            stage_roots: BTreeMap::new(),
            max_debug_depth,
        }
    }

    pub fn max_debug_depth(&self) -> u32 {
        self.max_debug_depth
    }

    pub fn set_max_debug_depth(&mut self, max: u32) {
        self.max_debug_depth = max;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn stage_roots(&self) -> &BTreeMap<StageId, NodeId> {
        &self.stage_roots
    }

    pub fn stage_root(&self, stage: StageId) -> Option<NodeId> {
        self.stage_roots.get(&stage).copied()
    }

    pub fn get(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(id.0 as usize)
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode, TreeError> {
        self.get(id).ok_or(TreeError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut TreeNode, TreeError> {
        self.nodes
            .get_mut(id.0 as usize)
            .ok_or(TreeError::UnknownNode(id))
    }

    pub fn stage_nodes(&self, stage: StageId) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(move |n| n.stage == stage)
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(move |n| n.parent_id == Some(id))
    }

    pub fn has_children(&self, id: NodeId) -> bool {
        self.children(id).next().is_some()
    }

    fn next_id(&self) -> NodeId {
        NodeId(self.nodes.len() as u64)
    }

    fn push(&mut self, mut node: TreeNode) -> NodeId {
        let id = self.next_id();
        node.id = id;
        self.nodes.push(node);
        id
    }

    fn blank(parent_id: Option<NodeId>, kind: NodeKind, stage: StageId) -> TreeNode {
        TreeNode {
            id: NodeId(0),
            parent_id,
            kind,
            stage,
            plan: String::new(),
            script: String::new(),
            error_trace: None,
            runtime_seconds: 0.0,
            metrics: Metrics::new(),
            exec_feedback: None,
            viz_script: None,
            figure_paths: Vec::new(),
            vlm_feedback: None,
            status: NodeStatus::Drafted,
            seed: None,
            config_fingerprint: None,
            inputs: Vec::new(),
        }
    }

    /// Adds a search node (draft, debug, refine, hyperparameter or ablation).
    ///
    /// Drafts are parentless; every other kind needs a terminal parent whose
    /// status matches (debug children only under buggy parents).
    pub fn add_node(
        &mut self,
        parent_id: Option<NodeId>,
        kind: NodeKind,
        plan: impl Into<String>,
        script: impl Into<String>,
        stage: StageId,
    ) -> Result<NodeId, TreeError> {
        match (parent_id, kind) {
            (_, NodeKind::Replication | NodeKind::Aggregation) => {
                return Err(TreeError::KindMismatch {
                    kind,
                    parent_status: "any (use the dedicated constructor)",
                })
            }
            (None, NodeKind::Draft) => {}
            (None, _) => {
                return Err(TreeError::KindMismatch {
                    kind,
                    parent_status: "absent",
                })
            }
            (Some(_), NodeKind::Draft) => {
                return Err(TreeError::KindMismatch {
                    kind,
                    parent_status: "present",
                })
            }
            (Some(pid), _) => {
                let parent = self.get(pid).ok_or(TreeError::UnknownParent(pid))?;
                if parent.stage != stage {
                    return Err(TreeError::StageMismatch {
                        parent: parent.stage,
                        child: stage,
                    });
                }
                let wanted = if kind == NodeKind::Debug {
                    NodeStatus::Buggy
                } else {
                    NodeStatus::NonBuggy
                };
                if parent.status != wanted {
                    return Err(TreeError::KindMismatch {
                        kind,
                        parent_status: parent.status.as_str(),
                    });
                }
                if kind == NodeKind::Debug {
                    let depth = self.debug_depth(pid)? + 1;
                    if depth > self.max_debug_depth {
                        return Err(TreeError::MaxDebugDepthExceeded {
                            depth,
                            max: self.max_debug_depth,
                        });
                    }
                }
            }
        }
        let mut node = Self::blank(parent_id, kind, stage);
        node.plan = plan.into();
        node.script = script.into();
        Ok(self.push(node))
    }

    /// Adds a replication of a non-buggy parent: same script with the seed
    /// header rewritten.
    pub fn add_replication(&mut self, parent_id: NodeId, seed: u64) -> Result<NodeId, TreeError> {
        let parent = self.get(parent_id).ok_or(TreeError::UnknownParent(parent_id))?;
        if parent.status != NodeStatus::NonBuggy {
            return Err(TreeError::KindMismatch {
                kind: NodeKind::Replication,
                parent_status: parent.status.as_str(),
            });
        }
        let mut node = Self::blank(Some(parent_id), NodeKind::Replication, parent.stage);
        node.plan = format!("Replicate node {} with seed {seed}", parent.id);
        node.script = crate::seed::inject_seed(&parent.script, seed);
        node.viz_script = parent.viz_script.clone();
        node.seed = Some(seed);
        Ok(self.push(node))
    }

    /// Adds an aggregation node over replication children of `parent_id`.
    pub fn add_aggregation(
        &mut self,
        parent_id: NodeId,
        inputs: &[NodeId],
        plan: impl Into<String>,
        script: impl Into<String>,
    ) -> Result<NodeId, TreeError> {
        let parent = self.get(parent_id).ok_or(TreeError::UnknownParent(parent_id))?;
        let stage = parent.stage;
        for &input in inputs {
            let n = self
                .get(input)
                .ok_or(TreeError::InvalidAggregationInput(input, "unknown node"))?;
            if n.kind != NodeKind::Replication {
                return Err(TreeError::InvalidAggregationInput(input, "not a replication node"));
            }
            if n.parent_id != Some(parent_id) {
                return Err(TreeError::InvalidAggregationInput(input, "not a child of the aggregated parent"));
            }
        }
        let mut node = Self::blank(Some(parent_id), NodeKind::Aggregation, stage);
        node.plan = plan.into();
        node.viz_script = Some(script.into());
        node.inputs = inputs.to_vec();
        Ok(self.push(node))
    }

    pub fn set_stage_root(&mut self, stage: StageId, id: NodeId) -> Result<(), TreeError> {
        let node = self.node(id)?;
        if node.parent_id.is_some() || node.stage != stage {
            return Err(TreeError::NotARoot(id));
        }
        self.stage_roots.insert(stage, id);
        Ok(())
    }

    /// Records the canonical configuration fingerprint of a drafted
    /// hyperparameter or ablation node.
    pub fn set_config_fingerprint(&mut self, id: NodeId, fingerprint: String) -> Result<(), TreeError> {
        let node = self.node_mut(id)?;
        if node.status != NodeStatus::Drafted {
            return Err(TreeError::NotDrafted(id));
        }
        node.config_fingerprint = Some(fingerprint);
        Ok(())
    }

    /// Moves a node along its lifecycle, merging evidence.
    pub fn transition(
        &mut self,
        id: NodeId,
        to: NodeStatus,
        evidence: Evidence,
    ) -> Result<&TreeNode, TreeError> {
        let node = self.node_mut(id)?;
        if !node.status.can_become(to) {
            return Err(TreeError::IllegalTransition {
                node: id,
                from: node.status,
                to,
            });
        }
        match to {
            NodeStatus::Buggy if evidence.error_trace.is_none() && node.error_trace.is_none() => {
                return Err(TreeError::MissingEvidence {
                    node: id,
                    to,
                    missing: "error_trace",
                })
            }
            NodeStatus::NonBuggy => {
                let has_metrics = evidence.metrics.as_ref().map_or(!node.metrics.is_empty(), |m| !m.is_empty());
                if !has_metrics {
                    return Err(TreeError::MissingEvidence {
                        node: id,
                        to,
                        missing: "metrics",
                    });
                }
                let has_figures = evidence
                    .figure_paths
                    .as_ref()
                    .map_or(!node.figure_paths.is_empty(), |f| !f.is_empty());
                if !has_figures {
                    return Err(TreeError::MissingEvidence {
                        node: id,
                        to,
                        missing: "figures",
                    });
                }
                if evidence.error_trace.is_some() {
                    return Err(TreeError::MissingEvidence {
                        node: id,
                        to,
                        missing: "a clean run (error trace supplied)",
                    });
                }
            }
            _ => {}
        }
        let Evidence {
            error_trace,
            runtime_seconds,
            metrics,
            exec_feedback,
            viz_script,
            figure_paths,
            vlm_feedback,
        } = evidence;
        if let Some(v) = error_trace {
            node.error_trace = Some(v);
        }
        if let Some(v) = runtime_seconds {
            node.runtime_seconds = v.max(0.0);
        }
        if let Some(v) = metrics {
            node.metrics = v;
        }
        if let Some(v) = exec_feedback {
            node.exec_feedback = Some(v);
        }
        if let Some(v) = viz_script {
            node.viz_script = Some(v);
        }
        if let Some(v) = figure_paths {
            node.figure_paths = v;
        }
        if let Some(v) = vlm_feedback {
            node.vlm_feedback = Some(v);
        }
        node.status = to;
        Ok(node)
    }

    /// Count of consecutive debug nodes ending at `id` (inclusive).
    pub fn debug_depth(&self, id: NodeId) -> Result<u32, TreeError> {
        let mut depth = 0;
        let mut cursor = Some(self.node(id)?);
        while let Some(node) = cursor {
            if node.kind != NodeKind::Debug {
                break;
            }
            depth += 1;
            cursor = match node.parent_id {
                Some(pid) => Some(self.node(pid)?),
                None => None,
            };
        }
        Ok(depth)
    }

    /// Number of edges between `id` and its root.
    pub fn depth(&self, id: NodeId) -> Result<u32, TreeError> {
        let mut depth = 0;
        let mut node = self.node(id)?;
        while let Some(pid) = node.parent_id {
            node = self.node(pid)?;
            depth += 1;
        }
        Ok(depth)
    }

    /// Checks the structural invariants; returns every violation found.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.id.0 as usize != idx {
                problems.push(format!("node at position {idx} has id {}", node.id));
            }
            if let Some(pid) = node.parent_id {
                match self.get(pid) {
                    None => problems.push(format!("node {} has missing parent {pid}", node.id)),
                    Some(p) if p.id >= node.id => {
                        problems.push(format!("node {} has a parent created after it", node.id))
                    }
                    Some(p) if p.stage > node.stage => {
                        problems.push(format!("node {} precedes its parent's stage", node.id))
                    }
                    _ => {}
                }
            } else if node.kind != NodeKind::Draft {
                problems.push(format!("parentless node {} is a {}", node.id, node.kind));
            }
            if node.error_trace.is_some() && node.status == NodeStatus::NonBuggy {
                problems.push(format!("non_buggy node {} carries an error trace", node.id));
            }
            if let Ok(d) = self.debug_depth(node.id) {
                if d > self.max_debug_depth {
                    problems.push(format!("node {} has debug depth {d}", node.id));
                }
            }
            match node.kind {
                NodeKind::Replication => {
                    let parent = node.parent_id.and_then(|p| self.get(p));
                    match (parent, node.seed) {
                        (Some(p), Some(_)) if crate::seed::same_except_seed(&p.script, &node.script) => {}
                        _ => problems.push(format!("replication node {} is not a seeded copy of its parent", node.id)),
                    }
                }
                NodeKind::Aggregation => {
                    for input in &node.inputs {
                        if self.get(*input).map(|n| n.kind) != Some(NodeKind::Replication) {
                            problems.push(format!("aggregation node {} lists non-replication input {input}", node.id));
                        }
                    }
                }
                _ => {}
            }
        }
        for (stage, root) in &self.stage_roots {
            match self.get(*root) {
                Some(n) if n.parent_id.is_none() && n.stage == *stage => {}
                _ => problems.push(format!("stage {stage} root {root} is not a parentless node of that stage")),
            }
        }
        problems
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
