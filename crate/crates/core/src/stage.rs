//! The four-stage experiment lifecycle: budgets, stopping criteria,
//! promotion of the best node, replications and their aggregation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, Message, ModelRequest, Role};
use crate::metrics::{datasets, mean_curve};
use crate::policy::{rank_non_buggy, NodeScore, PolicyError};
use crate::prompts::{fill, AGGREGATION_NODE};
use crate::tree::{Evidence, ExperimentTree, Metrics, NodeId, NodeKind, NodeStatus, StageId, TreeError};

pub fn stage_label(stage: StageId) -> &'static str {
    match stage.get() {
        1 => "preliminary_investigation",
        2 => "hyperparameter_tuning",
        3 => "research_agenda",
        _ => "ablation_studies",
    }
}

pub fn stage_goal(stage: StageId) -> &'static str {
    match stage.get() {
        1 => "Develop a basic working prototype of the experiment that runs end to end on a simple dataset and saves its metrics.",
        2 => "Tune the hyperparameters of the stage-1 implementation (learning rate, epochs, batch size and similar) until training curves converge, and make the experiment run successfully on at least two datasets.",
        3 => "Carry out the core research agenda described in the idea on top of the tuned baseline, testing the hypothesis directly.",
        _ => "Run ablation studies that remove or alter one component at a time to attribute the observed effects.",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: StageId,
    pub label: String,
    pub node_budget: u32,
    pub nodes_used: u32,
    pub datasets_succeeded: BTreeSet<String>,
    pub convergence_flag: bool,
    pub best_node: Option<NodeId>,
    #[serde(default)]
    pub escalation_hint: bool,
    #[serde(default)]
    pub completed: bool,
}

impl StageState {
    pub fn new(stage: StageId, node_budget: u32) -> Self {
        StageState {
            stage,
            label: stage_label(stage).to_string(),
            node_budget,
            nodes_used: 0,
            datasets_succeeded: BTreeSet::new(),
            convergence_flag: false,
            best_node: None,
            escalation_hint: false,
            completed: false,
        }
    }

    pub fn remaining(&self) -> u32 {
        self.node_budget.saturating_sub(self.nodes_used)
    }

    pub fn budget_exhausted(&self) -> bool {
        self.nodes_used >= self.node_budget
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunBudget {
    pub max_wall_clock_seconds: f64,
    pub per_node_timeout_seconds: f64,
    pub replication_count: u32,
}

impl Default for RunBudget {
    fn default() -> Self {
        RunBudget {
            max_wall_clock_seconds: 15.0 * 3600.0,
            per_node_timeout_seconds: 3600.0,
            replication_count: 3,
        }
    }
}

impl RunBudget {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.per_node_timeout_seconds > 0.0) {
            return Err("per_node_timeout_seconds must be positive".into());
        }
        if self.per_node_timeout_seconds > self.max_wall_clock_seconds {
            return Err("per_node_timeout_seconds must not exceed max_wall_clock_seconds".into());
        }
        if self.replication_count == 0 {
            return Err("replication_count must be positive".into());
        }
        Ok(())
    }
}

/// Tunable stopping-criterion parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageCriteria {
    pub escalation_fraction: f64,
    pub convergence_metric: String,
    pub convergence_window: usize,
    pub convergence_tolerance: f64,
    pub min_datasets: usize,
    /// Stages after which the best node is replicated.
    pub replicate_after: Vec<u8>,
}

impl Default for StageCriteria {
    fn default() -> Self {
        StageCriteria {
            escalation_fraction: 0.25,
            convergence_metric: "val_loss".into(),
            convergence_window: 3,
            convergence_tolerance: 0.05,
            min_datasets: 2,
            replicate_after: vec![3, 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionDecision {
    Continue,
    Complete,
    CompleteWithEscalationHint,
}

impl CompletionDecision {
    pub fn is_complete(self) -> bool {
        self != CompletionDecision::Continue
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StageError {
    #[error("stage {stage} ended without a viable node; buggy leaves: {buggy_leaves:?}")]
    NoViableNode { stage: StageId, buggy_leaves: Vec<NodeId> },
    #[error("aggregation needs at least one non-buggy replica, found {available}")]
    InsufficientReplicas { available: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// True when the median non-buggy runtime of the stage is below the
/// escalation fraction of the per-node timeout.
pub fn escalation_suggested(
    stage: StageId,
    tree: &ExperimentTree,
    criteria: &StageCriteria,
    budget: &RunBudget,
) -> bool {
    let runtimes: Vec<f64> = tree
        .stage_nodes(stage)
        .filter(|n| n.status == NodeStatus::NonBuggy && n.kind.is_search() && n.parent_id.is_some())
        .map(|n| n.runtime_seconds)
        .collect();
    median(&runtimes).is_some_and(|m| m < criteria.escalation_fraction * budget.per_node_timeout_seconds)
}

pub fn check_stage_complete(
    state: &StageState,
    tree: &ExperimentTree,
    criteria: &StageCriteria,
    budget: &RunBudget,
) -> CompletionDecision {
    let complete = match state.stage.get() {
        1 => {
            state.budget_exhausted()
                || tree
                    .stage_nodes(state.stage)
                    .any(|n| n.status == NodeStatus::NonBuggy && n.kind.is_search())
        }
        2 => {
            state.budget_exhausted()
                || (state.convergence_flag && state.datasets_succeeded.len() >= criteria.min_datasets)
        }
        _ => state.budget_exhausted(),
    };
    if !complete {
        CompletionDecision::Continue
    } else if state.stage.get() == 3 && escalation_suggested(state.stage, tree, criteria, budget) {
        CompletionDecision::CompleteWithEscalationHint
    } else {
        CompletionDecision::Complete
    }
}

/// Relative change of the curve over the last `window` points is below
/// `tolerance`.
pub fn detect_convergence(curve: &[f64], window: usize, tolerance: f64) -> bool {
    if window < 2 || curve.len() < window {
        return false;
    }
    let last = curve[curve.len() - 1];
    let first = curve[curve.len() - window];
    if !last.is_finite() || !first.is_finite() {
        return false;
    }
    let scale = first.abs().max(f64::EPSILON);
    (last - first).abs() / scale < tolerance
}

/// Refreshes dataset and convergence evidence from the stage's non-buggy
/// nodes other than the inherited root; `ranking` decides the best
/// candidate whose curve is tested for convergence.
pub fn update_stage_evidence(
    state: &mut StageState,
    tree: &ExperimentTree,
    ranking: &[NodeScore],
    criteria: &StageCriteria,
) {
    let inherited = if state.stage.get() > 1 {
        tree.stage_root(state.stage)
    } else {
        None
    };
    let own = |id: NodeId| {
        Some(id) != inherited
            && tree
                .get(id)
                .is_some_and(|n| n.stage == state.stage && n.status == NodeStatus::NonBuggy && n.kind.is_search())
    };
    for node in tree.stage_nodes(state.stage).filter(|n| own(n.id)) {
        state.datasets_succeeded.extend(datasets(&node.metrics));
    }
    if let Some(best) = ranking.iter().map(|s| s.node_id).find(|id| own(*id)) {
        let curve = mean_curve(&tree.node(best).expect("ranked node exists").metrics, &criteria.convergence_metric);
        state.convergence_flag = detect_convergence(&curve, criteria.convergence_window, criteria.convergence_tolerance);
    }
}

/// Buggy leaves of a stage, for abort diagnostics.
pub fn buggy_leaves(tree: &ExperimentTree, stage: StageId) -> Vec<NodeId> {
    tree.stage_nodes(stage)
        .filter(|n| n.status == NodeStatus::Buggy && !tree.has_children(n.id))
        .map(|n| n.id)
        .collect()
}

/// Ranks the stage with the evaluator and records the winner.
pub fn promote_best(
    state: &mut StageState,
    tree: &ExperimentTree,
    evaluator: &Gateway,
    primary_metric: &str,
) -> Result<NodeId, StageError> {
    let ranking = match rank_non_buggy(tree, state.stage, evaluator, primary_metric) {
        Ok(r) => r,
        Err(PolicyError::NoCandidates(stage)) => {
            return Err(StageError::NoViableNode {
                stage,
                buggy_leaves: buggy_leaves(tree, stage),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let best = ranking[0].node_id;
    state.best_node = Some(best);
    Ok(best)
}

/// Creates the root of `next` as a copy of `best`: same plan, script and
/// evidence, already non-buggy, with no parent.
pub fn seed_next_stage(tree: &mut ExperimentTree, best: NodeId, next: StageId) -> Result<NodeId, StageError> {
    let source = tree.node(best)?.clone();
    let root = tree.add_node(None, NodeKind::Draft, source.plan.clone(), source.script.clone(), next)?;
    tree.transition(root, NodeStatus::Running, Evidence::default())?;
    tree.transition(
        root,
        NodeStatus::NonBuggy,
        Evidence {
            error_trace: None,
            runtime_seconds: Some(source.runtime_seconds),
            metrics: Some(source.metrics.clone()),
            exec_feedback: source.exec_feedback.clone(),
            viz_script: source.viz_script.clone(),
            figure_paths: Some(source.figure_paths.clone()),
            vlm_feedback: source.vlm_feedback.clone(),
        },
    )?;
    tree.set_stage_root(next, root)?;
    Ok(root)
}

/// Adds `n` replications of `best` with seeds `base_seed + 1 ..= base_seed + n`.
pub fn spawn_replications(
    tree: &mut ExperimentTree,
    best: NodeId,
    n: u32,
    base_seed: u64,
) -> Result<Vec<NodeId>, StageError> {
    (1..=u64::from(n))
        .map(|i| tree.add_replication(best, base_seed + i).map_err(StageError::from))
        .collect()
}

/// Element-wise mean and sample standard deviation per shared metric.
///
/// Returns the aggregated metrics (`<m>_mean`, and `<m>_std` when at least
/// two replicas exist) and whether the std had to be omitted.
pub fn summarize_replicas(replicas: &[&Metrics]) -> Result<(Metrics, bool), StageError> {
    if replicas.is_empty() {
        return Err(StageError::InsufficientReplicas { available: 0 });
    }
    let shared: BTreeSet<&String> = replicas[0]
        .keys()
        .filter(|k| replicas.iter().all(|r| r.contains_key(*k)))
        .collect();
    let n = replicas.len() as f64;
    let mut out = Metrics::new();
    for name in shared {
        let len = replicas.iter().map(|r| r[name].len()).min().unwrap_or(0);
        let mean: Vec<f64> = (0..len).map(|i| replicas.iter().map(|r| r[name][i]).sum::<f64>() / n).collect();
        if replicas.len() >= 2 {
            let std: Vec<f64> = (0..len)
                .map(|i| {
                    let ss: f64 = replicas.iter().map(|r| (r[name][i] - mean[i]).powi(2)).sum();
                    (ss / (n - 1.0)).sqrt()
                })
                .collect();
            out.insert(format!("{name}_std"), std);
        }
        out.insert(format!("{name}_mean"), mean);
    }
    Ok((out, replicas.len() < 2))
}

/// An aggregation node created but not yet rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationPlan {
    pub node_id: NodeId,
    pub metrics: Metrics,
    pub std_omitted: bool,
}

/// Creates the aggregation node over the non-buggy replicas of `parent`.
/// The viz script comes from the code-generation role; no experiment runs.
pub fn aggregate(
    tree: &mut ExperimentTree,
    parent: NodeId,
    replicas: &[NodeId],
    gateway: &Gateway,
) -> Result<AggregationPlan, StageError> {
    let good: Vec<NodeId> = replicas
        .iter()
        .copied()
        .filter(|id| tree.get(*id).is_some_and(|n| n.status == NodeStatus::NonBuggy))
        .collect();
    let metric_sets: Vec<&Metrics> = good.iter().map(|id| &tree.node(*id).expect("replica exists").metrics).collect();
    let (metrics, std_omitted) = summarize_replicas(&metric_sets)?;
    let metric_list: String = metrics.keys().map(|k| format!("- metrics/{k}.npy\n")).collect();
    let request = ModelRequest::new(
        Role::CodeGeneration,
        vec![Message::user(fill(AGGREGATION_NODE, &[("metric_list", &metric_list)]))],
    );
    let script = match gateway.complete_code(&request) {
        Ok((_, code)) => code,
        Err(e) => {
            return Err(StageError::Policy(PolicyError::Gateway(e)));
        }
    };
    let plan = if std_omitted {
        format!(
            "Aggregate {} replication(s) of node {parent}: mean only, sample std omitted (InsufficientReplicas)",
            good.len()
        )
    } else {
        format!("Aggregate {} replications of node {parent}: mean and sample std", good.len())
    };
    let node_id = tree.add_aggregation(parent, &good, plan, script)?;
    Ok(AggregationPlan {
        node_id,
        metrics,
        std_omitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(k: u8) -> StageId {
        StageId::new(k).unwrap()
    }

    fn done(tree: &mut ExperimentTree, parent: Option<NodeId>, kind: NodeKind, stage: StageId, runtime: f64) -> NodeId {
        let id = tree.add_node(parent, kind, "p", "SEED = 0\n", stage).unwrap();
        tree.transition(id, NodeStatus::Running, Evidence::default()).unwrap();
        tree.transition(
            id,
            NodeStatus::NonBuggy,
            Evidence {
                runtime_seconds: Some(runtime),
                metrics: Some([("a__val_loss".to_string(), vec![1.0, 0.5, 0.49, 0.48])].into()),
                figure_paths: Some(vec!["x.png".into()]),
                ..Evidence::default()
            },
        )
        .unwrap();
        id
    }

    #[test]
    fn stage_one_completes_on_first_working_node() {
        let mut tree = ExperimentTree::default();
        let mut st = StageState::new(s(1), 21);
        let c = StageCriteria::default();
        let b = RunBudget::default();
        let id = tree.add_node(None, NodeKind::Draft, "p", "s", s(1)).unwrap();
        tree.transition(id, NodeStatus::Running, Evidence::default()).unwrap();
        tree.transition(id, NodeStatus::Buggy, Evidence::failure("x")).unwrap();
        st.nodes_used = 3;
        assert_eq!(check_stage_complete(&st, &tree, &c, &b), CompletionDecision::Continue);
        done(&mut tree, None, NodeKind::Draft, s(1), 1.0);
        st.nodes_used = 4;
        assert_eq!(check_stage_complete(&st, &tree, &c, &b), CompletionDecision::Complete);
    }

    #[test]
    fn stage_two_needs_two_datasets() {
        let tree = ExperimentTree::default();
        let mut st = StageState::new(s(2), 12);
        st.nodes_used = 5;
        st.convergence_flag = true;
        st.datasets_succeeded.insert("a".into());
        let c = StageCriteria::default();
        assert_eq!(check_stage_complete(&st, &tree, &c, &RunBudget::default()), CompletionDecision::Continue);
        st.datasets_succeeded.insert("b".into());
        assert_eq!(check_stage_complete(&st, &tree, &c, &RunBudget::default()), CompletionDecision::Complete);
    }

    #[test]
    fn stage_three_escalation_hint() {
        let mut tree = ExperimentTree::default();
        let root = done(&mut tree, None, NodeKind::Draft, s(3), 0.0);
        tree.set_stage_root(s(3), root).unwrap();
        for _ in 0..11 {
            done(&mut tree, Some(root), NodeKind::Refine, s(3), 300.0);
        }
        let mut st = StageState::new(s(3), 12);
        st.nodes_used = 12;
        let d = check_stage_complete(&st, &tree, &StageCriteria::default(), &RunBudget::default());
        assert_eq!(d, CompletionDecision::CompleteWithEscalationHint);
        st.nodes_used = 11;
        let d = check_stage_complete(&st, &tree, &StageCriteria::default(), &RunBudget::default());
        assert_eq!(d, CompletionDecision::Continue);
    }

    #[test]
    fn sample_std() {
        let a: Metrics = [("m".to_string(), vec![1.0])].into();
        let b: Metrics = [("m".to_string(), vec![2.0])].into();
        let c: Metrics = [("m".to_string(), vec![3.0])].into();
        let (out, omitted) = summarize_replicas(&[&a, &b, &c]).unwrap();
        assert!(!omitted);
        assert_eq!(out["m_mean"], vec![2.0]);
        assert_eq!(out["m_std"], vec![1.0]);
        let (out, omitted) = summarize_replicas(&[&a]).unwrap();
        assert!(omitted);
        assert!(!out.contains_key("m_std"));
        assert_eq!(summarize_replicas(&[]), Err(StageError::InsufficientReplicas { available: 0 }));
    }

    #[test]
    fn replication_seeds() {
        let mut tree = ExperimentTree::default();
        let best = done(&mut tree, None, NodeKind::Draft, s(3), 1.0);
        let reps = spawn_replications(&mut tree, best, 3, 100).unwrap();
        let seeds: Vec<_> = reps.iter().map(|r| tree.node(*r).unwrap().seed.unwrap()).collect();
        assert_eq!(seeds, vec![101, 102, 103]);
        assert!(reps.iter().all(|r| tree.node(*r).unwrap().metrics.is_empty()));
        assert!(spawn_replications(&mut tree, best, 0, 100).unwrap().is_empty());
    }

    #[test]
    fn convergence_rule() {
        assert!(detect_convergence(&[1.0, 0.5, 0.49, 0.48], 3, 0.05));
        assert!(!detect_convergence(&[1.0, 0.5, 0.3], 3, 0.05));
        assert!(!detect_convergence(&[0.5, 0.49], 3, 0.05));
        assert_eq!(median(&[5.0, 1.0, 3.0, 100.0]), Some(4.0));
    }

    #[test]
    fn promotion_and_next_root() {
        let gw = Gateway::mock(0, crate::gateway::MockScenario::default());
        let mut tree = ExperimentTree::default();
        let mut st = StageState::new(s(1), 21);
        assert!(matches!(
            promote_best(&mut st, &tree, &gw, "val_loss"),
            Err(StageError::NoViableNode { .. })
        ));
        let best = done(&mut tree, None, NodeKind::Draft, s(1), 1.0);
        assert_eq!(promote_best(&mut st, &tree, &gw, "val_loss").unwrap(), best);
        let root = seed_next_stage(&mut tree, best, s(2)).unwrap();
        assert_eq!(tree.node(root).unwrap().script, tree.node(best).unwrap().script);
        assert_eq!(tree.stage_root(s(2)), Some(root));
    }
}
