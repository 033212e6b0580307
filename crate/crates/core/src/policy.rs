//! Search policy: which nodes to expand, how to rank finished nodes, and
//! how child proposals are requested from the code-generation role.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::gateway::{
    extract_fenced_blocks, extract_last_json_block, prose_outside_blocks, Gateway, GatewayError, Message, ModelRequest,
    Role,
};
use crate::metrics::{final_values, primary_metric_value};
use crate::prompts::{fill, EVALUATOR, EXPERIMENT_SYSTEM, EXPERIMENT_TASK};
use crate::stage::{stage_goal, stage_label};
use crate::tree::{ExperimentTree, NodeId, NodeKind, NodeStatus, StageId, TreeNode};

/// Random source used for every stochastic search decision.
pub type SearchRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub debug_probability: f64,
    pub max_debug_depth: u32,
    pub parallelism: usize,
    pub rng_seed: u64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            debug_probability: 1.0,
            max_debug_depth: 3,
            parallelism: 3,
            rng_seed: 0,
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&self.debug_probability) {
            return Err(PolicyError::InvalidPolicy(format!(
                "debug_probability must lie in [0, 1], got {}",
                self.debug_probability
            )));
        }
        if self.max_debug_depth == 0 {
            return Err(PolicyError::InvalidPolicy("max_debug_depth must be positive".into()));
        }
        if self.parallelism == 0 {
            return Err(PolicyError::InvalidPolicy("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node_id: NodeId,
    pub score: f64,
    pub rationale: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("stage {0} has no nodes")]
    EmptyStage(StageId),
    #[error("stage {0} has no non-buggy candidates to rank")]
    NoCandidates(StageId),
    #[error("evaluator unavailable: {0}")]
    EvaluatorUnavailable(GatewayError),
    #[error("code generation failed: {0}")]
    Gateway(GatewayError),
    #[error("completion contained no extractable code block")]
    EmptyCompletion,
    #[error("{kind} child cannot be proposed from a {parent_status} parent")]
    KindMismatch { kind: NodeKind, parent_status: &'static str },
    #[error("invalid selection policy: {0}")]
    InvalidPolicy(String),
}

fn eligible_buggy(tree: &ExperimentTree, stage: StageId, max_debug_depth: u32) -> Vec<NodeId> {
    tree.stage_nodes(stage)
        .filter(|n| n.status == NodeStatus::Buggy && n.kind.is_search() && !tree.has_children(n.id))
        .filter(|n| tree.debug_depth(n.id).is_ok_and(|d| d < max_debug_depth))
        .map(|n| n.id)
        .collect()
}

/// Picks up to `k` distinct nodes to expand in this iteration.
///
/// `ranking` is the best-first order of the stage's non-buggy nodes (see
/// [`rank_non_buggy`]). Each slot draws once from `rng`: with probability
/// `debug_probability` it takes a uniformly chosen eligible buggy leaf,
/// otherwise the best unchosen non-buggy node, falling back to the other
/// pool when the preferred one is empty. When both pools are empty the
/// drafted stage root is returned on its own.
pub fn select_candidates(
    tree: &ExperimentTree,
    stage: StageId,
    policy: &SelectionPolicy,
    ranking: &[NodeScore],
    rng: &mut SearchRng,
    k: usize,
) -> Result<Vec<NodeId>, PolicyError> {
    if tree.stage_nodes(stage).next().is_none() {
        return Err(PolicyError::EmptyStage(stage));
    }
    let mut buggy = eligible_buggy(tree, stage, policy.max_debug_depth);
    let mut good: Vec<NodeId> = ranking
        .iter()
        .map(|s| s.node_id)
        .filter(|id| {
            tree.get(*id)
                .is_some_and(|n| n.stage == stage && n.status == NodeStatus::NonBuggy && n.kind.is_search())
        })
        .collect();
    good.reverse();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let prefer_buggy = rng.gen::<f64>() < policy.debug_probability;
        let pick = if prefer_buggy && !buggy.is_empty() {
            let i = rng.gen_range(0..buggy.len());
            Some(buggy.remove(i))
        } else if let Some(id) = good.pop() {
            Some(id)
        } else if !buggy.is_empty() {
            let i = rng.gen_range(0..buggy.len());
            Some(buggy.remove(i))
        } else {
            None
        };
        match pick {
            Some(id) => chosen.push(id),
            None => break,
        }
    }
    if chosen.is_empty() {
        if let Some(root) = tree.stage_root(stage) {
            if tree.get(root).is_some_and(|n| n.status == NodeStatus::Drafted) {
                chosen.push(root);
            }
        }
    }
    Ok(chosen)
}

/// Summary of one candidate as shown to the evaluator.
fn candidate_json(node: &TreeNode, primary_metric: &str) -> Value {
    json!({
        "id": node.id.0,
        "kind": node.kind.as_str(),
        "plan": node.plan,
        "primary_metric": primary_metric_value(&node.metrics, primary_metric),
        "final_metrics": final_values(&node.metrics),
        "exec_feedback": node.exec_feedback,
        "figures": node.figure_paths.len(),
        "vlm_summary": node.vlm_feedback.as_ref().map(|f| f.summary.clone()),
    })
}

fn sort_scores(scores: &mut [NodeScore]) {
    scores.sort_by(|a, b| {
        let (sa, sb) = (finite_or_min(a.score), finite_or_min(b.score));
        sb.total_cmp(&sa).then(a.node_id.cmp(&b.node_id))
    });
}

fn finite_or_min(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Best-first order of the stage's non-buggy search nodes, judged by the
/// evaluator role. Ties break by lower id. A reply that cannot be parsed
/// falls back to ranking by the primary metric.
pub fn rank_non_buggy(
    tree: &ExperimentTree,
    stage: StageId,
    evaluator: &Gateway,
    primary_metric: &str,
) -> Result<Vec<NodeScore>, PolicyError> {
    let candidates: Vec<&TreeNode> = tree
        .stage_nodes(stage)
        .filter(|n| n.status == NodeStatus::NonBuggy && n.kind.is_search())
        .collect();
    if candidates.is_empty() {
        return Err(PolicyError::NoCandidates(stage));
    }
    let listing: Vec<Value> = candidates.iter().map(|n| candidate_json(n, primary_metric)).collect();
    let listing = serde_json::to_string_pretty(&listing).expect("candidate JSON serializes");
    let request = ModelRequest::new(
        Role::Evaluator,
        vec![Message::user(fill(EVALUATOR, &[("candidates", &listing)]))],
    );
    let reply = evaluator.complete(&request).map_err(PolicyError::EvaluatorUnavailable)?;
    let parsed = extract_last_json_block(&reply.text).and_then(|v| v.get("scores").cloned());
    let mut scores: Vec<NodeScore> = match parsed.as_ref().and_then(Value::as_array) {
        Some(entries) => candidates
            .iter()
            .map(|n| {
                let entry = entries.iter().find(|e| e["id"].as_u64() == Some(n.id.0));
                match entry {
                    Some(e) => NodeScore {
                        node_id: n.id,
                        score: e["score"].as_f64().unwrap_or(f64::NEG_INFINITY),
                        rationale: e["rationale"].as_str().unwrap_or_default().to_string(),
                    },
                    None => NodeScore {
                        node_id: n.id,
                        score: f64::NEG_INFINITY,
                        rationale: "not scored by the evaluator".into(),
                    },
                }
            })
            .collect(),
        None => {
            log::warn!("evaluator reply for stage {stage} was unparseable; ranking by {primary_metric}");
            candidates
                .iter()
                .map(|n| NodeScore {
                    node_id: n.id,
                    score: primary_metric_value(&n.metrics, primary_metric).unwrap_or(f64::NEG_INFINITY),
                    rationale: format!("fallback: ranked by {primary_metric}"),
                })
                .collect()
        }
    };
    sort_scores(&mut scores);
    Ok(scores)
}

/// Context shared by every proposal in a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageContext {
    pub stage: StageId,
    pub idea_text: String,
    pub primary_metric: String,
    pub timeout_minutes: f64,
    /// Canonical fingerprints already used in this stage for the kind being
    /// proposed.
    pub tried_configs: Vec<String>,
    /// Extra advisory lines appended to the task (e.g. escalation hints).
    pub notes: Vec<String>,
    /// Seed attached to the model request so parallel slots differ.
    pub request_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub plan: String,
    pub script: String,
    /// Configuration block for hyperparameter and ablation proposals.
    pub config: Option<Map<String, Value>>,
}

impl Proposal {
    pub fn fingerprint(&self) -> Option<String> {
        self.config.as_ref().map(config_fingerprint)
    }
}

fn parent_section(parent: &TreeNode, kind: NodeKind) -> String {
    if kind == NodeKind::Debug {
        let trace = parent.error_trace.as_deref().unwrap_or("(no trace recorded)");
        let mut out = format!(
            "\nPrevious attempt plan:\n{}\n\nThe previous attempt failed with this error:\n```error\n{}\n```\n\nPrevious script:\n```python\n{}```\n\nFix the failure while keeping the experiment's intent.\n",
            parent.plan,
            trace.trim_end(),
            ensure_newline(&parent.script)
        );
        if let Some(fb) = &parent.exec_feedback {
            out.push_str(&format!("\nFeedback on the failed run:\n{fb}\n"));
        }
        return out;
    }
    let metrics = serde_json::to_string_pretty(&final_values(&parent.metrics)).expect("metrics serialize");
    let mut out = format!(
        "\nParent plan:\n{}\n\nParent final metrics:\n```json\n{}\n```\n",
        parent.plan, metrics
    );
    if let Some(fb) = &parent.exec_feedback {
        out.push_str(&format!("\nExecution feedback on the parent:\n{fb}\n"));
    }
    if let Some(vlm) = &parent.vlm_feedback {
        out.push_str(&format!("\nFigure review of the parent:\n{}\n", vlm.summary));
    }
    out.push_str(&format!("\nParent script:\n```python\n{}```\n", ensure_newline(&parent.script)));
    out
}

fn ensure_newline(s: &str) -> String {
    if s.ends_with('\n') {
        s.to_string()
    } else {
        format!("{s}\n")
    }
}

fn extra_section(kind: NodeKind, ctx: &StageContext) -> String {
    let mut out = String::new();
    let instruction = match kind {
        NodeKind::Draft => "Write a new, independent implementation of the experiment.",
        NodeKind::Debug => "Return the repaired script.",
        NodeKind::Refine => "Improve the parent experiment; describe what changes and why in the plan.",
        NodeKind::Hyperparameter => {
            "Propose one new hyperparameter configuration for the parent experiment. Report it before the script as a ```json block of the form {\"config\": {\"name\": value}}, and do not repeat a configuration that was already tried."
        }
        NodeKind::Ablation => {
            "Propose one ablation of the parent experiment that removes or alters a single component. Report it before the script as a ```json block of the form {\"config\": {\"ablation\": \"component\"}}, and do not repeat an ablation that was already tried."
        }
        NodeKind::Replication | NodeKind::Aggregation => "",
    };
    out.push_str(&format!("\nInstruction:\n{instruction}\n"));
    if matches!(kind, NodeKind::Hyperparameter | NodeKind::Ablation) {
        out.push_str("\nConfigurations already tried:\n```\n");
        for c in &ctx.tried_configs {
            out.push_str(c);
            out.push('\n');
        }
        out.push_str("```\n");
    }
    for note in &ctx.notes {
        out.push_str(&format!("\nNote: {note}\n"));
    }
    out
}

/// Renders the code-generation request for a child of `parent` (or a fresh
/// draft when `parent` is `None`).
pub fn proposal_request(parent: Option<&TreeNode>, kind: NodeKind, ctx: &StageContext) -> ModelRequest {
    let system = fill(
        EXPERIMENT_SYSTEM,
        &[
            ("primary_metric", &ctx.primary_metric),
            ("timeout_minutes", &format_minutes(ctx.timeout_minutes)),
        ],
    );
    let parent_text = parent.map(|p| parent_section(p, kind)).unwrap_or_default();
    let stage = ctx.stage.get().to_string();
    let user = fill(
        EXPERIMENT_TASK,
        &[
            ("node_kind", kind.as_str()),
            ("stage", &stage),
            ("stage_label", stage_label(ctx.stage)),
            ("stage_goal", stage_goal(ctx.stage)),
            ("idea_text", ctx.idea_text.trim_end()),
            ("parent_section", &parent_text),
            ("extra_section", &extra_section(kind, ctx)),
        ],
    );
    ModelRequest::new(Role::CodeGeneration, vec![Message::system(system), Message::user(user)]).seeded(ctx.request_seed)
}

fn format_minutes(m: f64) -> String {
    if m.fract() == 0.0 {
        format!("{m:.0}")
    } else {
        format!("{m:.2}")
    }
}

/// Asks the code-generation role for a child plan and script.
pub fn propose_child(
    parent: Option<&TreeNode>,
    kind: NodeKind,
    ctx: &StageContext,
    gateway: &Gateway,
) -> Result<Proposal, PolicyError> {
    match (parent, kind) {
        (None, NodeKind::Draft) => {}
        (Some(p), NodeKind::Debug) if p.status == NodeStatus::Buggy => {}
        (Some(p), NodeKind::Refine | NodeKind::Hyperparameter | NodeKind::Ablation)
            if p.status == NodeStatus::NonBuggy => {}
        (p, _) => {
            return Err(PolicyError::KindMismatch {
                kind,
                parent_status: p.map(|p| p.status.as_str()).unwrap_or("absent"),
            })
        }
    }
    let request = proposal_request(parent, kind, ctx);
    let reply = gateway.complete(&request).map_err(PolicyError::Gateway)?;
    parse_proposal(&reply.text, kind)
}

/// Splits a completion into plan prose, the script and an optional config.
pub fn parse_proposal(text: &str, kind: NodeKind) -> Result<Proposal, PolicyError> {
    let blocks = extract_fenced_blocks(text);
    let script = blocks
        .iter()
        .rev()
        .find(|b| matches!(b.lang.to_ascii_lowercase().as_str(), "python" | "py" | "python3"))
        .or_else(|| blocks.iter().rev().find(|b| !b.lang.eq_ignore_ascii_case("json")))
        .map(|b| b.body.clone())
        .filter(|s| !s.trim().is_empty())
        .ok_or(PolicyError::EmptyCompletion)?;
    let script = if crate::seed::read_seed(&script).is_some() {
        script
    } else {
        crate::seed::inject_seed(&script, 0)
    };
    let mut plan = prose_outside_blocks(text);
    if plan.is_empty() {
        plan = format!("{kind} proposal without a stated plan");
    }
    let config = if matches!(kind, NodeKind::Hyperparameter | NodeKind::Ablation) {
        extract_last_json_block(text).and_then(|v| v.get("config").and_then(Value::as_object).cloned())
    } else {
        None
    };
    Ok(Proposal { plan, script, config })
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    }
}

/// Canonical `k=v` rendering of a configuration, keys sorted.
pub fn config_fingerprint(config: &Map<String, Value>) -> String {
    let mut pairs: Vec<String> = config
        .iter()
        .map(|(k, v)| format!("{}={}", k.trim(), render_value(v)))
        .collect();
    pairs.sort();
    pairs.join(",")
}

/// Sorts the comma-separated pairs of a fingerprint.
pub fn canonicalize_fingerprint(fingerprint: &str) -> String {
    let mut pairs: Vec<&str> = fingerprint.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    pairs.sort_unstable();
    pairs.join(",")
}

pub fn is_duplicate_config(stage_history: &BTreeSet<String>, candidate: &str) -> bool {
    let candidate = canonicalize_fingerprint(candidate);
    stage_history.iter().any(|h| canonicalize_fingerprint(h) == candidate)
}
