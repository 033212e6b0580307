//! The run coordinator: drives stages 1 to 4 and the writeup, owns the tree
//! and RNG, dispatches proposals and executions to the worker pool, and
//! writes checkpoints, summaries and the final tree.
//!
//! All tree mutations happen here, in node id order, so a run under the
//! mock backend is a deterministic function of its configuration and idea.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::checkpoint::{BudgetUsage, Checkpoint, CheckpointError, Progress, RunStatus, FORMAT_VERSION};
use crate::config::{ConfigError, RunConfig};
use crate::executor::{execute_node, run_pool, JobMode, NodeJob, PipelineError, SandboxConfig, METRICS_DIR};
use crate::gateway::{Gateway, Message, ModelRequest, Role};
use crate::ideation::{Idea, IdeationError};
use crate::metrics::final_values;
use crate::policy::{
    canonicalize_fingerprint, propose_child, rank_non_buggy, select_candidates, NodeScore, PolicyError, Proposal,
    SearchRng, StageContext,
};
use crate::prompts::{fill, SUMMARY_REPORT};
use crate::stage::{
    aggregate, buggy_leaves, check_stage_complete, escalation_suggested, promote_best, seed_next_stage,
    spawn_replications, stage_label, update_stage_evidence, CompletionDecision, StageError, StageState,
};
use crate::tree::{Evidence, ExperimentTree, NodeId, NodeKind, NodeStatus, StageId};
use crate::writeup::{run_writeup, WriteupError, WriteupReport};

pub const WORKSPACES_DIR: &str = "workspaces";
pub const SUMMARIES_DIR: &str = "summaries";
pub const IDEAS_DIR: &str = "ideas";
pub const TREE_FILE: &str = "tree.json";
pub const CONFIG_FILE: &str = "config.json";
pub const RUN_RECORD_FILE: &str = "run.json";
pub const ABORT_REPORT_FILE: &str = "abort_report.json";
const MAX_REPROPOSALS: u64 = 2;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid idea: {0}")]
    InvalidIdea(#[from] IdeationError),
    #[error("run directory {0} already holds a run; resume it or choose another output directory")]
    RunExists(PathBuf),
    #[error("model gateway failure: {0}")]
    Gateway(String),
    #[error("sandbox failure: {0}")]
    Sandbox(String),
    #[error("tree error: {0}")]
    Tree(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<PipelineError> for RunError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Sandbox { .. } => RunError::Sandbox(e.to_string()),
            PipelineError::Gateway { .. } => RunError::Gateway(e.to_string()),
        }
    }
}

impl From<PolicyError> for RunError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Gateway(_) | PolicyError::EvaluatorUnavailable(_) => RunError::Gateway(e.to_string()),
            other => RunError::Tree(other.to_string()),
        }
    }
}

impl From<crate::tree::TreeError> for RunError {
    fn from(e: crate::tree::TreeError) -> Self {
        RunError::Tree(e.to_string())
    }
}

/// Internal control flow: stop requests travel alongside real errors.
enum Interrupt {
    /// The test hook asked the run to stop right after a checkpoint.
    Halt,
    /// The run was aborted; status and checkpoint are already recorded.
    Abort,
    Fail(RunError),
}

impl<E: Into<RunError>> From<E> for Interrupt {
    fn from(e: E) -> Self {
        Interrupt::Fail(e.into())
    }
}

type Step<T = ()> = Result<T, Interrupt>;

/// The persistent record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub checkpoint_path: Option<PathBuf>,
    pub status: RunStatus,
    pub reason: Option<String>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub status: RunStatus,
    pub reason: Option<String>,
    /// True when the run stopped at the checkpoint test hook.
    pub halted: bool,
    pub tree: ExperimentTree,
    pub stages: Vec<StageState>,
    pub writeup: Option<WriteupReport>,
}

pub fn run_id(idea: &Idea, seed: u64) -> String {
    format!("{}-s{seed}", idea.name)
}

pub fn run_dir(config: &RunConfig, idea: &Idea) -> PathBuf {
    config.output_dir.join(run_id(idea, config.seed))
}

/// Starts a fresh run, or resumes from the latest checkpoint, and drives it
/// to completion, abort or the checkpoint halt hook.
pub fn run(config: &RunConfig, idea: &Idea, resume: bool) -> Result<RunOutcome, RunError> {
    let orchestrator = if resume {
        Orchestrator::resume(config, idea)?
    } else {
        Orchestrator::start(config, idea)?
    };
    orchestrator.drive()
}

struct Orchestrator<'a> {
    config: &'a RunConfig,
    idea: Idea,
    gateway: Gateway,
    sandbox: SandboxConfig,
    run_dir: PathBuf,
    cp: Checkpoint,
    session_start: Instant,
    base_elapsed: f64,
    last_checkpoint: Option<PathBuf>,
    writeup: Option<WriteupReport>,
}

impl<'a> Orchestrator<'a> {
    fn start(config: &'a RunConfig, idea: &Idea) -> Result<Self, RunError> {
        config.validate()?;
        idea.validate()?;
        let run_dir = run_dir(config, idea);
        if run_dir.join(crate::checkpoint::CHECKPOINT_DIR).exists() {
            return Err(RunError::RunExists(run_dir));
        }
        std::fs::create_dir_all(run_dir.join(IDEAS_DIR))?;
        std::fs::write(run_dir.join(CONFIG_FILE), config.to_json())?;
        std::fs::write(
            run_dir.join(IDEAS_DIR).join(format!("{}.json", idea.name)),
            serde_json::to_string_pretty(idea).expect("idea serializes"),
        )?;
        let cp = Checkpoint {
            format_version: FORMAT_VERSION,
            tree: ExperimentTree::new(config.policy.max_debug_depth),
            stages: StageId::ALL
                .iter()
                .zip(config.stage_budgets)
                .map(|(s, b)| StageState::new(*s, b))
                .collect(),
            rng_state: SearchRng::seed_from_u64(config.seed ^ config.policy.rng_seed),
            budget: BudgetUsage::default(),
            progress: Progress {
                run_id: run_id(idea, config.seed),
                status: RunStatus::Stage1,
                reason: None,
            },
        };
        Self::assemble(config, idea, run_dir, cp)
    }

    fn resume(config: &'a RunConfig, idea: &Idea) -> Result<Self, RunError> {
        config.validate()?;
        idea.validate()?;
        let run_dir = run_dir(config, idea);
        let (path, cp) = Checkpoint::latest(&run_dir)?;
        log::info!("resuming {} from {}", cp.progress.run_id, path.display());
        let mut me = Self::assemble(config, idea, run_dir, cp)?;
        me.base_elapsed = me.cp.budget.elapsed_seconds;
        me.last_checkpoint = Some(path);
        Ok(me)
    }

    fn assemble(config: &'a RunConfig, idea: &Idea, run_dir: PathBuf, cp: Checkpoint) -> Result<Self, RunError> {
        Ok(Orchestrator {
            config,
            idea: idea.clone(),
            gateway: config.gateway()?,
            sandbox: config.effective_sandbox(),
            run_dir,
            cp,
            session_start: Instant::now(),
            base_elapsed: 0.0,
            last_checkpoint: None,
            writeup: None,
        })
    }

    fn drive(mut self) -> Result<RunOutcome, RunError> {
        let mut halted = false;
        loop {
            let step = match self.cp.progress.status {
                RunStatus::Ideation => {
                    self.cp.progress.status = RunStatus::Stage1;
                    Ok(())
                }
                RunStatus::Stage1 | RunStatus::Stage2 | RunStatus::Stage3 | RunStatus::Stage4 => {
                    let k = self.cp.progress.status.stage().expect("stage status");
                    self.run_stage(StageId::new(k).expect("valid stage"))
                }
                RunStatus::Writeup => self.run_writeup_phase(),
                RunStatus::Done | RunStatus::Aborted => break,
            };
            match step {
                Ok(()) => {}
                Err(Interrupt::Halt) => {
                    halted = true;
                    break;
                }
                Err(Interrupt::Abort) => break,
                Err(Interrupt::Fail(e)) => return Err(e),
            }
        }
        Ok(RunOutcome {
            run_id: self.cp.progress.run_id.clone(),
            run_dir: self.run_dir,
            status: self.cp.progress.status,
            reason: self.cp.progress.reason.clone(),
            halted,
            tree: self.cp.tree,
            stages: self.cp.stages,
            writeup: self.writeup,
        })
    }

    fn elapsed(&self) -> f64 {
        self.base_elapsed + self.session_start.elapsed().as_secs_f64()
    }

    fn stage_state(&mut self, stage: StageId) -> &mut StageState {
        &mut self.cp.stages[usize::from(stage.get() - 1)]
    }

    fn workspace(&self, id: NodeId) -> PathBuf {
        self.run_dir.join(WORKSPACES_DIR).join(format!("node-{}", id.0))
    }

    fn write_tree(&self) -> std::io::Result<()> {
        std::fs::write(self.run_dir.join(TREE_FILE), self.cp.tree.to_json())
    }

    /// Writes a checkpoint and the run record; honours the halt hook.
    fn checkpoint(&mut self) -> Step {
        self.cp.budget.elapsed_seconds = self.elapsed();
        self.cp.budget.checkpoints_written += 1;
        let path = self.cp.write(&self.run_dir)?;
        self.write_tree()?;
        let record = RunRecord {
            run_id: self.cp.progress.run_id.clone(),
            config: self.config.clone(),
            checkpoint_path: path.strip_prefix(&self.run_dir).ok().map(Path::to_path_buf),
            status: self.cp.progress.status,
            reason: self.cp.progress.reason.clone(),
        };
        std::fs::write(
            self.run_dir.join(RUN_RECORD_FILE),
            serde_json::to_string_pretty(&record).expect("record serializes"),
        )?;
        self.last_checkpoint = Some(path);
        if self.config.halt_after_checkpoints == Some(self.cp.budget.checkpoints_written) {
            return Err(Interrupt::Halt);
        }
        Ok(())
    }

    /// Records the abort, writes a checkpoint and stops the run.
    fn abort(&mut self, reason: String, report: Value) -> Step {
        log::error!("run aborted: {reason}");
        self.cp.progress.status = RunStatus::Aborted;
        self.cp.progress.reason = Some(reason.clone());
        let mut report = report;
        report["reason"] = json!(reason);
        std::fs::write(
            self.run_dir.join(ABORT_REPORT_FILE),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
        match self.checkpoint() {
            Ok(()) | Err(Interrupt::Halt) => Err(Interrupt::Abort),
            Err(e) => Err(e),
        }
    }

    fn check_wall_clock(&mut self) -> Step {
        let elapsed = self.elapsed();
        let limit = self.config.budget.max_wall_clock_seconds;
        if elapsed > limit {
            let stage = self.cp.progress.status.stage();
            return self.abort(
                format!("wall-clock limit of {limit} s exceeded after {elapsed:.1} s"),
                json!({ "stage": stage, "elapsed_seconds": elapsed }),
            );
        }
        Ok(())
    }

    fn rank(&self, stage: StageId) -> Result<Vec<NodeScore>, RunError> {
        match rank_non_buggy(&self.cp.tree, stage, &self.gateway, &self.config.primary_metric) {
            Ok(r) => Ok(r),
            Err(PolicyError::NoCandidates(_)) => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    fn run_stage(&mut self, stage: StageId) -> Step {
        if stage.get() == 1 && self.cp.tree.stage_root(stage).is_none() {
            let created = self.add_drafts(stage, 1)?;
            self.cp.tree.set_stage_root(stage, created[0])?;
        }
        loop {
            self.check_wall_clock()?;
            let ranking = self.rank(stage)?;
            let criteria = &self.config.criteria;
            let mut state = self.stage_state(stage).clone();
            update_stage_evidence(&mut state, &self.cp.tree, &ranking, criteria);
            let decision = check_stage_complete(&state, &self.cp.tree, criteria, &self.config.budget);
            if decision == CompletionDecision::CompleteWithEscalationHint {
                state.escalation_hint = true;
            }
            *self.stage_state(stage) = state.clone();
            if decision.is_complete() {
                break;
            }
            let slots = (self.config.policy.parallelism as u32).min(state.remaining()) as usize;
            let used_before = state.nodes_used;
            let mut pending = self.drafted(stage);
            if pending.is_empty() {
                let chosen = select_candidates(
                    &self.cp.tree,
                    stage,
                    &self.config.policy,
                    &ranking,
                    &mut self.cp.rng_state,
                    slots,
                )?;
                self.expand(stage, &chosen)?;
                pending = self.drafted(stage);
            }
            if pending.is_empty() && stage.get() == 1 {
                log::info!("stage 1 has no expandable node; drafting {slots} new implementation(s)");
                self.add_drafts(stage, slots)?;
                pending = self.drafted(stage);
            }
            if pending.is_empty() && self.stage_state(stage).nodes_used == used_before {
                log::warn!("stage {stage} cannot expand further; closing it early");
                break;
            }
            self.execute(pending, true)?;
        }
        self.complete_stage(stage)
    }

    fn drafted(&self, stage: StageId) -> Vec<NodeId> {
        self.cp
            .tree
            .stage_nodes(stage)
            .filter(|n| n.status == NodeStatus::Drafted && n.kind.is_search())
            .map(|n| n.id)
            .collect()
    }

    fn context(&self, stage: StageId, slot: usize, attempt: u64, tried: &BTreeSet<String>) -> StageContext {
        let mut notes = Vec::new();
        if stage.get() == 3
            && escalation_suggested(stage, &self.cp.tree, &self.config.criteria, &self.config.budget)
        {
            notes.push(format!(
                "Experiments in this stage finish far below the {:.0}-minute limit; consider increasing the scale or complexity of the experiments.",
                self.config.budget.per_node_timeout_seconds / 60.0
            ));
        }
        StageContext {
            stage,
            idea_text: self.idea.to_text(),
            primary_metric: self.config.primary_metric.clone(),
            timeout_minutes: self.config.budget.per_node_timeout_seconds / 60.0,
            tried_configs: tried.iter().cloned().collect(),
            notes,
            request_seed: ((self.cp.tree.len() as u64) << 8) | ((slot as u64) << 2) | attempt,
        }
    }

    fn child_kind(stage: StageId, parent_status: NodeStatus) -> NodeKind {
        if parent_status == NodeStatus::Buggy {
            return NodeKind::Debug;
        }
        match stage.get() {
            2 => NodeKind::Hyperparameter,
            4 => NodeKind::Ablation,
            _ => NodeKind::Refine,
        }
    }

    fn tried_configs(&self, stage: StageId) -> BTreeSet<String> {
        self.cp
            .tree
            .stage_nodes(stage)
            .filter_map(|n| n.config_fingerprint.clone())
            .collect()
    }

    fn propose_all(
        &self,
        requests: Vec<(Option<NodeId>, NodeKind, StageContext)>,
    ) -> Vec<Result<Proposal, PolicyError>> {
        let tree = &self.cp.tree;
        let gateway = &self.gateway;
        run_pool(requests, self.config.policy.parallelism, |(parent, kind, ctx)| {
            propose_child(parent.and_then(|p| tree.get(p)), kind, &ctx, gateway)
        })
    }

    /// Adds one node per proposal result. A proposal without code becomes an
    /// immediately buggy node so the failure is recorded and budgeted.
    fn add_proposed(
        &mut self,
        stage: StageId,
        parent: Option<NodeId>,
        kind: NodeKind,
        result: Result<Proposal, PolicyError>,
    ) -> Result<Option<NodeId>, RunError> {
        let id = match result {
            Ok(p) => {
                let id = self.cp.tree.add_node(parent, kind, p.plan.clone(), p.script.clone(), stage)?;
                if let Some(fp) = p.fingerprint() {
                    self.cp.tree.set_config_fingerprint(id, canonicalize_fingerprint(&fp))?;
                }
                id
            }
            Err(PolicyError::EmptyCompletion) => {
                let id = self.cp.tree.add_node(parent, kind, "(no plan)", "", stage)?;
                self.cp.tree.transition(id, NodeStatus::Running, Evidence::default())?;
                self.cp.tree.transition(
                    id,
                    NodeStatus::Buggy,
                    Evidence::failure("code generation returned no code block"),
                )?;
                self.cp.budget.terminations += 1;
                id
            }
            Err(e) => return Err(e.into()),
        };
        self.stage_state(stage).nodes_used += 1;
        Ok(Some(id))
    }

    fn add_drafts(&mut self, stage: StageId, count: usize) -> Result<Vec<NodeId>, RunError> {
        let tried = BTreeSet::new();
        let requests = (0..count)
            .map(|slot| (None, NodeKind::Draft, self.context(stage, slot, 0, &tried)))
            .collect();
        let mut created = Vec::new();
        for result in self.propose_all(requests) {
            if let Some(id) = self.add_proposed(stage, None, NodeKind::Draft, result)? {
                created.push(id);
            }
        }
        Ok(created)
    }

    /// Proposes one child per chosen parent. Configuration-bearing kinds
    /// that repeat a tried configuration are re-proposed up to twice, then
    /// the slot is skipped.
    fn expand(&mut self, stage: StageId, chosen: &[NodeId]) -> Result<(), RunError> {
        let mut tried = self.tried_configs(stage);
        let plan: Vec<(NodeId, NodeKind)> = chosen
            .iter()
            .map(|id| {
                let status = self.cp.tree.get(*id).map(|n| n.status).unwrap_or(NodeStatus::Buggy);
                (*id, Self::child_kind(stage, status))
            })
            .collect();
        let requests = plan
            .iter()
            .enumerate()
            .map(|(slot, (parent, kind))| (Some(*parent), *kind, self.context(stage, slot, 0, &tried)))
            .collect();
        let results = self.propose_all(requests);
        for (slot, ((parent, kind), mut result)) in plan.into_iter().zip(results).enumerate() {
            let mut attempt = 0;
            loop {
                let fingerprint = match &result {
                    Ok(p) if matches!(kind, NodeKind::Hyperparameter | NodeKind::Ablation) => {
                        p.fingerprint().map(|f| canonicalize_fingerprint(&f))
                    }
                    _ => None,
                };
                let duplicate = fingerprint.as_ref().is_some_and(|f| tried.contains(f));
                if !duplicate {
                    if let Some(f) = fingerprint {
                        tried.insert(f);
                    }
                    break;
                }
                attempt += 1;
                if attempt > MAX_REPROPOSALS {
                    log::warn!("stage {stage} slot {slot}: configuration repeated after {MAX_REPROPOSALS} re-proposals; slot skipped");
                    result = Err(PolicyError::InvalidPolicy("duplicate configuration".into()));
                    break;
                }
                let ctx = self.context(stage, slot, attempt, &tried);
                result = propose_child(self.cp.tree.get(parent), kind, &ctx, &self.gateway);
            }
            if matches!(&result, Err(PolicyError::InvalidPolicy(_))) {
                continue;
            }
            self.add_proposed(stage, Some(parent), kind, result)?;
        }
        Ok(())
    }

    fn job(&self, id: NodeId, mode: JobMode) -> NodeJob {
        let node = self.cp.tree.get(id).expect("job node exists");
        let viz_script = match node.kind {
            NodeKind::Replication | NodeKind::Aggregation => node.viz_script.clone(),
            _ => None,
        };
        NodeJob {
            node_id: id,
            plan: node.plan.clone(),
            script: node.script.clone(),
            viz_script,
            workspace: self.workspace(id),
            path_base: self.run_dir.clone(),
            mode,
        }
    }

    /// Runs drafted nodes on the worker pool and applies the completions in
    /// id order. Periodic checkpoints are taken only when `periodic` is set.
    fn execute(&mut self, ids: Vec<NodeId>, periodic: bool) -> Step {
        self.execute_jobs(ids.into_iter().map(|id| (id, JobMode::Experiment)).collect(), periodic)
    }

    fn execute_jobs(&mut self, jobs: Vec<(NodeId, JobMode)>, periodic: bool) -> Step {
        if jobs.is_empty() {
            return Ok(());
        }
        let mut built = Vec::with_capacity(jobs.len());
        for (id, mode) in jobs {
            self.cp.tree.transition(id, NodeStatus::Running, Evidence::default())?;
            built.push(self.job(id, mode));
        }
        let sandbox = &self.sandbox;
        let gateway = &self.gateway;
        let results = run_pool(built, self.config.policy.parallelism, |job| {
            execute_node(&job, sandbox, gateway)
        });
        let before = self.cp.budget.terminations;
        let mut completions = Vec::new();
        for r in results {
            completions.push(r?);
        }
        completions.sort_by_key(|c| c.node_id);
        for c in completions {
            self.cp.tree.transition(c.node_id, c.status, c.evidence)?;
            self.cp.budget.terminations += 1;
        }
        let every = u64::from(self.config.checkpoint_every);
        if periodic && before / every != self.cp.budget.terminations / every {
            self.checkpoint()?;
        }
        Ok(())
    }

    /// The node whose workspace holds the files for `id`: stage roots after
    /// stage 1 are copies of the previous stage's best node.
    fn materialized(&self, id: NodeId) -> NodeId {
        let mut current = id;
        loop {
            let Some(node) = self.cp.tree.get(current) else { return current };
            let is_copy = node.parent_id.is_none()
                && node.stage.get() > 1
                && self.cp.tree.stage_root(node.stage) == Some(current);
            if !is_copy {
                return current;
            }
            match self.cp.stages[usize::from(node.stage.get() - 2)].best_node {
                Some(source) => current = source,
                None => return current,
            }
        }
    }

    fn complete_stage(&mut self, stage: StageId) -> Step {
        let mut state = self.stage_state(stage).clone();
        let best = match promote_best(&mut state, &self.cp.tree, &self.gateway, &self.config.primary_metric) {
            Ok(best) => best,
            Err(StageError::NoViableNode { stage, buggy_leaves }) => {
                let leaves: Vec<Value> = buggy_leaves
                    .iter()
                    .filter_map(|id| self.cp.tree.get(*id))
                    .map(|n| {
                        json!({
                            "id": n.id,
                            "kind": n.kind.as_str(),
                            "debug_depth": self.cp.tree.debug_depth(n.id).unwrap_or(0),
                            "error_trace": n.error_trace,
                        })
                    })
                    .collect();
                return self.abort(
                    format!("stage {stage} ended without a viable node"),
                    json!({ "stage": stage.get(), "buggy_leaves": leaves }),
                );
            }
            Err(StageError::Policy(e)) => return Err(RunError::from(e).into()),
            Err(e) => return Err(RunError::Tree(e.to_string()).into()),
        };
        state.completed = true;
        *self.stage_state(stage) = state;

        let aggregation = if self.config.criteria.replicate_after.contains(&stage.get()) {
            self.replicate(best)?
        } else {
            None
        };
        self.write_summary(stage, best, aggregation)?;

        match stage.next() {
            Some(next) => {
                seed_next_stage(&mut self.cp.tree, best, next).map_err(|e| RunError::Tree(e.to_string()))?;
                self.stage_state(next).nodes_used = 1;
                self.cp.progress.status = RunStatus::for_stage(next.get());
            }
            None => {
                self.cp.progress.status = RunStatus::Writeup;
            }
        }
        self.checkpoint()
    }

    /// Replicates `best` with fresh seeds and aggregates the non-buggy
    /// replicas; returns the aggregation node and whether std was omitted.
    fn replicate(&mut self, best: NodeId) -> Step<Option<(NodeId, bool)>> {
        let n = self.config.budget.replication_count;
        let ids = spawn_replications(&mut self.cp.tree, best, n, self.config.seed)
            .map_err(|e| RunError::Tree(e.to_string()))?;
        self.execute(ids.clone(), false)?;
        match aggregate(&mut self.cp.tree, best, &ids, &self.gateway) {
            Ok(plan) => {
                self.execute_jobs(
                    vec![(
                        plan.node_id,
                        JobMode::AggregationOnly {
                            metrics: plan.metrics.clone(),
                        },
                    )],
                    false,
                )?;
                Ok(Some((plan.node_id, plan.std_omitted)))
            }
            Err(StageError::InsufficientReplicas { available }) => {
                log::warn!("no aggregation for node {best}: {available} non-buggy replicas");
                Ok(None)
            }
            Err(StageError::Policy(e)) => Err(RunError::from(e).into()),
            Err(e) => Err(RunError::Tree(e.to_string()).into()),
        }
    }

    fn npy_files(&self, id: NodeId) -> Vec<String> {
        let source = self.materialized(id);
        let Some(node) = self.cp.tree.get(source) else {
            return Vec::new();
        };
        node.metrics
            .keys()
            .map(|name| format!("../{WORKSPACES_DIR}/node-{}/{METRICS_DIR}/{name}.npy", source.0))
            .collect()
    }

    fn write_summary(&mut self, stage: StageId, best: NodeId, aggregation: Option<(NodeId, bool)>) -> Step {
        let node = self.cp.tree.node(best)?.clone();
        let finals = final_values(&node.metrics);
        let finals_text = serde_json::to_string_pretty(&finals).expect("metrics serialize");
        let stage_num = stage.get().to_string();
        let prompt = fill(
            SUMMARY_REPORT,
            &[
                ("stage", &stage_num),
                ("stage_label", stage_label(stage)),
                ("plan", &node.plan),
                ("final_metrics", &finals_text),
            ],
        );
        let summary = self
            .gateway
            .complete(&ModelRequest::new(Role::SummaryReport, vec![Message::user(prompt)]))
            .map_err(|e| RunError::Gateway(e.to_string()))?
            .text
            .trim()
            .to_string();
        let mut npy = self.npy_files(best);
        let replication = aggregation.and_then(|(agg, std_omitted)| {
            let agg_node = self.cp.tree.get(agg)?;
            if agg_node.status == NodeStatus::NonBuggy {
                npy.extend(self.npy_files(agg));
            }
            Some(json!({
                "aggregation_node": agg,
                "status": agg_node.status.as_str(),
                "replicas": agg_node.inputs,
                "std_omitted": std_omitted,
                "final_metrics": final_values(&agg_node.metrics),
                "figures": agg_node.figure_paths,
            }))
        });
        let doc = json!({
            "stage": stage.get(),
            "stage_label": stage_label(stage),
            "best_node": best,
            "plan": node.plan,
            "summary": summary,
            "final_metrics": finals,
            "exp_results_npy_files": npy,
            "figures": self.cp.tree.get(self.materialized(best)).map(|n| n.figure_paths.clone()),
            "replication": replication,
        });
        let dir = self.run_dir.join(SUMMARIES_DIR);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(
            dir.join(format!("stage{}.json", stage.get())),
            serde_json::to_string_pretty(&doc).expect("summary serializes"),
        )?;
        Ok(())
    }

    fn run_writeup_phase(&mut self) -> Step {
        self.write_tree()?;
        let mut summaries = Vec::new();
        for stage in StageId::ALL {
            let path = self.run_dir.join(SUMMARIES_DIR).join(format!("stage{}.json", stage.get()));
            let text = std::fs::read_to_string(&path)?;
            summaries.push(serde_json::from_str::<Value>(&text).map_err(std::io::Error::other)?);
        }
        match run_writeup(
            &self.run_dir,
            &self.idea,
            &summaries,
            &self.config.writeup,
            &self.sandbox,
            &self.gateway,
        ) {
            Ok(report) => {
                self.writeup = Some(report);
                self.cp.progress.status = RunStatus::Done;
                match self.checkpoint() {
                    Ok(()) | Err(Interrupt::Halt) => Ok(()),
                    Err(e) => Err(e),
                }
            }
            Err(WriteupError::Gateway(e)) => Err(RunError::Gateway(e.to_string()).into()),
            Err(e) => self.abort(format!("writeup failed: {e}"), json!({ "phase": "writeup" })),
        }
    }
}

/// Stage-level diagnostics for a finished or aborted run.
pub fn stage_report(tree: &ExperimentTree, stages: &[StageState]) -> Vec<Value> {
    stages
        .iter()
        .map(|s| {
            json!({
                "stage": s.stage.get(),
                "label": s.label,
                "nodes_used": s.nodes_used,
                "node_budget": s.node_budget,
                "best_node": s.best_node,
                "completed": s.completed,
                "buggy_leaves": buggy_leaves(tree, s.stage),
            })
        })
        .collect()
}
