//! The per-node pipeline (execute, read metrics, feedback, plot, review)
//! and the bounded worker pool that runs it.
//!
//! Workers never touch the tree: a job carries everything it needs and the
//! result is a [`NodeCompletion`] the coordinator applies.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::{mpsc, Mutex};

use thiserror::Error;

use super::{
    read_metrics, relative, run_experiment, run_plotting, vlm_gate, write_series, ExecutorError, ExitClass, Manifest,
    MetricEntry, SandboxConfig, METRICS_DIR,
};
use crate::gateway::{Gateway, GatewayError, Message, ModelRequest, Role};
use crate::metrics::final_values;
use crate::prompts::{fill, FEEDBACK, PLOTTING};
use crate::tree::{Evidence, Metrics, NodeId, NodeStatus};

#[derive(Debug, Clone, PartialEq)]
pub enum JobMode {
    /// Run the node's script as a fresh experiment.
    Experiment,
    /// No experiment: write the given aggregated metrics and render them.
    AggregationOnly { metrics: Metrics },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeJob {
    pub node_id: NodeId,
    pub plan: String,
    pub script: String,
    /// Visualization script to reuse; generated when absent.
    pub viz_script: Option<String>,
    pub workspace: PathBuf,
    /// Figure paths are stored relative to this directory.
    pub path_base: PathBuf,
    pub mode: JobMode,
}

/// Terminal status and evidence for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCompletion {
    pub node_id: NodeId,
    pub status: NodeStatus,
    pub evidence: Evidence,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("node {node}: {source}")]
    Sandbox {
        node: NodeId,
        #[source]
        source: ExecutorError,
    },
    #[error("node {node}: model gateway failure: {source}")]
    Gateway {
        node: NodeId,
        #[source]
        source: GatewayError,
    },
}

fn outcome_label(class: ExitClass, trace: Option<&str>) -> String {
    match class {
        ExitClass::Ok => "completed successfully".into(),
        ExitClass::Timeout => "timed out and was killed".into(),
        ExitClass::Error => {
            let last = trace
                .and_then(|t| t.lines().rev().find(|l| !l.trim().is_empty()))
                .unwrap_or("unknown error");
            format!("failed: {last}")
        }
    }
}

fn feedback(
    gateway: &Gateway,
    job: &NodeJob,
    outcome: &str,
    runtime: f64,
    metrics: &Metrics,
) -> Result<String, GatewayError> {
    let finals = serde_json::to_string_pretty(&final_values(metrics)).expect("metrics serialize");
    let prompt = fill(
        FEEDBACK,
        &[
            ("plan", &job.plan),
            ("outcome", outcome),
            ("runtime", &format!("{runtime:.1}")),
            ("final_metrics", &finals),
        ],
    );
    let reply = gateway.complete(&ModelRequest::new(Role::FeedbackAgent, vec![Message::user(prompt)]))?;
    Ok(reply.text.trim().to_string())
}

fn plotting_script(gateway: &Gateway, job: &NodeJob, metric_names: &[String]) -> Result<Option<String>, GatewayError> {
    let metric_list: String = metric_names.iter().map(|m| format!("- {METRICS_DIR}/{m}.npy\n")).collect();
    let script = if job.script.ends_with('\n') {
        job.script.clone()
    } else {
        format!("{}\n", job.script)
    };
    let prompt = fill(
        PLOTTING,
        &[("plan", &job.plan), ("metric_list", &metric_list), ("script", &script)],
    );
    match gateway.complete_code(&ModelRequest::new(Role::CodeGeneration, vec![Message::user(prompt)])) {
        Ok((_, code)) => Ok(Some(code)),
        Err(GatewayError::EmptyCompletion) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs one node end to end. Experiment failures, plotting failures and
/// flagged figures yield a buggy completion; sandbox and gateway failures
/// are errors for the coordinator.
pub fn execute_node(job: &NodeJob, sandbox: &SandboxConfig, gateway: &Gateway) -> Result<NodeCompletion, PipelineError> {
    let node = job.node_id;
    let sandbox_err = |source| PipelineError::Sandbox { node, source };
    let gateway_err = |source| PipelineError::Gateway { node, source };

    let (metrics, runtime, exec_feedback) = match &job.mode {
        JobMode::Experiment => {
            let outcome = run_experiment(&job.script, &job.workspace, sandbox).map_err(sandbox_err)?;
            let label = outcome_label(outcome.exit_class, outcome.error_trace.as_deref());
            if outcome.exit_class != ExitClass::Ok {
                let fb = feedback(gateway, job, &label, outcome.runtime_seconds, &Metrics::new()).map_err(gateway_err)?;
                return Ok(NodeCompletion {
                    node_id: node,
                    status: NodeStatus::Buggy,
                    evidence: Evidence {
                        error_trace: outcome.error_trace,
                        runtime_seconds: Some(outcome.runtime_seconds),
                        exec_feedback: Some(fb),
                        ..Evidence::default()
                    },
                });
            }
            let (metrics, _warnings) = read_metrics(&outcome).map_err(sandbox_err)?;
            let fb = feedback(gateway, job, &label, outcome.runtime_seconds, &metrics).map_err(gateway_err)?;
            (metrics, outcome.runtime_seconds, Some(fb))
        }
        JobMode::AggregationOnly { metrics } => {
            super::prepare_workspace(&job.workspace).map_err(sandbox_err)?;
            let mut entries = Vec::new();
            for (name, series) in metrics {
                let path = job.workspace.join(METRICS_DIR).join(format!("{name}.npy"));
                write_series(&path, series).map_err(|e| sandbox_err(e.into()))?;
                entries.push(MetricEntry {
                    name: name.clone(),
                    path: format!("{METRICS_DIR}/{name}.npy"),
                    length: series.len(),
                });
            }
            Manifest {
                metrics: entries,
                exit_class: Some(ExitClass::Ok),
                ..Manifest::default()
            }
            .store(&job.workspace)
            .map_err(|e| sandbox_err(e.into()))?;
            (metrics.clone(), 0.0, None)
        }
    };

    let names: Vec<String> = metrics.keys().cloned().collect();
    let viz = match &job.viz_script {
        Some(v) => v.clone(),
        None => match plotting_script(gateway, job, &names).map_err(gateway_err)? {
            Some(v) => v,
            None => {
                return Ok(NodeCompletion {
                    node_id: node,
                    status: NodeStatus::Buggy,
                    evidence: Evidence {
                        error_trace: Some("plotting code generation returned no code block".into()),
                        runtime_seconds: Some(runtime),
                        metrics: Some(metrics),
                        exec_feedback,
                        ..Evidence::default()
                    },
                })
            }
        },
    };

    let mut figures = match run_plotting(&viz, &job.workspace, sandbox) {
        Ok(f) => f,
        Err(ExecutorError::PlottingFailure { trace }) => {
            return Ok(NodeCompletion {
                node_id: node,
                status: NodeStatus::Buggy,
                evidence: Evidence {
                    error_trace: Some(format!("plotting failed:\n{trace}")),
                    runtime_seconds: Some(runtime),
                    metrics: Some(metrics),
                    exec_feedback,
                    viz_script: Some(viz),
                    ..Evidence::default()
                },
            })
        }
        Err(e) => return Err(sandbox_err(e)),
    };

    let review = vlm_gate(&mut figures, &job.plan, gateway).map_err(gateway_err)?;
    let figure_paths: Vec<String> = figures.iter().map(|f| relative(&f.path, &job.path_base)).collect();
    let (status, error_trace) = if review.passed {
        (NodeStatus::NonBuggy, None)
    } else {
        (NodeStatus::Buggy, Some(review.summary.clone()))
    };
    Ok(NodeCompletion {
        node_id: node,
        status,
        evidence: Evidence {
            error_trace,
            runtime_seconds: Some(runtime),
            metrics: Some(metrics),
            exec_feedback,
            viz_script: Some(viz),
            figure_paths: Some(figure_paths),
            vlm_feedback: Some(review),
        },
    })
}

/// Runs `work` over `items` on at most `parallelism` threads. Results come
/// back in input order regardless of completion order.
pub fn run_pool<T, R, F>(items: Vec<T>, parallelism: usize, work: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    let queue: Mutex<VecDeque<(usize, T)>> = Mutex::new(items.into_iter().enumerate().collect());
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.max(1).min(n.max(1)) {
            let tx = tx.clone();
            let queue = &queue;
            let work = &work;
            scope.spawn(move || loop {
                let next = queue.lock().expect("queue lock").pop_front();
                let Some((i, item)) = next else { break };
                if tx.send((i, work(item))).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every job reports")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_preserves_order_and_bounds_threads() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let out = run_pool((0..12).collect(), 3, |i: u64| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(5 * (12 - i)));
            live.fetch_sub(1, Ordering::SeqCst);
            i * 2
        });
        assert_eq!(out, (0..12).map(|i| i * 2).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert!(run_pool(Vec::<u8>::new(), 2, |x| x).is_empty());
    }
}
