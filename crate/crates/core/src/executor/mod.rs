//! Sandboxed execution of node scripts.
//!
//! Each node runs in its own working directory:
//! `experiment.py`, `metrics/<name>.npy`, `figures/*.png`, `manifest.json`,
//! `stdout.log` and `stderr.log`. Isolation is process and directory level
//! only. The interpreter runs in its own process group so a timeout can take
//! down the whole process tree.

mod npy;
mod pipeline;
mod process;

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::review::{FigureReview, FigureVerdict, VlmFeedback};
use crate::tree::Metrics;

pub use npy::{read_series, write_series};
pub use pipeline::{execute_node, run_pool, JobMode, NodeCompletion, NodeJob, PipelineError};
pub use process::{descendants, is_alive};

pub const EXPERIMENT_FILE: &str = "experiment.py";
pub const PLOT_FILE: &str = "plot.py";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_DIR: &str = "metrics";
pub const FIGURES_DIR: &str = "figures";
/// Placeholder substituted for the workspace path in stored traces.
pub const WORKSPACE_TOKEN: &str = "<workspace>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// Interpreter command; the script path is appended.
    pub interpreter: Vec<String>,
    /// Environment variables passed through from the parent process.
    pub env_allow: Vec<String>,
    /// When false, proxy and offline variables are set so well-behaved
    /// libraries do not reach the network. This is not a firewall.
    pub allow_network: bool,
    pub output_cap_bytes: usize,
    pub timeout_seconds: f64,
    /// Record 0 s for finished runs (and the limit for timeouts) instead of
    /// wall time so stored trees are reproducible.
    pub deterministic_timing: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            interpreter: vec!["python3".into()],
            env_allow: ["PATH", "HOME", "LANG", "LC_ALL", "PYTHONPATH", "HF_HOME", "HF_DATASETS_CACHE", "TMPDIR"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            allow_network: true,
            output_cap_bytes: 200 * 1024,
            timeout_seconds: 3600.0,
            deterministic_timing: false,
        }
    }
}

impl SandboxConfig {
    fn environment(&self) -> Vec<(String, String)> {
        let mut env: Vec<(String, String)> = self
            .env_allow
            .iter()
            .filter_map(|k| std::env::var(k).ok().map(|v| (k.clone(), v)))
            .collect();
        env.push(("PYTHONUNBUFFERED".into(), "1".into()));
        env.push(("PYTHONHASHSEED".into(), "0".into()));
        env.push(("MPLBACKEND".into(), "Agg".into()));
        if !self.allow_network {
            for (k, v) in [
                ("http_proxy", "http://127.0.0.1:9"),
                ("https_proxy", "http://127.0.0.1:9"),
                ("HTTP_PROXY", "http://127.0.0.1:9"),
                ("HTTPS_PROXY", "http://127.0.0.1:9"),
                ("no_proxy", ""),
                ("HF_HUB_OFFLINE", "1"),
                ("HF_DATASETS_OFFLINE", "1"),
                ("ARBOR_NETWORK_DENIED", "1"),
            ] {
                env.push((k.into(), v.into()));
            }
        }
        env
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_seconds.max(0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitClass {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub path: String,
    pub length: usize,
}

/// Inventory of one execution's artifacts, stored as `manifest.json`.
/// Paths are relative to the workspace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub metrics: Vec<MetricEntry>,
    pub figures: Vec<String>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_class: Option<ExitClass>,
}

impl Manifest {
    pub fn load(workspace: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(workspace.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    fn store(&self, workspace: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(workspace.join(MANIFEST_FILE), text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub exit_class: ExitClass,
    pub error_trace: Option<String>,
    pub runtime_seconds: f64,
    pub metric_files: Vec<PathBuf>,
    pub manifest: Manifest,
    pub stdout_tail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRecord {
    pub path: PathBuf,
    pub caption_hint: Option<String>,
    pub vlm_review: Option<FigureReview>,
    pub content_digest: String,
}

impl FigureRecord {
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(FigureRecord {
            path: path.to_path_buf(),
            caption_hint: None,
            vlm_review: None,
            content_digest: digest_bytes(&bytes),
        })
    }
}

/// Hex SHA-256 of the bytes.
pub fn digest_bytes(bytes: &[u8]) -> String {
    crate::gateway::hex(&Sha256::digest(bytes))
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("sandbox setup failed: {0}")]
    SandboxSetupFailure(String),
    #[error("no parseable metric files")]
    NoMetrics,
    #[error("plotting script failed")]
    PlottingFailure { trace: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

fn prepare_workspace(workspace: &Path) -> Result<(), ExecutorError> {
    if workspace.exists() {
        std::fs::remove_dir_all(workspace)
            .map_err(|e| ExecutorError::SandboxSetupFailure(format!("cannot clear {}: {e}", workspace.display())))?;
    }
    std::fs::create_dir_all(workspace)
        .map_err(|e| ExecutorError::SandboxSetupFailure(format!("cannot create {}: {e}", workspace.display())))
}

/// Reads a log, truncating it in place to the last `cap` bytes.
fn capped_log(path: &Path, cap: usize) -> String {
    let Ok(bytes) = std::fs::read(path) else {
        return String::new();
    };
    if bytes.len() <= cap {
        return String::from_utf8_lossy(&bytes).into_owned();
    }
    let dropped = bytes.len() - cap;
    let mut text = format!("[truncated {dropped} bytes]\n");
    text.push_str(&String::from_utf8_lossy(&bytes[dropped..]));
    let _ = std::fs::write(path, text.as_bytes());
    text
}

/// Trailing traceback of a stderr log, with the workspace path masked.
fn trailing_trace(stderr: &str, workspace: &Path) -> String {
    let start = stderr.rfind("Traceback (most recent call last):");
    let tail = match start {
        Some(i) => &stderr[i..],
        None => {
            let lines: Vec<&str> = stderr.lines().collect();
            let from = lines.len().saturating_sub(40);
            return mask(&lines[from..].join("\n"), workspace);
        }
    };
    mask(tail.trim_end(), workspace)
}

fn mask(text: &str, workspace: &Path) -> String {
    let ws = workspace.display().to_string();
    let mut out = text.replace(&ws, WORKSPACE_TOKEN);
    if let Ok(canon) = workspace.canonicalize() {
        out = out.replace(&canon.display().to_string(), WORKSPACE_TOKEN);
    }
    out
}

fn run_script(
    workspace: &Path,
    file: &str,
    sandbox: &SandboxConfig,
    log_prefix: &str,
) -> Result<(process::Finished, String, String), ExecutorError> {
    let (program, rest) = sandbox
        .interpreter
        .split_first()
        .ok_or_else(|| ExecutorError::SandboxSetupFailure("interpreter command is empty".into()))?;
    let mut args: Vec<String> = rest.to_vec();
    args.push(file.to_string());
    let stdout_path = workspace.join(format!("{log_prefix}stdout.log"));
    let stderr_path = workspace.join(format!("{log_prefix}stderr.log"));
    let finished = process::run_limited(
        program,
        &args,
        workspace,
        &sandbox.environment(),
        &stdout_path,
        &stderr_path,
        sandbox.timeout(),
    )
    .map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ExecutorError::SandboxSetupFailure(format!("interpreter {program:?} not found")),
        _ => ExecutorError::SandboxSetupFailure(format!("cannot launch {program:?}: {e}")),
    })?;
    let stdout = capped_log(&stdout_path, sandbox.output_cap_bytes);
    let stderr = capped_log(&stderr_path, sandbox.output_cap_bytes);
    Ok((finished, stdout, stderr))
}

/// Scans `metrics/` for NPY files; corrupt files become warnings.
fn census_metrics(workspace: &Path) -> (Vec<MetricEntry>, Vec<PathBuf>, Vec<String>) {
    let dir = workspace.join(METRICS_DIR);
    let mut entries = Vec::new();
    let mut files = Vec::new();
    let mut warnings = Vec::new();
    let Ok(listing) = std::fs::read_dir(&dir) else {
        return (entries, files, warnings);
    };
    let mut paths: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("npy"))
        .collect();
    paths.sort();
    for path in paths {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let rel = format!("{METRICS_DIR}/{name}.npy");
        match npy::read_series(&path) {
            Ok(series) => {
                entries.push(MetricEntry {
                    name,
                    path: rel,
                    length: series.len(),
                });
                files.push(path);
            }
            Err(e) => warnings.push(format!("{rel}: {e}")),
        }
    }
    (entries, files, warnings)
}

fn figure_census(workspace: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        let Ok(listing) = std::fs::read_dir(dir) else { return };
        for entry in listing.flatten() {
            let path = entry.path();
            if path.is_dir() {
                walk(&path, out);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            {
                out.push(path);
            }
        }
    }
    let mut out = Vec::new();
    walk(&workspace.join(FIGURES_DIR), &mut out);
    out.sort();
    out
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Executes `script` in a fresh `workspace`.
pub fn run_experiment(script: &str, workspace: &Path, sandbox: &SandboxConfig) -> Result<ExecutionOutcome, ExecutorError> {
    prepare_workspace(workspace)?;
    std::fs::write(workspace.join(EXPERIMENT_FILE), script)
        .map_err(|e| ExecutorError::SandboxSetupFailure(format!("cannot write script: {e}")))?;
    let (finished, stdout, stderr) = run_script(workspace, EXPERIMENT_FILE, sandbox, "")?;
    let elapsed = finished.elapsed.as_secs_f64();
    let limit = sandbox.timeout_seconds;
    let stdout_tail: String = {
        let lines: Vec<&str> = stdout.lines().collect();
        mask(&lines[lines.len().saturating_sub(20)..].join("\n"), workspace)
    };
    let (metrics, metric_files, warnings) = census_metrics(workspace);
    let (exit_class, error_trace, runtime) = if finished.timed_out {
        let trace = format!("TimeoutError: execution exceeded the {limit} s limit and was killed");
        let runtime = if sandbox.deterministic_timing { limit } else { elapsed.max(limit) };
        (ExitClass::Timeout, Some(trace), runtime)
    } else {
        let runtime = if sandbox.deterministic_timing { 0.0 } else { elapsed };
        let status = finished.status.expect("finished process has a status");
        if !status.success() {
            let mut trace = trailing_trace(&stderr, workspace);
            if trace.trim().is_empty() {
                trace = format!("process exited with {status}");
            }
            (ExitClass::Error, Some(trace), runtime)
        } else if metrics.is_empty() {
            let mut trace = "no metric files: the script exited successfully but wrote no parseable metrics/<name>.npy".to_string();
            for w in &warnings {
                trace.push_str(&format!("\n{w}"));
            }
            (ExitClass::Error, Some(trace), runtime)
        } else {
            (ExitClass::Ok, None, runtime)
        }
    };
    let manifest = Manifest {
        metrics,
        figures: figure_census(workspace).iter().map(|p| relative(p, workspace)).collect(),
        warnings,
        exit_class: Some(exit_class),
    };
    manifest.store(workspace)?;
    Ok(ExecutionOutcome {
        exit_class,
        error_trace,
        runtime_seconds: runtime,
        metric_files,
        manifest,
        stdout_tail,
    })
}

/// Parses the metric files listed in the outcome.
pub fn read_metrics(outcome: &ExecutionOutcome) -> Result<(Metrics, Vec<String>), ExecutorError> {
    let mut metrics = Metrics::new();
    let mut warnings = Vec::new();
    for path in &outcome.metric_files {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        match npy::read_series(path) {
            Ok(series) => {
                metrics.insert(name, series);
            }
            Err(e) => warnings.push(format!("{}: {e}", path.display())),
        }
    }
    if metrics.is_empty() {
        return Err(ExecutorError::NoMetrics);
    }
    Ok((metrics, warnings))
}

/// Runs the visualization script in the node's workspace and returns one
/// record per image under `figures/`.
pub fn run_plotting(viz_script: &str, workspace: &Path, sandbox: &SandboxConfig) -> Result<Vec<FigureRecord>, ExecutorError> {
    std::fs::write(workspace.join(PLOT_FILE), viz_script)?;
    let (finished, _stdout, stderr) = run_script(workspace, PLOT_FILE, sandbox, "plot_")?;
    if finished.timed_out {
        return Err(ExecutorError::PlottingFailure {
            trace: format!("TimeoutError: plotting exceeded the {} s limit", sandbox.timeout_seconds),
        });
    }
    let status = finished.status.expect("finished process has a status");
    if !status.success() {
        let mut trace = trailing_trace(&stderr, workspace);
        if trace.trim().is_empty() {
            trace = format!("plotting process exited with {status}");
        }
        return Err(ExecutorError::PlottingFailure { trace });
    }
    let figures = figure_census(workspace)
        .iter()
        .map(|p| FigureRecord::from_file(p))
        .collect::<Result<Vec<_>, _>>()?;
    if let Ok(mut manifest) = Manifest::load(workspace) {
        manifest.figures = figures.iter().map(|f| relative(&f.path, workspace)).collect();
        manifest.store(workspace)?;
    }
    Ok(figures)
}

/// Reviews every figure individually; the gate fails when any review flags
/// an issue or when there are no figures at all. Reviews are stored on the
/// records.
pub fn vlm_gate(figures: &mut [FigureRecord], node_context: &str, gateway: &Gateway) -> Result<VlmFeedback, GatewayError> {
    if figures.is_empty() {
        return Ok(VlmFeedback {
            passed: false,
            summary: "no figures produced".into(),
            figures: Vec::new(),
        });
    }
    let mut verdicts = Vec::new();
    let mut problems = Vec::new();
    for fig in figures.iter_mut() {
        let name = fig.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let bytes = std::fs::read(&fig.path).map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
        let review = match gateway.review_image(&bytes, node_context, fig.caption_hint.as_deref().unwrap_or(""), &[]) {
            Ok(r) => r,
            Err(GatewayError::UndecodableImage(e)) => FigureReview {
                img_description: "undecodable image".into(),
                img_review: format!("the file could not be decoded: {e}"),
                caption_review: "n/a".into(),
                figrefs_review: "n/a".into(),
                issues: vec!["image could not be decoded".into()],
            },
            Err(e) => return Err(e),
        };
        if review.flagged() {
            problems.push(format!("{name}: {}", review.issues.join("; ")));
        }
        fig.vlm_review = Some(review.clone());
        verdicts.push(FigureVerdict { path: name, review });
    }
    let passed = problems.is_empty();
    let summary = if passed {
        format!("all {} figure(s) passed review", verdicts.len())
    } else {
        format!("figure review flagged issues: {}", problems.join(" | "))
    };
    Ok(VlmFeedback {
        passed,
        summary,
        figures: verdicts,
    })
}
