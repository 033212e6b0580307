//! Manuscript production: plot aggregation, a single-pass LaTeX draft, and
//! a bounded reflection loop fed by figure audits, page counts, lint output
//! and vision reviews of each figure with its caption.

pub mod audit;
pub mod latex;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use audit::{audit_figures, figure_refs, strip_comments, FigureAuditReport};
pub use latex::{FigureContext, PageCount};

use crate::executor::{run_plotting, run_pool, ExecutorError, SandboxConfig, FIGURES_DIR};
use crate::gateway::{extract_fenced_blocks, Gateway, GatewayError, Message, ModelRequest, Role};
use crate::ideation::Idea;
use crate::prompts::{
    fill, PLOT_AGGREGATOR, PLOT_AGGREGATOR_SYSTEM, VLM_REFLECTION, WRITEUP, WRITEUP_REFLECTION, WRITEUP_SYSTEM,
};
use crate::review::{FigureReview, FigureVerdict};

pub const DONE_TOKEN: &str = "I am done";
pub const AGGREGATOR_DIR: &str = "aggregator";
pub const MANUSCRIPT_DIR: &str = "manuscript";
pub const MANUSCRIPT_STEM: &str = "paper";
const REVIEW_PARALLELISM: usize = 4;

static NPY_LITERAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"["']([^"'\n]*\.npy)["']"#).expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WriteupConfig {
    pub max_figures: usize,
    pub max_reflection_rounds: u32,
    pub page_limit: u32,
    pub venue_description: String,
}

impl Default for WriteupConfig {
    fn default() -> Self {
        WriteupConfig {
            max_figures: 12,
            max_reflection_rounds: 5,
            page_limit: 4,
            venue_description: "a machine learning workshop with a 4-page limit.".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManuscriptState {
    pub latex_source: String,
    pub references_bib: String,
    pub figures_dir: PathBuf,
    /// Directory the source is written to and compiled in.
    pub manuscript_dir: PathBuf,
    pub page_count: Option<f64>,
    pub page_count_approximate: bool,
    pub reflection_round: u32,
    pub done_flag: bool,
}

#[derive(Debug, Error)]
pub enum WriteupError {
    #[error("the model returned no usable code block")]
    EmptyCompletion,
    #[error("plot aggregation failed after regeneration: {trace}")]
    AggregatorFailure { trace: String },
    #[error("aggregation script reads a path not listed in the summaries: {path}")]
    NonWhitelistedPath { path: String },
    #[error("no figures are available for the manuscript")]
    NoFigures,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Every `.npy` path string appearing anywhere in the summaries.
pub fn npy_whitelist(summaries: &[Value]) -> BTreeSet<String> {
    fn walk(v: &Value, out: &mut BTreeSet<String>) {
        match v {
            Value::String(s) if s.ends_with(".npy") => {
                out.insert(s.clone());
            }
            Value::Array(items) => items.iter().for_each(|i| walk(i, out)),
            Value::Object(map) => map.values().for_each(|i| walk(i, out)),
            _ => {}
        }
    }
    let mut out = BTreeSet::new();
    summaries.iter().for_each(|s| walk(s, &mut out));
    out
}

/// Rejects a script containing a quoted `.npy` path that is not listed
/// verbatim in the whitelist.
pub fn check_whitelist(script: &str, whitelist: &BTreeSet<String>) -> Result<(), WriteupError> {
    for cap in NPY_LITERAL.captures_iter(script) {
        let path = &cap[1];
        if !whitelist.contains(path) {
            return Err(WriteupError::NonWhitelistedPath { path: path.to_string() });
        }
    }
    Ok(())
}

pub fn aggregator_prompt(idea_text: &str, summaries: &[Value], max_figures: usize, previous_failure: &str) -> String {
    let combined = serde_json::to_string_pretty(summaries).expect("summaries serialize");
    fill(
        PLOT_AGGREGATOR,
        &[
            ("idea_text", idea_text),
            ("MAX_FIGURES", &max_figures.to_string()),
            ("previous_failure", previous_failure),
            ("combined_summaries_str", &combined),
        ],
    )
}

/// Asks the code-generation role for the aggregation script.
pub fn generate_aggregator(
    idea: &Idea,
    summaries: &[Value],
    max_figures: usize,
    previous_failure: &str,
    gateway: &Gateway,
) -> Result<String, WriteupError> {
    let system = fill(PLOT_AGGREGATOR_SYSTEM, &[("MAX_FIGURES", &max_figures.to_string())]);
    let prompt = aggregator_prompt(&idea.to_text(), summaries, max_figures, previous_failure);
    let request = ModelRequest::new(Role::CodeGeneration, vec![Message::system(system), Message::user(prompt)]);
    match gateway.complete_code(&request) {
        Ok((_, code)) => Ok(code),
        Err(GatewayError::EmptyCompletion) => Err(WriteupError::EmptyCompletion),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorRun {
    pub script: String,
    /// File names copied into the run's figures directory.
    pub figures: Vec<String>,
    pub attempts: u32,
}

fn copy_figures(from: &Path, to: &Path, limit: usize) -> std::io::Result<Vec<String>> {
    if to.exists() {
        std::fs::remove_dir_all(to)?;
    }
    std::fs::create_dir_all(to)?;
    let mut names = Vec::new();
    for (name, path) in audit::figure_files(from).into_iter().take(limit) {
        std::fs::copy(&path, to.join(&name))?;
        names.push(name);
    }
    Ok(names)
}

/// Generates, checks and runs the aggregation script in
/// `<run_dir>/aggregator`, then copies its figures to `<run_dir>/figures`.
/// One regeneration is allowed, prompted with the failure.
pub fn run_aggregator(
    run_dir: &Path,
    idea: &Idea,
    summaries: &[Value],
    config: &WriteupConfig,
    sandbox: &SandboxConfig,
    gateway: &Gateway,
) -> Result<AggregatorRun, WriteupError> {
    let whitelist = npy_whitelist(summaries);
    let workspace = run_dir.join(AGGREGATOR_DIR);
    let mut previous_failure = String::new();
    let mut last_error = None;
    for attempt in 1..=2u32 {
        let script = generate_aggregator(idea, summaries, config.max_figures, &previous_failure, gateway)?;
        let failure = match check_whitelist(&script, &whitelist) {
            Err(e) => e,
            Ok(()) => {
                let figures_out = workspace.join(FIGURES_DIR);
                if figures_out.exists() {
                    std::fs::remove_dir_all(&figures_out)?;
                }
                std::fs::create_dir_all(&figures_out)?;
                match run_plotting(&script, &workspace, sandbox) {
                    Ok(records) if !records.is_empty() => {
                        let figures = copy_figures(&figures_out, &run_dir.join(FIGURES_DIR), config.max_figures)?;
                        return Ok(AggregatorRun {
                            script,
                            figures,
                            attempts: attempt,
                        });
                    }
                    Ok(_) => WriteupError::NoFigures,
                    Err(ExecutorError::PlottingFailure { trace }) => WriteupError::AggregatorFailure { trace },
                    Err(ExecutorError::Io(e)) => return Err(e.into()),
                    Err(e) => WriteupError::AggregatorFailure { trace: e.to_string() },
                }
            }
        };
        log::warn!("aggregation attempt {attempt} failed: {failure}");
        previous_failure = format!(
            "\nYour previous aggregation script failed. Fix the problem below and try again:\n```\n{failure}\n```\n"
        );
        last_error = Some(failure);
    }
    Err(last_error.expect("two attempts recorded"))
}

/// Vision review of one figure file with its manuscript context.
fn review_file(
    path: &Path,
    abstract_text: &str,
    caption: &str,
    figrefs: &[String],
    gateway: &Gateway,
) -> Result<FigureReview, GatewayError> {
    let bytes = std::fs::read(path).map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
    gateway.review_image(&bytes, abstract_text, caption, figrefs)
}

/// Vision descriptions of every figure in `figures_dir`, in file name order.
pub fn describe_figures(
    figures_dir: &Path,
    abstract_text: &str,
    gateway: &Gateway,
) -> Result<Vec<FigureVerdict>, WriteupError> {
    let files: Vec<(String, PathBuf)> = audit::figure_files(figures_dir).into_iter().collect();
    run_pool(files, REVIEW_PARALLELISM, |(name, path)| {
        review_file(&path, abstract_text, "", &[], gateway).map(|review| FigureVerdict { path: name, review })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .map_err(Into::into)
}

/// Reviews each included figure against its caption and in-text references.
pub fn caption_reviews(state: &ManuscriptState, gateway: &Gateway) -> Result<Vec<FigureVerdict>, WriteupError> {
    let abstract_text = latex::abstract_text(&state.latex_source).unwrap_or_default();
    let files = audit::figure_files(&state.figures_dir);
    let contexts: Vec<(FigureContext, PathBuf)> = latex::figure_contexts(&state.latex_source)
        .into_iter()
        .filter_map(|c| {
            let path = files.get(&c.file).cloned()?;
            Some((c, path))
        })
        .collect();
    run_pool(contexts, REVIEW_PARALLELISM, |(ctx, path)| {
        review_file(&path, &abstract_text, &ctx.caption, &ctx.figrefs, gateway)
            .map(|review| FigureVerdict { path: ctx.file, review })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .map_err(Into::into)
}

fn last_latex_block(text: &str) -> Option<String> {
    extract_fenced_blocks(text)
        .into_iter()
        .rev()
        .find(|b| b.lang == "latex" || b.lang == "tex")
        .map(|b| b.body)
}

/// Writes the source and measures its length: compiled page count when a
/// typesetting toolchain is installed, otherwise the character heuristic.
/// `None` means compilation was attempted and failed.
pub fn measure(state: &ManuscriptState) -> std::io::Result<Option<PageCount>> {
    std::fs::create_dir_all(&state.manuscript_dir)?;
    std::fs::write(
        state.manuscript_dir.join(format!("{MANUSCRIPT_STEM}.tex")),
        &state.latex_source,
    )?;
    if !latex::tool_available("pdflatex") {
        return Ok(Some(latex::estimate_pages(&state.latex_source)));
    }
    let local_figures = state.manuscript_dir.join(FIGURES_DIR);
    if local_figures != state.figures_dir {
        copy_figures(&state.figures_dir, &local_figures, usize::MAX)?;
    }
    Ok(latex::compile(&state.manuscript_dir, MANUSCRIPT_STEM))
}

fn apply_pages(state: &mut ManuscriptState, pages: Option<PageCount>) {
    state.page_count = pages.map(|p| p.pages);
    state.page_count_approximate = pages.is_some_and(|p| p.approximate);
}

fn page_info(state: &ManuscriptState, page_limit: u32) -> String {
    match state.page_count {
        Some(pages) => {
            let qualifier = if state.page_count_approximate {
                " (estimated from length)"
            } else {
                ""
            };
            let mut text = format!(
                "The main text currently spans {pages:.1} pages{qualifier}; the limit is {page_limit} pages."
            );
            if pages > f64::from(page_limit) {
                text.push_str(" The paper is over the limit: shorten the main text or move material to the appendix.");
            }
            text
        }
        None => format!("The current page count is unknown; the limit is {page_limit} pages."),
    }
}

fn list_or_none<'a>(items: impl IntoIterator<Item = &'a String>) -> String {
    let items: Vec<&str> = items.into_iter().map(String::as_str).collect();
    if items.is_empty() {
        "none".into()
    } else {
        items.join(", ")
    }
}

fn format_reviews(reviews: &[FigureVerdict]) -> String {
    if reviews.is_empty() {
        return "No figure reviews available.".into();
    }
    reviews
        .iter()
        .map(|v| {
            let mut text = format!(
                "{}:\n  Image: {}\n  Review: {}\n  Caption: {}\n  References: {}",
                v.path, v.review.img_description, v.review.img_review, v.review.caption_review, v.review.figrefs_review
            );
            if v.review.flagged() {
                text.push_str(&format!("\n  Issues: {}", v.review.issues.join("; ")));
            }
            text
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_duplicates(audit: &FigureAuditReport) -> String {
    if audit.duplicates.is_empty() {
        return "No duplicate figures detected.".into();
    }
    audit
        .duplicates
        .iter()
        .map(|(a, b)| format!("{a} and {b} have identical content"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn writeup_system(config: &WriteupConfig) -> String {
    fill(
        WRITEUP_SYSTEM,
        &[
            ("venue_description", &config.venue_description),
            ("page_limit", &config.page_limit.to_string()),
        ],
    )
}

/// Single-pass draft of the full manuscript.
#[allow(clippy::too_many_arguments)]
pub fn draft_manuscript(
    idea: &Idea,
    summaries: &[Value],
    aggregator_script: &str,
    figures: &[String],
    plot_descriptions: &[FigureVerdict],
    config: &WriteupConfig,
    figures_dir: &Path,
    manuscript_dir: &Path,
    gateway: &Gateway,
) -> Result<ManuscriptState, WriteupError> {
    if figures.is_empty() {
        return Err(WriteupError::NoFigures);
    }
    let summaries_text = serde_json::to_string_pretty(summaries).expect("summaries serialize");
    let descriptions = plot_descriptions
        .iter()
        .map(|v| format!("{}: {}", v.path, v.review.img_description))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = fill(
        WRITEUP,
        &[
            ("idea_text", &idea.to_text()),
            ("summaries", &summaries_text),
            ("aggregator_code", aggregator_script),
            ("plot_list", &figures.join("\n")),
            ("plot_descriptions", &descriptions),
            ("page_limit", &config.page_limit.to_string()),
            ("page_info", "The current page count is not yet known."),
            ("latex_writeup", "(no draft yet)"),
        ],
    );
    let request = ModelRequest::new(
        Role::Writeup,
        vec![Message::system(writeup_system(config)), Message::user(prompt)],
    );
    let reply = gateway.complete(&request)?;
    let source = last_latex_block(&reply.text).ok_or(WriteupError::EmptyCompletion)?;
    let mut state = ManuscriptState {
        references_bib: latex::bibliography(&source).unwrap_or_default(),
        latex_source: source,
        figures_dir: figures_dir.to_path_buf(),
        manuscript_dir: manuscript_dir.to_path_buf(),
        page_count: None,
        page_count_approximate: false,
        reflection_round: 0,
        done_flag: false,
    };
    let pages = measure(&state)?;
    apply_pages(&mut state, pages);
    Ok(state)
}

/// Prompt for one reflection round.
pub fn reflection_prompt(
    state: &ManuscriptState,
    round: u32,
    max_rounds: u32,
    audit: &FigureAuditReport,
    vlm_reviews: &[FigureVerdict],
    lint_output: &str,
    page_limit: u32,
) -> String {
    let page_text = page_info(state, page_limit);
    let mut prompt = fill(
        WRITEUP_REFLECTION,
        &[
            ("round", &round.to_string()),
            ("max_rounds", &max_rounds.to_string()),
            ("unused_figs", &list_or_none(&audit.unused)),
            ("invalid_figs", &list_or_none(&audit.invalid_refs)),
            ("reflection_page_info", &page_text),
            ("check_output", lint_output),
            ("review_img_cap_ref", &format_reviews(vlm_reviews)),
            ("analysis_duplicate_figs", &format_duplicates(audit)),
            ("latex_writeup", &state.latex_source),
        ],
    );
    if round == 1 {
        prompt.push('\n');
        prompt.push_str(&fill(
            VLM_REFLECTION,
            &[
                ("used_figs", &list_or_none(&audit.used)),
                ("unused_figs", &list_or_none(&audit.unused)),
                ("reflection_page_info", &page_text),
                ("review_img_selection", &format_reviews(vlm_reviews)),
            ],
        ));
    }
    prompt
}

/// Per-round bookkeeping of the reflection loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub accepted: bool,
    pub done: bool,
    pub note: String,
}

/// Bounded revise-and-recheck loop. Each round sends the current audit,
/// lint output, page information and figure reviews; the loop stops on the
/// completion token or when `max_rounds` is reached. A revision that is not
/// a complete document with its bibliography block, or that fails to
/// compile when a toolchain is present, is rejected and the previous source
/// kept. Audit, lint and page count are recomputed after each accepted
/// revision.
#[allow(clippy::too_many_arguments)]
pub fn reflect(
    mut state: ManuscriptState,
    audit: &FigureAuditReport,
    vlm_reviews: &[FigureVerdict],
    lint_output: &str,
    max_rounds: u32,
    page_limit: u32,
    system: &str,
    gateway: &Gateway,
    log: &mut Vec<RoundRecord>,
) -> Result<ManuscriptState, WriteupError> {
    let mut audit = audit.clone();
    let mut lint_output = lint_output.to_string();
    while state.reflection_round < max_rounds && !state.done_flag {
        let round = state.reflection_round + 1;
        let prompt = reflection_prompt(&state, round, max_rounds, &audit, vlm_reviews, &lint_output, page_limit);
        let request = ModelRequest::new(Role::Writeup, vec![Message::system(system), Message::user(prompt)]);
        let reply = gateway.complete(&request)?;
        state.reflection_round = round;
        let revised = last_latex_block(&reply.text);
        if revised.is_none() && reply.text.contains(DONE_TOKEN) {
            state.done_flag = true;
            log.push(RoundRecord {
                round,
                accepted: false,
                done: true,
                note: "completion token received".into(),
            });
            break;
        }
        let Some(source) = revised.filter(|s| latex::is_well_formed(s)) else {
            log.push(RoundRecord {
                round,
                accepted: false,
                done: false,
                note: "revision was not a complete document with its bibliography; previous source kept".into(),
            });
            continue;
        };
        let mut candidate = state.clone();
        candidate.references_bib = latex::bibliography(&source).unwrap_or_default();
        candidate.latex_source = source;
        match measure(&candidate)? {
            Some(pages) => {
                apply_pages(&mut candidate, Some(pages));
                state = candidate;
                audit = audit_figures(&state.latex_source, &state.figures_dir);
                lint_output = latex::lint(&state.manuscript_dir, &format!("{MANUSCRIPT_STEM}.tex"));
                let done = reply.text.contains(DONE_TOKEN);
                state.done_flag = done;
                log.push(RoundRecord {
                    round,
                    accepted: true,
                    done,
                    note: "revision accepted".into(),
                });
            }
            None => {
                measure(&state)?;
                log.push(RoundRecord {
                    round,
                    accepted: false,
                    done: false,
                    note: "revision failed to compile; previous source kept".into(),
                });
            }
        }
    }
    Ok(state)
}

/// Everything the writeup phase leaves on disk, mirrored in `audit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteupReport {
    pub aggregator: AggregatorRun,
    pub manuscript: ManuscriptState,
    pub audit: FigureAuditReport,
    pub caption_reviews: Vec<FigureVerdict>,
    pub rounds: Vec<RoundRecord>,
}

/// Full writeup phase for a run directory.
pub fn run_writeup(
    run_dir: &Path,
    idea: &Idea,
    summaries: &[Value],
    config: &WriteupConfig,
    sandbox: &SandboxConfig,
    gateway: &Gateway,
) -> Result<WriteupReport, WriteupError> {
    let aggregator = run_aggregator(run_dir, idea, summaries, config, sandbox, gateway)?;
    let figures_dir = run_dir.join(FIGURES_DIR);
    let manuscript_dir = run_dir.join(MANUSCRIPT_DIR);
    let descriptions = describe_figures(&figures_dir, &idea.abstract_text, gateway)?;
    let state = draft_manuscript(
        idea,
        summaries,
        &aggregator.script,
        &aggregator.figures,
        &descriptions,
        config,
        &figures_dir,
        &manuscript_dir,
        gateway,
    )?;
    let initial_audit = audit_figures(&state.latex_source, &figures_dir);
    let reviews = caption_reviews(&state, gateway)?;
    let lint_output = latex::lint(&manuscript_dir, &format!("{MANUSCRIPT_STEM}.tex"));
    let mut rounds = Vec::new();
    let state = reflect(
        state,
        &initial_audit,
        &reviews,
        &lint_output,
        config.max_reflection_rounds,
        config.page_limit,
        &writeup_system(config),
        gateway,
        &mut rounds,
    )?;
    measure(&state)?;
    let report = WriteupReport {
        aggregator,
        audit: audit_figures(&state.latex_source, &figures_dir),
        manuscript: state,
        caption_reviews: reviews,
        rounds,
    };
    let mut on_disk = serde_json::to_value(&report).map_err(std::io::Error::other)?;
    relativize_paths(&mut on_disk, run_dir);
    std::fs::write(
        manuscript_dir.join("audit.json"),
        serde_json::to_string_pretty(&on_disk).map_err(std::io::Error::other)?,
    )?;
    Ok(report)
}

/// Rewrites absolute paths under `base` as relative ones.
fn relativize_paths(value: &mut Value, base: &Path) {
    let prefix = format!("{}/", base.display());
    match value {
        Value::String(s) => {
            if let Some(rest) = s.strip_prefix(&prefix) {
                *s = rest.to_string();
            } else if Path::new(s.as_str()) == base {
                *s = ".".into();
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| relativize_paths(v, base)),
        Value::Object(map) => map.values_mut().for_each(|v| relativize_paths(v, base)),
        _ => {}
    }
}
