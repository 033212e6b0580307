//! Prompt templates and a minimal `{placeholder}` renderer.
//!
//! Templates live under `templates/` and are compiled in. `{{` and `}}`
//! render as literal braces; `{name}` is substituted and must be supplied.

use thiserror::Error;

/// Bumped whenever a template's wording or placeholders change.
pub const TEMPLATE_VERSION: u32 = 1;

pub const IDEATION_SYSTEM: &str = include_str!("../templates/ideation_system.txt");
pub const IDEATION_INITIAL: &str = include_str!("../templates/ideation_initial.txt");
pub const IDEATION_REFLECTION: &str = include_str!("../templates/ideation_reflection.txt");
pub const EXPERIMENT_SYSTEM: &str = include_str!("../templates/experiment_system.txt");
pub const EXPERIMENT_TASK: &str = include_str!("../templates/experiment_task.txt");
pub const PLOTTING: &str = include_str!("../templates/plotting.txt");
pub const FEEDBACK: &str = include_str!("../templates/feedback.txt");
pub const EVALUATOR: &str = include_str!("../templates/evaluator.txt");
pub const VLM_IMAGE_REVIEW: &str = include_str!("../templates/vlm_image_review.txt");
pub const REVIEW_REPROMPT: &str = include_str!("../templates/review_reprompt.txt");
pub const AGGREGATION_NODE: &str = include_str!("../templates/aggregation_node.txt");
pub const SUMMARY_REPORT: &str = include_str!("../templates/summary_report.txt");
pub const PLOT_AGGREGATOR_SYSTEM: &str = include_str!("../templates/plot_aggregator_system.txt");
pub const PLOT_AGGREGATOR: &str = include_str!("../templates/plot_aggregator.txt");
pub const WRITEUP_SYSTEM: &str = include_str!("../templates/writeup_system.txt");
pub const WRITEUP: &str = include_str!("../templates/writeup.txt");
pub const WRITEUP_REFLECTION: &str = include_str!("../templates/writeup_reflection.txt");
pub const VLM_REFLECTION: &str = include_str!("../templates/vlm_reflection.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template placeholder {{{0}}} has no value")]
    Missing(String),
}

/// Substitutes `{name}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") {
            out.push('{');
            rest = &tail[2..];
        } else if tail.starts_with("}}") {
            out.push('}');
            rest = &tail[2..];
        } else if tail.starts_with('{') {
            let name_len = tail[1..]
                .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                .unwrap_or(tail.len() - 1);
            let name = &tail[1..1 + name_len];
            if name_len > 0 && tail[1 + name_len..].starts_with('}') {
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TemplateError::Missing(name.to_string()))?;
                out.push_str(value);
                rest = &tail[name_len + 2..];
            } else {
                out.push('{');
                rest = &tail[1..];
            }
        } else {
            out.push('}');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders a compiled-in template; a missing variable is a programming error.
pub(crate) fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    render(template, vars).unwrap_or_else(|e| panic!("{e}"))
}

/// Value of a `Key: value` line in a prompt, if present.
pub fn header_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(':').map(str::trim))
}
