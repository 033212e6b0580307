//! LaTeX helpers: bibliography block, figure captions, page counting and
//! optional external tools.

use std::path::Path;
use std::process::Command;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::audit::strip_comments;

static BIB_BLOCK: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)\\begin\{filecontents\*?\}\{references\.bib\}(.*?)\\end\{filecontents\*?\}").expect("valid regex")
});
static FIGURE_ENV: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)\\begin\{figure\*?\}(.*?)\\end\{figure\*?\}").expect("valid regex"));
static PAGES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\((\d+) pages?").expect("valid regex"));

/// Contents of the embedded `references.bib` block.
pub fn bibliography(latex: &str) -> Option<String> {
    BIB_BLOCK.captures(latex).map(|c| c[1].trim().to_string())
}

/// A complete document with the embedded bibliography.
pub fn is_well_formed(latex: &str) -> bool {
    latex.contains("\\documentclass")
        && latex.contains("\\begin{document}")
        && latex.contains("\\end{document}")
        && bibliography(latex).is_some()
}

/// Body of the `{...}` group starting at `open` (which must be `{`).
fn braced(text: &str, open: usize) -> Option<&str> {
    let bytes = text.as_bytes();
    if bytes.get(open) != Some(&b'{') {
        return None;
    }
    let mut depth = 0usize;
    for (i, b) in bytes.iter().enumerate().skip(open) {
        match b {
            b'{' if i == 0 || bytes[i - 1] != b'\\' => depth += 1,
            b'}' if bytes[i - 1] != b'\\' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[open + 1..i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn command_arg<'a>(text: &'a str, command: &str) -> Option<&'a str> {
    let at = text.find(command)?;
    let mut open = at + command.len();
    while text.as_bytes().get(open).is_some_and(u8::is_ascii_whitespace) {
        open += 1;
    }
    braced(text, open)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureContext {
    pub file: String,
    pub caption: String,
    pub label: Option<String>,
    /// Lines of the document that reference the label.
    pub figrefs: Vec<String>,
}

/// Caption, label and in-text references for each figure environment.
pub fn figure_contexts(latex: &str) -> Vec<FigureContext> {
    let text = strip_comments(latex);
    let mut out = Vec::new();
    for env in FIGURE_ENV.captures_iter(&text) {
        let body = env.get(1).map(|m| m.as_str()).unwrap_or_default();
        let Some(target) = command_arg(body, "\\includegraphics").or_else(|| {
            let at = body.find("\\includegraphics")?;
            let open = body[at..].find('{')? + at;
            braced(body, open)
        }) else {
            continue;
        };
        let file = target.trim().rsplit('/').next().unwrap_or_default().to_string();
        let caption = command_arg(body, "\\caption").unwrap_or_default().trim().to_string();
        let label = command_arg(body, "\\label").map(|l| l.trim().to_string());
        let figrefs = match &label {
            Some(l) => {
                let needle = format!("\\ref{{{l}}}");
                text.lines()
                    .filter(|line| line.contains(&needle))
                    .map(|line| line.trim().to_string())
                    .collect()
            }
            None => Vec::new(),
        };
        out.push(FigureContext {
            file,
            caption,
            label,
            figrefs,
        });
    }
    out
}

pub fn abstract_text(latex: &str) -> Option<String> {
    let start = latex.find("\\begin{abstract}")? + "\\begin{abstract}".len();
    let end = latex[start..].find("\\end{abstract}")? + start;
    Some(latex[start..end].trim().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageCount {
    pub pages: f64,
    pub approximate: bool,
}

const CHARS_PER_PAGE: f64 = 3500.0;
const PAGES_PER_FIGURE: f64 = 0.3;

/// Main-text page estimate from character count: text before the
/// bibliography or appendix, with a fixed allowance per figure.
pub fn estimate_pages(latex: &str) -> PageCount {
    let text = strip_comments(latex);
    let begin = text.find("\\begin{document}").map(|i| i + 16).unwrap_or(0);
    let end = ["\\appendix", "\\bibliography{", "\\end{document}"]
        .iter()
        .filter_map(|m| text[begin..].find(m).map(|i| i + begin))
        .min()
        .unwrap_or(text.len());
    let main = &text[begin..end];
    let figures = main.matches("\\includegraphics").count() as f64;
    let chars = main.chars().filter(|c| !c.is_whitespace()).count() as f64;
    let pages = ((chars / CHARS_PER_PAGE + figures * PAGES_PER_FIGURE) * 10.0).round() / 10.0;
    PageCount {
        pages: pages.max(0.1),
        approximate: true,
    }
}

pub fn tool_available(name: &str) -> bool {
    Command::new(name)
        .arg("--version")
        .output()
        .is_ok_and(|o| o.status.success())
}

/// Compiles `<dir>/<stem>.tex` with pdflatex and bibtex; returns the page
/// count from the log, or `None` when compilation fails.
pub fn compile(dir: &Path, stem: &str) -> Option<PageCount> {
    let tex = format!("{stem}.tex");
    let run = |program: &str, arg: &str| {
        Command::new(program)
            .args(["-interaction=nonstopmode", "-halt-on-error", arg])
            .current_dir(dir)
            .output()
    };
    let first = run("pdflatex", &tex).ok()?;
    if !first.status.success() {
        return None;
    }
    let _ = Command::new("bibtex").arg(stem).current_dir(dir).output();
    let _ = run("pdflatex", &tex);
    let last = run("pdflatex", &tex).ok()?;
    if !last.status.success() {
        return None;
    }
    let log = String::from_utf8_lossy(&last.stdout);
    let pages: f64 = PAGES.captures_iter(&log).last()?[1].parse().ok()?;
    Some(PageCount {
        pages,
        approximate: false,
    })
}

/// Style-checker output, or empty when the checker is not installed.
pub fn lint(dir: &Path, file: &str) -> String {
    match Command::new("chktex")
        .args(["-q", "-n2", "-n24", "-n13", "-n1", file])
        .current_dir(dir)
        .output()
    {
        Ok(out) => String::from_utf8_lossy(&out.stdout).into_owned(),
        Err(_) => String::new(),
    }
}
