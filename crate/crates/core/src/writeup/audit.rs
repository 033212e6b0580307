//! Figure audit: which figures the manuscript uses, which exist unused,
//! which references dangle, and which files are byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::executor::digest_bytes;

pub const FIGURE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "pdf"];

static INCLUDE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\\includegraphics\s*(?:\[[^\]]*\])?\s*\{([^}]*)\}").expect("valid regex"));

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureAuditReport {
    pub used: BTreeSet<String>,
    pub unused: BTreeSet<String>,
    pub invalid_refs: BTreeSet<String>,
    pub duplicates: BTreeSet<(String, String)>,
}

/// Removes `%` comments (an escaped `\%` is kept).
pub fn strip_comments(latex: &str) -> String {
    latex
        .lines()
        .map(|line| {
            let bytes = line.as_bytes();
            let mut cut = line.len();
            for (i, b) in bytes.iter().enumerate() {
                if *b == b'%' && (i == 0 || bytes[i - 1] != b'\\') {
                    cut = i;
                    break;
                }
            }
            &line[..cut]
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Targets of every `\includegraphics`, reduced to their file name.
pub fn figure_refs(latex: &str) -> Vec<String> {
    let text = strip_comments(latex);
    INCLUDE
        .captures_iter(&text)
        .map(|c| {
            let target = c[1].trim();
            target.rsplit('/').next().unwrap_or(target).to_string()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Image files directly inside `dir`, by file name.
pub fn figure_files(dir: &Path) -> BTreeMap<String, std::path::PathBuf> {
    let Ok(listing) = std::fs::read_dir(dir) else {
        return BTreeMap::new();
    };
    listing
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FIGURE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .filter_map(|p| Some((p.file_name()?.to_str()?.to_string(), p)))
        .collect()
}

/// Resolves a reference to an existing file name; extensionless
/// references match the first file with a known image extension.
fn resolve(reference: &str, files: &BTreeMap<String, std::path::PathBuf>) -> Option<String> {
    if files.contains_key(reference) {
        return Some(reference.to_string());
    }
    if Path::new(reference).extension().is_none() {
        for ext in FIGURE_EXTENSIONS {
            let candidate = format!("{reference}.{ext}");
            if files.contains_key(&candidate) {
                return Some(candidate);
            }
        }
    }
    None
}

pub fn audit_figures(latex: &str, figures_dir: &Path) -> FigureAuditReport {
    let files = figure_files(figures_dir);
    let mut report = FigureAuditReport::default();
    for reference in figure_refs(latex) {
        match resolve(&reference, &files) {
            Some(name) => {
                report.used.insert(name);
            }
            None => {
                report.invalid_refs.insert(reference);
            }
        }
    }
    report.unused = files.keys().filter(|f| !report.used.contains(*f)).cloned().collect();
    let mut by_digest: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (name, path) in &files {
        if let Ok(bytes) = std::fs::read(path) {
            by_digest.entry(digest_bytes(&bytes)).or_default().push(name.clone());
        }
    }
    for names in by_digest.values() {
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                report.duplicates.insert((a.clone(), b.clone()));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_examples() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("fig_a.png"), b"a").unwrap();
        std::fs::write(dir.path().join("fig_b.png"), b"b").unwrap();
        let r = audit_figures("\\includegraphics[width=\\linewidth]{figures/fig_a.png}\n\\includegraphics{ghost.png}", dir.path());
        assert_eq!(r.used, ["fig_a.png".to_string()].into());
        assert_eq!(r.unused, ["fig_b.png".to_string()].into());
        assert_eq!(r.invalid_refs, ["ghost.png".to_string()].into());
        assert!(r.duplicates.is_empty());

        std::fs::write(dir.path().join("main.png"), b"same").unwrap();
        std::fs::write(dir.path().join("appendix_copy.png"), b"same").unwrap();
        let r = audit_figures("", dir.path());
        assert_eq!(r.duplicates, [("appendix_copy.png".to_string(), "main.png".to_string())].into());
    }

    #[test]
    fn comments_and_extensionless_refs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("loss.png"), b"x").unwrap();
        let r = audit_figures("% \\includegraphics{gone.png}\n50\\% \\includegraphics{loss}", dir.path());
        assert_eq!(r.used, ["loss.png".to_string()].into());
        assert!(r.invalid_refs.is_empty());
        let empty = audit_figures("\\includegraphics{x.png}", &dir.path().join("missing"));
        assert_eq!(empty.invalid_refs, ["x.png".to_string()].into());
    }
}
