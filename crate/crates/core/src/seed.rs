//! The seed header: a single `SEED = <int>` assignment near the top of an
//! experiment script that the orchestrator rewrites for replications.

/// Header lines searched for an existing seed assignment.
const HEADER_LINES: usize = 20;

fn is_seed_line(line: &str) -> bool {
    let Some(rest) = line.trim_end().strip_prefix("SEED") else {
        return false;
    };
    let Some(value) = rest.trim_start().strip_prefix('=') else {
        return false;
    };
    let value = value.trim();
    let digits = value.strip_prefix('-').unwrap_or(value);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn seed_line_index(script: &str) -> Option<usize> {
    script.split_inclusive('\n').take(HEADER_LINES).position(is_seed_line)
}

/// Returns the seed value assigned in the header, if any.
pub fn read_seed(script: &str) -> Option<i64> {
    let idx = seed_line_index(script)?;
    let line = script.split_inclusive('\n').nth(idx)?;
    line.split('=').nth(1)?.trim().parse().ok()
}

/// Rewrites (or prepends) the seed header line.
pub fn inject_seed(script: &str, seed: u64) -> String {
    let line = format!("SEED = {seed}\n");
    match seed_line_index(script) {
        Some(idx) => script
            .split_inclusive('\n')
            .enumerate()
            .map(|(i, l)| if i == idx { line.as_str() } else { l })
            .collect(),
        None => format!("{line}{script}"),
    }
}

/// Script with the seed header line removed.
pub fn strip_seed(script: &str) -> String {
    match seed_line_index(script) {
        Some(idx) => script
            .split_inclusive('\n')
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, l)| l)
            .collect(),
        None => script.to_string(),
    }
}

/// True when the scripts are byte-identical outside the seed header line.
pub fn same_except_seed(a: &str, b: &str) -> bool {
    strip_seed(a) == strip_seed(b)
}
