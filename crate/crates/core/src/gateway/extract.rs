//! Fenced-block extraction from model completions.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    pub lang: String,
    pub body: String,
}

/// All complete triple-backtick blocks, in order. An unterminated trailing
/// block is ignored.
pub fn extract_fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut open: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match open.take() {
            None => {
                if let Some(rest) = trimmed.strip_prefix("```") {
                    open = Some((rest.trim().to_string(), Vec::new()));
                }
            }
            Some((lang, mut body)) => {
                if trimmed.starts_with("```") && trimmed.trim_end() == "```" {
                    let mut joined = body.join("\n");
                    joined.push('\n');
                    blocks.push(FencedBlock { lang, body: joined });
                } else {
                    body.push(line);
                    open = Some((lang, body));
                }
            }
        }
    }
    blocks
}

/// Body of the last fenced block, if any.
pub fn extract_last_code_block(text: &str) -> Option<String> {
    extract_fenced_blocks(text)
        .pop()
        .map(|b| b.body)
        .filter(|b| !b.trim().is_empty())
}

/// Last block that parses as JSON (preferring blocks tagged `json`).
pub fn extract_last_json_block(text: &str) -> Option<serde_json::Value> {
    let blocks = extract_fenced_blocks(text);
    let tagged = blocks.iter().rev().filter(|b| b.lang.eq_ignore_ascii_case("json"));
    let untagged = blocks.iter().rev().filter(|b| !b.lang.eq_ignore_ascii_case("json"));
    tagged
        .chain(untagged)
        .find_map(|b| serde_json::from_str(&b.body).ok())
}

/// Text outside every fenced block, trimmed.
pub fn prose_outside_blocks(text: &str) -> String {
    let mut out = Vec::new();
    let mut inside = false;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            inside = !inside;
            continue;
        }
        if !inside {
            out.push(line);
        }
    }
    out.join("\n").trim().to_string()
}
