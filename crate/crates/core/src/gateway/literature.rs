//! Literature search: a scholarly-search HTTP client and an offline fixture
//! store for tests and mock runs.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{hex, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiteratureResult {
    pub title: String,
    pub year: Option<u32>,
    pub venue: String,
    pub abstract_snippet: String,
    pub external_id: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum LiteratureError {
    #[error("search query must be nonempty")]
    EmptyQuery,
    #[error("literature backend rate limited the client")]
    RateLimited,
    #[error("literature backend failure: {0}")]
    Backend(String),
}

pub trait LiteratureSearch: Send + Sync {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<LiteratureResult>, LiteratureError>;
}

const SNIPPET_CHARS: usize = 300;

fn snippet(text: &str) -> String {
    text.chars().take(SNIPPET_CHARS).collect()
}

fn fixture_key(query: &str) -> String {
    let digest = Sha256::digest(query.trim().to_lowercase().as_bytes());
    hex(&digest[..8])
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureFile {
    query: String,
    results: Vec<LiteratureResult>,
}

/// Replays recorded responses keyed by query. Unknown queries either fail or,
/// with `synthetic_fallback`, return deterministic placeholder records.
#[derive(Debug, Clone)]
pub struct FixtureLiterature {
    dir: Option<PathBuf>,
    synthetic_fallback: bool,
}

impl FixtureLiterature {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureLiterature {
            dir: Some(dir.into()),
            synthetic_fallback: false,
        }
    }

    /// Synthetic records only; used by mock runs with no fixture directory.
    pub fn synthetic() -> Self {
        FixtureLiterature {
            dir: None,
            synthetic_fallback: true,
        }
    }

    pub fn with_synthetic_fallback(mut self) -> Self {
        self.synthetic_fallback = true;
        self
    }

    pub fn path_for(dir: &Path, query: &str) -> PathBuf {
        dir.join(format!("{}.json", fixture_key(query)))
    }

    pub fn record(dir: &Path, query: &str, results: &[LiteratureResult]) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = FixtureFile {
            query: query.to_string(),
            results: results.to_vec(),
        };
        std::fs::write(Self::path_for(dir, query), serde_json::to_vec_pretty(&file)?)
    }

    fn synthesize(query: &str, limit: usize) -> Vec<LiteratureResult> {
        let key = fixture_key(query);
        (0..limit.min(5))
            .map(|i| LiteratureResult {
                title: format!("On {query}: study {}", i + 1),
                year: Some(2015 + (u32::from_str_radix(&key[i..i + 2], 16).unwrap_or(0) % 10)),
                venue: ["NeurIPS", "ICML", "ICLR", "JMLR", "TMLR"][i % 5].to_string(),
                abstract_snippet: format!("We investigate {query} from angle {}.", i + 1),
                external_id: format!("synthetic-{key}-{i}"),
            })
            .collect()
    }
}

impl LiteratureSearch for FixtureLiterature {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<LiteratureResult>, LiteratureError> {
        if query.trim().is_empty() {
            return Err(LiteratureError::EmptyQuery);
        }
        if limit == 0 {
            return Ok(Vec::new());
        }
        if let Some(dir) = &self.dir {
            let path = Self::path_for(dir, query);
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| LiteratureError::Backend(e.to_string()))?;
                let file: FixtureFile =
                    serde_json::from_str(&text).map_err(|e| LiteratureError::Backend(e.to_string()))?;
                return Ok(file
                    .results
                    .into_iter()
                    .filter(|r| !r.external_id.is_empty())
                    .take(limit)
                    .collect());
            }
        }
        if self.synthetic_fallback {
            Ok(Self::synthesize(query, limit))
        } else {
            Err(LiteratureError::Backend(format!("no fixture recorded for query {query:?}")))
        }
    }
}

/// Client for the public scholarly-search graph API.
pub struct ScholarlySearch {
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct SearchPage {
    #[serde(default)]
    data: Vec<Paper>,
}

#[derive(Deserialize)]
struct Paper {
    #[serde(rename = "paperId", default)]
    paper_id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    year: Option<u32>,
    #[serde(default)]
    venue: Option<String>,
    #[serde(rename = "abstract", default)]
    abstract_text: Option<String>,
}

impl ScholarlySearch {
    pub const DEFAULT_URL: &'static str = "https://api.semanticscholar.org/graph/v1";

    pub fn new(base_url: &str, api_key_env: Option<&str>, retry: RetryPolicy) -> Result<Self, LiteratureError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| LiteratureError::Backend(e.to_string()))?;
        Ok(ScholarlySearch {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key_env.and_then(|v| std::env::var(v).ok()),
            retry,
            client,
        })
    }

    fn attempt(&self, query: &str, limit: usize) -> Result<Vec<LiteratureResult>, LiteratureError> {
        let mut call = self.client.get(format!("{}/paper/search", self.base_url)).query(&[
            ("query", query),
            ("limit", &limit.to_string()),
            ("fields", "title,year,venue,abstract"),
        ]);
        if let Some(key) = &self.api_key {
            call = call.header("x-api-key", key);
        }
        let resp = call.send().map_err(|e| LiteratureError::Backend(e.to_string()))?;
        if resp.status().as_u16() == 429 {
            return Err(LiteratureError::RateLimited);
        }
        if !resp.status().is_success() {
            return Err(LiteratureError::Backend(format!("HTTP {}", resp.status())));
        }
        let page: SearchPage = resp.json().map_err(|e| LiteratureError::Backend(e.to_string()))?;
        Ok(page
            .data
            .into_iter()
            .filter_map(|p| {
                Some(LiteratureResult {
                    external_id: p.paper_id.filter(|id| !id.is_empty())?,
                    title: p.title.unwrap_or_default(),
                    year: p.year,
                    venue: p.venue.unwrap_or_default(),
                    abstract_snippet: snippet(&p.abstract_text.unwrap_or_default()),
                })
            })
            .take(limit)
            .collect())
    }
}

impl LiteratureSearch for ScholarlySearch {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<LiteratureResult>, LiteratureError> {
        if query.trim().is_empty() {
            return Err(LiteratureError::EmptyQuery);
        }
        if limit == 0 {
            return Ok(Vec::new());
        }
        let attempts = self.retry.max_attempts.max(1);
        let mut last = LiteratureError::RateLimited;
        for attempt in 1..=attempts {
            std::thread::sleep(self.retry.delay_before(attempt));
            match self.attempt(query, limit) {
                Ok(r) => return Ok(r),
                Err(e @ (LiteratureError::RateLimited | LiteratureError::Backend(_))) => last = e,
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }
}
