//! Run configuration: one JSON document, validated with per-field
//! diagnostics. Credentials are read from environment variables named in
//! the document, never stored in it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::SandboxConfig;
use crate::gateway::{
    FixtureLiterature, Gateway, HttpBackend, LiteratureSearch, MockBackend, MockScenario, ModelRoleConfig,
    RetryPolicy, Role, ScholarlySearch, TokenBucket,
};
use crate::ideation::IdeationConfig;
use crate::policy::SelectionPolicy;
use crate::stage::{RunBudget, StageCriteria};
use crate::writeup::WriteupConfig;

/// Node allocation per stage.
pub const DEFAULT_STAGE_BUDGETS: [u32; 4] = [21, 12, 12, 12];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IdeaSelection {
    /// The literal string `"all"`.
    All(AllMarker),
    Indices(BTreeSet<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllMarker {
    All,
}

impl Default for IdeaSelection {
    fn default() -> Self {
        IdeaSelection::All(AllMarker::All)
    }
}

impl IdeaSelection {
    pub fn includes(&self, index: usize) -> bool {
        match self {
            IdeaSelection::All(_) => true,
            IdeaSelection::Indices(set) => set.contains(&index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// OpenAI-compatible chat-completion endpoint.
    Real {
        base_url: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_request_timeout")]
        request_timeout_seconds: f64,
        #[serde(default)]
        requests_per_second: Option<f64>,
        #[serde(default = "default_literature_url")]
        literature_url: String,
        #[serde(default)]
        literature_api_key_env: Option<String>,
    },
    /// Deterministic offline backend.
    Mock {
        #[serde(default)]
        scenario: MockScenario,
        /// Directory of recorded replies keyed by request digest.
        #[serde(default)]
        fixture_dir: Option<PathBuf>,
        /// Directory of recorded literature search results.
        #[serde(default)]
        literature_dir: Option<PathBuf>,
    },
}

fn default_request_timeout() -> f64 {
    600.0
}

fn default_literature_url() -> String {
    ScholarlySearch::DEFAULT_URL.to_string()
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock {
            scenario: MockScenario::default(),
            fixture_dir: None,
            literature_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdeationSettings {
    pub count: usize,
    pub reflection_rounds: usize,
}

impl Default for IdeationSettings {
    fn default() -> Self {
        let d = IdeationConfig::default();
        IdeationSettings {
            count: d.count,
            reflection_rounds: d.reflection_rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub topic_path: Option<PathBuf>,
    pub idea_selection: IdeaSelection,
    pub stage_budgets: [u32; 4],
    pub policy: SelectionPolicy,
    pub budget: RunBudget,
    pub criteria: StageCriteria,
    pub model_roles: Vec<ModelRoleConfig>,
    pub backend: BackendConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub sandbox: SandboxConfig,
    pub primary_metric: String,
    pub writeup: WriteupConfig,
    pub ideation: IdeationSettings,
    /// Write a checkpoint after this many node terminations.
    pub checkpoint_every: u32,
    /// Stop the run (as if killed) after this many checkpoints; testing aid.
    pub halt_after_checkpoints: Option<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            topic_path: None,
            idea_selection: IdeaSelection::default(),
            stage_budgets: DEFAULT_STAGE_BUDGETS,
            policy: SelectionPolicy::default(),
            budget: RunBudget::default(),
            criteria: StageCriteria::default(),
            model_roles: ModelRoleConfig::defaults(),
            backend: BackendConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            sandbox: SandboxConfig::default(),
            primary_metric: "val_accuracy".into(),
            writeup: WriteupConfig::default(),
            ideation: IdeationSettings::default(),
            checkpoint_every: 5,
            halt_after_checkpoints: None,
        }
    }
}

/// One invalid field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
    #[error("backend setup failed: {0}")]
    Backend(String),
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config = Self::from_json(&text).map_err(|e| match e {
            ConfigError::Parse {
                line, column, message, ..
            } => ConfigError::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message,
            },
            other => other,
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Parses without validating.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Collects every invalid field rather than stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let mut push = |field: &str, message: String| {
            errors.push(FieldError {
                field: field.to_string(),
                message,
            })
        };
        for (i, b) in self.stage_budgets.iter().enumerate() {
            if *b == 0 {
                push(&format!("stage_budgets[{i}]"), "must be at least 1".into());
            }
        }
        if let Err(e) = self.policy.validate() {
            push("policy", e.to_string());
        }
        if let Err(e) = self.budget.validate() {
            push("budget", e);
        }
        let c = &self.criteria;
        if !(c.escalation_fraction > 0.0 && c.escalation_fraction <= 1.0) {
            push("criteria.escalation_fraction", "must lie in (0, 1]".into());
        }
        if c.convergence_window < 2 {
            push("criteria.convergence_window", "must be at least 2".into());
        }
        if !(c.convergence_tolerance > 0.0) {
            push("criteria.convergence_tolerance", "must be positive".into());
        }
        if c.min_datasets == 0 {
            push("criteria.min_datasets", "must be at least 1".into());
        }
        if let Some(bad) = c.replicate_after.iter().find(|s| !(1..=4).contains(*s)) {
            push("criteria.replicate_after", format!("stage {bad} does not exist"));
        }
        let mut seen = BTreeSet::new();
        for (i, r) in self.model_roles.iter().enumerate() {
            if !seen.insert(r.role) {
                push(&format!("model_roles[{i}].role"), format!("{} configured twice", r.role.as_str()));
            }
            if r.max_tokens == 0 {
                push(&format!("model_roles[{i}].max_tokens"), "must be positive".into());
            }
            if !(r.temperature >= 0.0) {
                push(&format!("model_roles[{i}].temperature"), "must be non-negative".into());
            }
            if r.model_id.trim().is_empty() {
                push(&format!("model_roles[{i}].model_id"), "must not be empty".into());
            }
        }
        if self.sandbox.interpreter.is_empty() {
            push("sandbox.interpreter", "must name a command".into());
        }
        if self.primary_metric.trim().is_empty() {
            push("primary_metric", "must not be empty".into());
        }
        if self.writeup.max_figures == 0 {
            push("writeup.max_figures", "must be at least 1".into());
        }
        if self.writeup.page_limit == 0 {
            push("writeup.page_limit", "must be at least 1".into());
        }
        if self.ideation.count == 0 {
            push("ideation.count", "must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            push("checkpoint_every", "must be at least 1".into());
        }
        if let BackendConfig::Real { base_url, .. } = &self.backend {
            if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
                push("backend.base_url", format!("{base_url:?} is not an http(s) URL"));
            }
        }
        if let Some(topic) = &self.topic_path {
            if !topic.is_file() {
                push("topic_path", format!("{} does not exist", topic.display()));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.backend, BackendConfig::Mock { .. })
    }

    /// Sampling settings for every role: defaults overridden by the config.
    pub fn roles(&self) -> Vec<ModelRoleConfig> {
        Role::ALL
            .iter()
            .map(|role| {
                self.model_roles
                    .iter()
                    .find(|r| r.role == *role)
                    .cloned()
                    .unwrap_or_else(|| ModelRoleConfig::default_for(*role))
            })
            .collect()
    }

    /// Sandbox settings with the per-node timeout from the budget; mock
    /// runs record deterministic timings.
    pub fn effective_sandbox(&self) -> SandboxConfig {
        let mut sandbox = self.sandbox.clone();
        sandbox.timeout_seconds = self.budget.per_node_timeout_seconds;
        if self.is_mock() {
            sandbox.deterministic_timing = true;
        }
        sandbox
    }

    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        let gateway = match &self.backend {
            BackendConfig::Mock {
                scenario, fixture_dir, ..
            } => {
                let mut backend = MockBackend::new(self.seed, scenario.clone());
                if let Some(dir) = fixture_dir {
                    backend = backend
                        .with_fixture_dir(dir)
                        .map_err(|e| ConfigError::Backend(format!("fixture dir {}: {e}", dir.display())))?;
                }
                Gateway::new(Arc::new(backend)).with_retry(RetryPolicy {
                    max_attempts: 3,
                    base_delay_ms: 0,
                    max_delay_ms: 0,
                })
            }
            BackendConfig::Real {
                base_url,
                api_key_env,
                request_timeout_seconds,
                requests_per_second,
                ..
            } => {
                let backend = HttpBackend::new(
                    base_url,
                    api_key_env.as_deref(),
                    Duration::from_secs_f64(*request_timeout_seconds),
                )
                .map_err(|e| ConfigError::Backend(e.to_string()))?;
                let mut gateway = Gateway::new(Arc::new(backend));
                if let Some(rate) = requests_per_second {
                    gateway = gateway.with_rate_limit(TokenBucket::new(rate.ceil().max(1.0) as u32, *rate));
                }
                gateway
            }
        };
        Ok(gateway.with_roles(self.roles()))
    }

    pub fn literature(&self) -> Result<Box<dyn LiteratureSearch>, ConfigError> {
        match &self.backend {
            BackendConfig::Mock { literature_dir, .. } => Ok(Box::new(match literature_dir {
                Some(dir) => FixtureLiterature::new(dir).with_synthetic_fallback(),
                None => FixtureLiterature::synthetic(),
            })),
            BackendConfig::Real {
                literature_url,
                literature_api_key_env,
                ..
            } => ScholarlySearch::new(literature_url, literature_api_key_env.as_deref(), RetryPolicy::default())
                .map(|s| Box::new(s) as Box<dyn LiteratureSearch>)
                .map_err(|e| ConfigError::Backend(e.to_string())),
        }
    }

    pub fn ideation_config(&self, count: Option<usize>, seed: Option<u64>) -> IdeationConfig {
        IdeationConfig {
            count: count.unwrap_or(self.ideation.count),
            reflection_rounds: self.ideation.reflection_rounds,
            seed: seed.unwrap_or(self.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(c.validate().is_ok());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn diagnostics_name_fields() {
        let c = RunConfig::from_json(
            r#"{"stage_budgets":[0,1,1,1],"policy":{"debug_probability":2.0},"topic_path":"/nonexistent/topic.md"}"#,
        )
        .unwrap();
        let ConfigError::Invalid(errors) = c.validate().unwrap_err() else {
            panic!("expected field errors")
        };
        let fields: Vec<&str> = errors.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, vec!["stage_budgets[0]", "policy", "topic_path"]);
        assert!(errors[2].message.contains("/nonexistent/topic.md"));
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = RunConfig::from_json("{\n  \"seed\": \"x\"\n}").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
        assert!(matches!(RunConfig::from_json(r#"{"sede": 1}"#), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn idea_selection_forms() {
        let all: IdeaSelection = serde_json::from_str("\"all\"").unwrap();
        assert!(all.includes(7));
        let some: IdeaSelection = serde_json::from_str("[0, 2]").unwrap();
        assert!(some.includes(2) && !some.includes(1));
    }

    #[test]
    fn role_overrides_merge_with_defaults() {
        let c = RunConfig::from_json(
            r#"{"model_roles":[{"role":"writeup","model_id":"m","max_tokens":100,"temperature":0.0}]}"#,
        )
        .unwrap();
        let roles = c.roles();
        assert_eq!(roles.len(), Role::ALL.len());
        assert_eq!(roles.iter().find(|r| r.role == Role::Writeup).unwrap().max_tokens, 100);
        assert_eq!(roles.iter().find(|r| r.role == Role::Evaluator).unwrap().max_tokens, 8192);
    }
}
