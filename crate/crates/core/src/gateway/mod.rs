//! Uniform access to text and vision model backends.
//!
//! A [`Gateway`] owns one [`Backend`] plus the per-role sampling
//! configuration, a bounded retry policy, a client-side token bucket and an
//! in-flight cap. Backends are either the HTTP chat-completion client or the
//! seeded [`MockBackend`].

mod extract;
mod http;
mod limits;
pub mod literature;
mod mock;
mod vision;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use extract::{
    extract_fenced_blocks, extract_last_code_block, extract_last_json_block, prose_outside_blocks, FencedBlock,
};
pub use http::HttpBackend;
pub use limits::{InflightLimiter, TokenBucket};
pub use literature::{FixtureLiterature, LiteratureError, LiteratureResult, LiteratureSearch, ScholarlySearch};
pub use mock::{MockBackend, MockRule, MockScenario};
pub use vision::parse_review;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    CodeGeneration,
    FeedbackAgent,
    VlmFeedback,
    SummaryReport,
    Evaluator,
    Writeup,
    Ideation,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::CodeGeneration,
        Role::FeedbackAgent,
        Role::VlmFeedback,
        Role::SummaryReport,
        Role::Evaluator,
        Role::Writeup,
        Role::Ideation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::CodeGeneration => "code_generation",
            Role::FeedbackAgent => "feedback_agent",
            Role::VlmFeedback => "vlm_feedback",
            Role::SummaryReport => "summary_report",
            Role::Evaluator => "evaluator",
            Role::Writeup => "writeup",
            Role::Ideation => "ideation",
        }
    }

    pub fn accepts_images(self) -> bool {
        matches!(self, Role::VlmFeedback | Role::Writeup)
    }
}

/// Sampling configuration for one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRoleConfig {
    pub role: Role,
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ModelRoleConfig {
    pub fn default_for(role: Role) -> Self {
        let (model_id, temperature) = match role {
            Role::CodeGeneration => ("claude-3-5-sonnet-v2", 0.5),
            Role::FeedbackAgent | Role::VlmFeedback | Role::Evaluator => ("gpt-4o", 0.5),
            Role::SummaryReport => ("gpt-4o", 1.0),
            Role::Writeup => ("o1", 1.0),
            Role::Ideation => ("gpt-4o", 0.5),
        };
        ModelRoleConfig {
            role,
            model_id: model_id.to_string(),
            max_tokens: 8192,
            temperature,
        }
    }

    pub fn defaults() -> Vec<Self> {
        Role::ALL.iter().map(|r| Self::default_for(*r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub media_type: String,
    #[serde(with = "b64")]
    pub bytes: Vec<u8>,
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageAttachment>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message {
            role: MessageRole::System,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message {
            role: MessageRole::User,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message {
            role: MessageRole::Assistant,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn with_image(mut self, media_type: &str, bytes: Vec<u8>) -> Self {
        self.images.push(ImageAttachment {
            media_type: media_type.to_string(),
            bytes,
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub role: Role,
    pub messages: Vec<Message>,
    pub seed: Option<u64>,
}

impl ModelRequest {
    pub fn new(role: Role, messages: Vec<Message>) -> Self {
        ModelRequest {
            role,
            messages,
            seed: None,
        }
    }

    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Hex SHA-256 over role, messages (text and image bytes) and seed.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.role.as_str().as_bytes());
        for m in &self.messages {
            h.update([0u8, m.role as u8]);
            h.update((m.text.len() as u64).to_le_bytes());
            h.update(m.text.as_bytes());
            for img in &m.images {
                h.update((img.bytes.len() as u64).to_le_bytes());
                h.update(&img.bytes);
            }
        }
        if let Some(seed) = self.seed {
            h.update(seed.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub usage: Usage,
    pub backend: String,
}

/// What a backend actually receives: the request with sampling parameters
/// resolved from the role configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutboundRequest {
    pub role: Role,
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub messages: Vec<Message>,
    pub seed: Option<u64>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("rate limited")]
    RateLimited,
    #[error("backend rejected request: {0}")]
    Fatal(String),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, request: &OutboundRequest) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("gateway failed after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: BackendError },
    #[error("backend error: {0}")]
    Backend(BackendError),
    #[error("role {0} does not accept image attachments")]
    ImageNotAllowed(&'static str),
    #[error("completion contained no fenced code block")]
    EmptyCompletion,
    #[error("malformed review: {0}")]
    MalformedReview(String),
    #[error("image could not be decoded: {0}")]
    UndecodableImage(String),
}

/// Retry with exponential backoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first one
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u64 << (attempt - 2).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Upper bound on the total time spent sleeping between attempts.
    pub fn total_backoff(&self) -> Duration {
        (1..=self.max_attempts).map(|a| self.delay_before(a)).sum()
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    roles: BTreeMap<Role, ModelRoleConfig>,
    retry: RetryPolicy,
    bucket: Option<TokenBucket>,
    inflight: InflightLimiter,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            roles: ModelRoleConfig::defaults().into_iter().map(|c| (c.role, c)).collect(),
            retry: RetryPolicy::default(),
            bucket: None,
            inflight: InflightLimiter::new(8),
        }
    }

    pub fn mock(seed: u64, scenario: MockScenario) -> Self {
        Self::new(Arc::new(MockBackend::new(seed, scenario))).with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 0,
            max_delay_ms: 0,
        })
    }

    pub fn with_roles(mut self, roles: impl IntoIterator<Item = ModelRoleConfig>) -> Self {
        for c in roles {
            self.roles.insert(c.role, c);
        }
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, bucket: TokenBucket) -> Self {
        self.bucket = Some(bucket);
        self
    }

    pub fn with_max_inflight(mut self, cap: usize) -> Self {
        self.inflight = InflightLimiter::new(cap);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn role_config(&self, role: Role) -> &ModelRoleConfig {
        &self.roles[&role]
    }

    /// Completes with the gateway's configuration for the request's role.
    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let config = self.role_config(request.role).clone();
        self.complete_with(request, &config)
    }

    pub fn complete_with(
        &self,
        request: &ModelRequest,
        config: &ModelRoleConfig,
    ) -> Result<ModelResponse, GatewayError> {
        if !request.role.accepts_images() && request.messages.iter().any(|m| !m.images.is_empty()) {
            return Err(GatewayError::ImageNotAllowed(request.role.as_str()));
        }
        let outbound = OutboundRequest {
            role: request.role,
            model_id: config.model_id.clone(),
            max_tokens: config.max_tokens,
            temperature: config.temperature,
            messages: request.messages.clone(),
            seed: request.seed,
            digest: request.digest(),
        };
        let _slot = self.inflight.acquire();
        let attempts = self.retry.max_attempts.max(1);
        let mut last = BackendError::Transient("no attempt made".into());
        for attempt in 1..=attempts {
            std::thread::sleep(self.retry.delay_before(attempt));
            if let Some(bucket) = &self.bucket {
                bucket.acquire();
            }
            match self.backend.send(&outbound) {
                Ok(reply) => {
                    return Ok(ModelResponse {
                        text: reply.text,
                        usage: reply.usage,
                        backend: self.backend.name().to_string(),
                    })
                }
                Err(BackendError::Fatal(msg)) => return Err(GatewayError::Backend(BackendError::Fatal(msg))),
                Err(e) => {
                    log::warn!("{} attempt {attempt}/{attempts} failed: {e}", request.role.as_str());
                    last = e;
                }
            }
        }
        Err(GatewayError::Exhausted { attempts, last })
    }

    /// Completes and extracts the last fenced code block.
    pub fn complete_code(&self, request: &ModelRequest) -> Result<(ModelResponse, String), GatewayError> {
        let response = self.complete(request)?;
        let code = extract_last_code_block(&response.text).ok_or(GatewayError::EmptyCompletion)?;
        Ok((response, code))
    }

    /// Reviews one figure with the vision role; see [`vision`].
    pub fn review_image(
        &self,
        image: &[u8],
        abstract_text: &str,
        caption: &str,
        figrefs: &[String],
    ) -> Result<crate::review::FigureReview, GatewayError> {
        vision::review_image(self, image, abstract_text, caption, figrefs)
    }
}

/// Rough token estimate for usage counters.
pub(crate) fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Recording {
        seen: Mutex<Vec<OutboundRequest>>,
        fail_first: Mutex<u32>,
    }

    impl Backend for Recording {
        fn name(&self) -> &str {
            "recording"
        }

        fn send(&self, request: &OutboundRequest) -> Result<BackendReply, BackendError> {
            self.seen.lock().unwrap().push(request.clone());
            let mut fails = self.fail_first.lock().unwrap();
            if *fails > 0 {
                *fails -= 1;
                return Err(BackendError::Transient("flaky".into()));
            }
            Ok(BackendReply {
                text: "ok".into(),
                usage: Usage::default(),
            })
        }
    }

    fn recording(fail_first: u32) -> Arc<Recording> {
        Arc::new(Recording {
            seen: Mutex::new(Vec::new()),
            fail_first: Mutex::new(fail_first),
        })
    }

    fn no_delay() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    #[test]
    fn role_parameters_reach_backend() {
        let backend = recording(0);
        let gw = Gateway::new(backend.clone()).with_retry(no_delay());
        for role in [Role::CodeGeneration, Role::SummaryReport, Role::FeedbackAgent] {
            gw.complete(&ModelRequest::new(role, vec![Message::user("hi")])).unwrap();
        }
        let seen = backend.seen.lock().unwrap();
        assert_eq!((seen[0].temperature, seen[0].max_tokens), (0.5, 8192));
        assert_eq!((seen[1].temperature, seen[1].max_tokens), (1.0, 8192));
        assert_eq!((seen[2].temperature, seen[2].max_tokens), (0.5, 8192));
    }

    #[test]
    fn overrides_apply() {
        let backend = recording(0);
        let mut cfg = ModelRoleConfig::default_for(Role::CodeGeneration);
        cfg.temperature = 0.0;
        let gw = Gateway::new(backend.clone()).with_roles([cfg]).with_retry(no_delay());
        gw.complete(&ModelRequest::new(Role::CodeGeneration, vec![Message::user("x")])).unwrap();
        assert_eq!(backend.seen.lock().unwrap()[0].temperature, 0.0);
    }

    #[test]
    fn retries_are_bounded() {
        let backend = recording(5);
        let gw = Gateway::new(backend.clone()).with_retry(no_delay());
        let err = gw
            .complete(&ModelRequest::new(Role::Evaluator, vec![Message::user("x")]))
            .unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 3, .. }));
        assert_eq!(backend.seen.lock().unwrap().len(), 3);

        let backend = recording(2);
        let gw = Gateway::new(backend.clone()).with_retry(no_delay());
        assert!(gw.complete(&ModelRequest::new(Role::Evaluator, vec![Message::user("x")])).is_ok());
        assert_eq!(backend.seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_before(1), Duration::ZERO);
        assert_eq!(p.delay_before(2), Duration::from_millis(500));
        assert_eq!(p.delay_before(3), Duration::from_millis(1000));
        assert_eq!(p.total_backoff(), Duration::from_millis(1500));
    }

    #[test]
    fn images_rejected_for_text_roles() {
        let gw = Gateway::new(recording(0)).with_retry(no_delay());
        let req = ModelRequest::new(
            Role::CodeGeneration,
            vec![Message::user("look").with_image("image/png", vec![1, 2, 3])],
        );
        assert_eq!(gw.complete(&req), Err(GatewayError::ImageNotAllowed("code_generation")));
    }

    #[test]
    fn digest_depends_on_seed_and_content() {
        let a = ModelRequest::new(Role::Writeup, vec![Message::user("x")]);
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.digest(), a.clone().seeded(1).digest());
        assert_ne!(a.digest(), ModelRequest::new(Role::Writeup, vec![Message::user("y")]).digest());
    }
}
