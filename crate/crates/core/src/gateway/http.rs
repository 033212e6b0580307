//! OpenAI-compatible chat-completion client.

use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{estimate_tokens, Backend, BackendError, BackendReply, MessageRole, OutboundRequest, Usage};

pub struct HttpBackend {
    name: String,
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    /// `api_key_env` names the environment variable holding the credential.
    pub fn new(base_url: &str, api_key_env: Option<&str>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        let api_key = api_key_env.and_then(|var| std::env::var(var).ok());
        Ok(HttpBackend {
            name: format!("http:{base_url}"),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }

    pub fn request_body(request: &OutboundRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    MessageRole::System => "system",
                    MessageRole::User => "user",
                    MessageRole::Assistant => "assistant",
                };
                if m.images.is_empty() {
                    json!({"role": role, "content": m.text})
                } else {
                    let mut parts = vec![json!({"type": "text", "text": m.text})];
                    for img in &m.images {
                        let data = base64::engine::general_purpose::STANDARD.encode(&img.bytes);
                        parts.push(json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{};base64,{data}", img.media_type)}
                        }));
                    }
                    json!({"role": role, "content": parts})
                }
            })
            .collect();
        let mut body = json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn send(&self, request: &OutboundRequest) -> Result<BackendReply, BackendError> {
        let mut call = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&Self::request_body(request));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(BackendError::RateLimited);
        }
        if status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| BackendError::Transient(format!("undecodable response: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Transient("response had no choices".into()))?;
        let usage = match parsed.usage {
            Some(u) => Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            },
            None => Usage {
                prompt_tokens: request.messages.iter().map(|m| estimate_tokens(&m.text)).sum(),
                completion_tokens: estimate_tokens(&text),
            },
        };
        Ok(BackendReply { text, usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, Message, ModelRequest, RetryPolicy, Role};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves canned responses in order and records request bodies.
    fn serve(responses: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<Value>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        std::thread::spawn(move || {
            for (code, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(serde_json::from_slice(&buf).unwrap());
                let reply = format!(
                    "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    const OK: &str = r#"{"choices":[{"message":{"content":"hello"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;

    #[test]
    fn sends_role_parameters_and_parses_reply() {
        let (url, seen) = serve(vec![(200, OK)]);
        let backend = HttpBackend::new(&url, None, Duration::from_secs(5)).unwrap();
        let gw = Gateway::new(Arc::new(backend));
        let resp = gw
            .complete(&ModelRequest::new(Role::SummaryReport, vec![Message::user("hi")]))
            .unwrap();
        assert_eq!(resp.text, "hello");
        assert_eq!(resp.usage.prompt_tokens, 3);
        let body = &seen.lock().unwrap()[0];
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["max_tokens"], 8192);
        assert_eq!(body["messages"][0]["content"], "hi");
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, seen) = serve(vec![(503, "{}"), (429, "{}"), (200, OK)]);
        let backend = HttpBackend::new(&url, None, Duration::from_secs(5)).unwrap();
        let gw = Gateway::new(Arc::new(backend)).with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 1,
            max_delay_ms: 2,
        });
        let resp = gw
            .complete(&ModelRequest::new(Role::CodeGeneration, vec![Message::user("x")]))
            .unwrap();
        assert_eq!(resp.text, "hello");
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn image_parts_encoded() {
        let req = OutboundRequest {
            role: Role::VlmFeedback,
            model_id: "m".into(),
            max_tokens: 10,
            temperature: 0.5,
            messages: vec![Message::user("see").with_image("image/png", vec![1, 2])],
            seed: Some(4),
            digest: String::new(),
        };
        let body = HttpBackend::request_body(&req);
        assert_eq!(body["seed"], 4);
        let url = body["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert_eq!(url, "data:image/png;base64,AQI=");
    }
}
