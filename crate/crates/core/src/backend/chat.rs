//! Chat-completion wire types and transport.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENDPOINT_VAR: &str = "PATHSEL_ENDPOINT";
pub const API_KEY_VAR: &str = "PATHSEL_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Body of a completion request. Field order here is the wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub n: usize,
}

impl ChatRequest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("request serialization is infallible")
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct WireChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub texts: Vec<String>,
    pub finish_reasons: Vec<Option<String>>,
}

impl ChatResponse {
    pub fn parse(body: &str) -> Result<Self> {
        let wire: WireResponse =
            serde_json::from_str(body).map_err(|e| Error::MalformedResponse(format!("chat response: {e}")))?;
        if wire.choices.is_empty() {
            return Err(Error::MalformedResponse("response has zero choices".into()));
        }
        Ok(Self {
            texts: wire.choices.iter().map(|c| c.message.content.clone()).collect(),
            finish_reasons: wire.choices.into_iter().map(|c| c.finish_reason).collect(),
        })
    }
}

/// Moves one request body to an endpoint and returns the response body.
pub trait ChatTransport: Send + Sync {
    fn post(&self, url: &str, body: &str) -> Result<String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(timeout: Duration, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { agent, api_key }
    }

    /// Reads the bearer credential from the environment, if set.
    pub fn from_env(timeout: Duration) -> Self {
        Self::new(timeout, std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()))
    }
}

impl ChatTransport for HttpTransport {
    fn post(&self, url: &str, body: &str) -> Result<String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{url}: reading body: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    /// Retries transport failures with delays base, 2·base, 4·base, ...
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match f() {
                Err(Error::Transport(msg)) if attempt < self.attempts => {
                    tracing::warn!(attempt, %msg, "transport failure, retrying");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// A model behind an endpoint.
#[derive(Clone)]
pub struct ChatClient {
    pub transport: Arc<dyn ChatTransport>,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub retry: RetryPolicy,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .finish()
    }
}

impl ChatClient {
    pub fn request(&self, prompt: &str, n: usize) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: self.temperature,
            n,
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let body = request.to_json();
        let raw = self.retry.run(|| self.transport.post(&self.endpoint, &body))?;
        ChatResponse::parse(&raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn wire_shape_is_fixed() {
        let r = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("hi \"there\"")],
            temperature: 1.0,
            n: 8,
        };
        assert_eq!(
            r.to_json(),
            r#"{"model":"m","messages":[{"role":"user","content":"hi \"there\""}],"temperature":1.0,"n":8}"#
        );
        assert_eq!(r.to_json(), r.clone().to_json());
    }

    #[test]
    fn zero_choices_rejected() {
        assert!(matches!(ChatResponse::parse(r#"{"choices":[]}"#), Err(Error::MalformedResponse(_))));
        assert!(ChatResponse::parse("not json").is_err());
        let ok = ChatResponse::parse(
            r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"a"},"finish_reason":"stop"}]}"#,
        )
        .unwrap();
        assert_eq!(ok.texts, ["a"]);
        assert_eq!(ok.finish_reasons, [Some("stop".to_string())]);
    }

    struct Flaky {
        failures: Mutex<usize>,
    }

    impl ChatTransport for Flaky {
        fn post(&self, _: &str, _: &str) -> Result<String> {
            let mut f = self.failures.lock().unwrap();
            if *f > 0 {
                *f -= 1;
                return Err(Error::Transport("connection reset".into()));
            }
            Ok(r#"{"choices":[{"message":{"role":"assistant","content":"ok"}}]}"#.into())
        }
    }

    fn client(failures: usize) -> ChatClient {
        ChatClient {
            transport: Arc::new(Flaky {
                failures: Mutex::new(failures),
            }),
            endpoint: "http://stub".into(),
            model: "m".into(),
            temperature: 1.0,
            retry: RetryPolicy {
                attempts: 3,
                base_delay: Duration::ZERO,
            },
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let c = client(2);
        assert_eq!(c.complete(&c.request("q", 1)).unwrap().texts, ["ok"]);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let c = client(3);
        assert!(matches!(c.complete(&c.request("q", 1)), Err(Error::Transport(_))));
    }
}
