//! Chat-completion client for the judge.
//!
//! Request: `{"model", "messages": [{"role": "user", "content"}], "temperature": 0}`.
//! Response: `{"choices": [{"message": {"content"}}]}`.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENV_URL: &str = "SOURCELAB_JUDGE_URL";
pub const ENV_MODEL: &str = "SOURCELAB_JUDGE_MODEL";
pub const ENV_TOKEN: &str = "SOURCELAB_JUDGE_TOKEN";
pub const ENV_TIMEOUT: &str = "SOURCELAB_JUDGE_TIMEOUT_SECS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: Option<String>,
    pub model: String,
    /// Usually supplied through the environment rather than a config file.
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: None,
            model: "judge".to_string(),
            token: None,
            timeout_secs: 60,
            max_attempts: 3,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

impl EndpointConfig {
    /// Overlays values from `SOURCELAB_JUDGE_*` environment variables.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(url) = std::env::var(ENV_URL) {
            self.url = Some(url);
        }
        if let Ok(model) = std::env::var(ENV_MODEL) {
            self.model = model;
        }
        if let Ok(token) = std::env::var(ENV_TOKEN) {
            self.token = Some(token);
        }
        if let Ok(t) = std::env::var(ENV_TIMEOUT) {
            self.timeout_secs = t
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_TIMEOUT}={t} is not a whole number of seconds")))?;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallReply {
    Text(String),
    /// The endpoint refused the prompt as too long.
    ContextExceeded(String),
    /// Retries exhausted or a non-retryable error.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallResult {
    pub reply: CallReply,
    pub attempts: u32,
    pub latency: Duration,
}

/// Anything that can answer a judge prompt.
pub trait JudgeBackend: Sync {
    fn complete(&self, prompt: &str) -> CallResult;
}

impl<F> JudgeBackend for F
where
    F: Fn(&str) -> String + Sync,
{
    fn complete(&self, prompt: &str) -> CallResult {
        CallResult {
            reply: CallReply::Text(self(prompt)),
            attempts: 1,
            latency: Duration::ZERO,
        }
    }
}

/// Stands in when no endpoint is configured: every call fails, so every
/// disagreement keeps the reranker's answer.
#[derive(Debug, Clone)]
pub struct NoEndpoint(pub String);

impl JudgeBackend for NoEndpoint {
    fn complete(&self, _prompt: &str) -> CallResult {
        CallResult {
            reply: CallReply::Failed(self.0.clone()),
            attempts: 0,
            latency: Duration::ZERO,
        }
    }
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
    temperature: u8,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

/// Blocking HTTP judge with exponential backoff on 429, 5xx and transport
/// errors.
pub struct HttpJudge {
    config: EndpointConfig,
    url: String,
    agent: ureq::Agent,
}

enum Attempt {
    Done(CallReply),
    Retry(String),
}

impl HttpJudge {
    pub fn new(config: EndpointConfig) -> Result<HttpJudge> {
        let url = config
            .url
            .clone()
            .ok_or_else(|| Error::Config(format!("judge endpoint url not set (config or {ENV_URL})")))?;
        if config.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(HttpJudge { config, url, agent })
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport error: {e}")),
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        match status {
            200..=299 => match serde_json::from_str::<ChatResponse>(&text) {
                Ok(parsed) => match parsed.choices.into_iter().next().and_then(|c| c.message.content) {
                    Some(content) => Attempt::Done(CallReply::Text(content)),
                    None => Attempt::Done(CallReply::Failed("response without choices[0].message.content".into())),
                },
                Err(e) => Attempt::Done(CallReply::Failed(format!("malformed response body: {e}"))),
            },
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            413 => Attempt::Done(CallReply::ContextExceeded(text)),
            400..=499 if mentions_context_limit(&text) => Attempt::Done(CallReply::ContextExceeded(text)),
            _ => Attempt::Done(CallReply::Failed(format!("HTTP {status}: {text}"))),
        }
    }
}

fn mentions_context_limit(body: &str) -> bool {
    let b = body.to_ascii_lowercase();
    ["context_length_exceeded", "context length", "maximum context", "too many tokens", "prompt is too long"]
        .iter()
        .any(|needle| b.contains(needle))
}

impl JudgeBackend for HttpJudge {
    fn complete(&self, prompt: &str) -> CallResult {
        let body = serde_json::to_string(&ChatRequest {
            model: &self.config.model,
            messages: [Message {
                role: "user",
                content: prompt,
            }],
            temperature: 0,
        })
        .expect("request serializes");
        let start = Instant::now();
        let mut attempts = 0;
        let reply = loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(reply) => break reply,
                Attempt::Retry(why) if attempts >= self.config.max_attempts => {
                    log::error!("judge endpoint failed after {attempts} attempts: {why}");
                    break CallReply::Failed(why);
                }
                Attempt::Retry(why) => {
                    let delay = Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << (attempts - 1)));
                    log::warn!("judge attempt {attempts} failed ({why}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                }
            }
        };
        if attempts > 1 {
            log::info!("judge call finished after {} retries", attempts - 1);
        }
        CallResult {
            reply,
            attempts,
            latency: start.elapsed(),
        }
    }
}
