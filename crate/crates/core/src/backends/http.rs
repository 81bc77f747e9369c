//! OpenAI-compatible `/chat/completions` client.
//!
//! A request for `count` traces is split into chunks of at most
//! `chunk_size` completions (`n`), dispatched in waves of `max_in_flight`
//! concurrent calls. 429, 5xx and connection failures are retried with
//! capped exponential backoff; 401/403 fail immediately.

use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendError, SampleBatch, SampleRequest, TraceSampler};
use crate::entropy::top_k_entropy;
use crate::trace_store::TraceRecord;

fn default_chunk_size() -> u32 {
    16
}
fn default_max_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    600
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_max_retries() -> u32 {
    3
}
fn default_initial_backoff_ms() -> u64 {
    500
}
fn default_max_backoff_ms() -> u64 {
    8000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// e.g. `http://localhost:8000/v1`
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Ask for per-token log-probabilities to estimate entropy.
    #[serde(default)]
    pub logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
    /// Environment variable holding the bearer token. Unset means no auth.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_initial_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            chunk_size: default_chunk_size(),
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
            max_tokens: None,
            logprobs: false,
            top_logprobs: None,
            api_key_env: default_api_key_env(),
            max_retries: default_max_retries(),
            initial_backoff_ms: default_initial_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.to_string()));
        if self.base_url.is_empty() {
            return bad("base_url is empty");
        }
        if self.model.is_empty() {
            return bad("model is empty");
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive");
        }
        if self.top_logprobs.is_some() && !self.logprobs {
            return bad("top_logprobs requires logprobs = true");
        }
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    completion_tokens: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<u32>,
    message: Message,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Deserialize)]
struct TopLogprob {
    logprob: f64,
}

/// One completion as received, before it is numbered.
#[derive(Debug)]
struct Completion {
    text: Option<String>,
    mean_entropy: Option<f64>,
    token_count: u64,
}

fn completions(resp: CompletionResponse) -> Vec<Completion> {
    let n = resp.choices.len().max(1) as u64;
    let usage_tokens = resp.usage.and_then(|u| u.completion_tokens).map(|t| t / n);
    let mut choices = resp.choices;
    choices.sort_by_key(|c| c.index);
    choices
        .into_iter()
        .map(|c| {
            let tokens = c.logprobs.and_then(|l| l.content).unwrap_or_default();
            let entropies: Vec<f64> = tokens
                .iter()
                .filter_map(|t| {
                    if t.top_logprobs.is_empty() {
                        // only the sampled token's logprob: nothing to spread over
                        t.logprob.is_finite().then_some(0.0)
                    } else {
                        let lps: Vec<f64> = t.top_logprobs.iter().map(|x| x.logprob).collect();
                        top_k_entropy(&lps).ok()
                    }
                })
                .collect();
            let mean_entropy =
                (!entropies.is_empty()).then(|| entropies.iter().sum::<f64>() / entropies.len() as f64);
            let token_count = if tokens.is_empty() {
                usage_tokens.unwrap_or(0)
            } else {
                tokens.len() as u64
            };
            Completion {
                text: c.message.content,
                mean_entropy,
                token_count,
            }
        })
        .collect()
}

pub struct HttpBackend {
    config: EndpointConfig,
    client: Client,
    api_key: Option<String>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend {
            config,
            client,
            api_key,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, request: &SampleRequest, n: u32) -> serde_json::Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature.as_f64(),
            "n": n,
        });
        let obj = body.as_object_mut().expect("object literal");
        if let Some(m) = self.config.max_tokens {
            obj.insert("max_tokens".into(), json!(m));
        }
        if self.config.logprobs {
            obj.insert("logprobs".into(), json!(true));
            if let Some(k) = self.config.top_logprobs {
                obj.insert("top_logprobs".into(), json!(k));
            }
        }
        body
    }

    /// One call, no retries. `Err(Transient)` marks a retryable failure.
    fn call_once(&self, body: &serde_json::Value) -> Result<Vec<Completion>, BackendError> {
        let mut req = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(BackendError::Auth(status.as_u16()));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {}", status.as_u16())));
        }
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        Ok(completions(parsed))
    }

    fn call_with_retries(&self, request: &SampleRequest, n: u32) -> Result<Vec<Completion>, BackendError> {
        let body = self.body(request, n);
        let mut attempt = 0u32;
        loop {
            match self.call_once(&body) {
                Err(BackendError::Transient(msg)) => {
                    if attempt >= self.config.max_retries {
                        return Err(BackendError::RetriesExhausted {
                            attempts: attempt + 1,
                            last: msg,
                        });
                    }
                    let wait = self.config.backoff(attempt);
                    log::warn!(
                        "{} T={}: {msg}; retrying in {} ms",
                        request.question_id,
                        request.temperature,
                        wait.as_millis()
                    );
                    thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Samples `request.count` completions. Records are numbered contiguously
/// from `first_index` in arrival order; a server returning fewer choices
/// than asked shows up as `deficit`.
pub fn http_sample(backend: &HttpBackend, request: &SampleRequest) -> Result<SampleBatch, BackendError> {
    request.check()?;
    let chunk = backend.config.chunk_size;
    let sizes: Vec<u32> = (0..request.count)
        .step_by(chunk as usize)
        .map(|start| chunk.min(request.count - start))
        .collect();

    let mut received: Vec<Completion> = Vec::with_capacity(request.count as usize);
    for wave in sizes.chunks(backend.config.max_in_flight) {
        let results: Vec<Result<Vec<Completion>, BackendError>> = thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|n| s.spawn(move || backend.call_with_retries(request, *n)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("request thread panicked"))
                .collect()
        });
        for (n, r) in wave.iter().zip(results) {
            let mut got = r?;
            got.truncate(*n as usize);
            received.extend(got);
        }
    }

    let deficit = u64::from(request.count) - received.len() as u64;
    if deficit > 0 {
        log::warn!(
            "{} T={}: requested {}, received {}",
            request.question_id,
            request.temperature,
            request.count,
            received.len()
        );
    }
    let records = received
        .into_iter()
        .enumerate()
        .map(|(i, c)| TraceRecord {
            run_id: request.run_id.clone(),
            question_id: request.question_id.clone(),
            temperature: request.temperature,
            round: request.round,
            sample_index: request.first_index + i as u32,
            answer_raw: c.text,
            answer_extracted: None,
            correct: None,
            mean_entropy: c.mean_entropy,
            token_count: c.token_count,
        })
        .collect();
    Ok(SampleBatch { records, deficit })
}

impl TraceSampler for HttpBackend {
    fn sample(&self, request: &SampleRequest) -> Result<SampleBatch, BackendError> {
        http_sample(self, request)
    }

    fn entropy_is_lower_bound(&self) -> bool {
        self.config.logprobs
    }
}
