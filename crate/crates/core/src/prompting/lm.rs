//! Language-model completion endpoints.
//!
//! Wire contract: `POST <url>` with
//! `{"prompt", "max_tokens", "temperature", "top_p", "stop", "presence_penalty", "frequency_penalty"}`
//! answered by `{"text": "..."}`.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DecodingConfig;
use crate::text::{fnv1a, keyed_rng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LmError {
    /// Worth retrying: 5xx, 429, timeouts and dropped connections.
    #[error("transient failure (status {status:?}): {message}")]
    Transient { status: Option<u16>, message: String },
    #[error("endpoint returned {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub stop: String,
    pub presence_penalty: f64,
    pub frequency_penalty: f64,
    /// Which of the n samples for this prompt is being requested. Not sent
    /// over the wire; lets deterministic backends vary their output.
    #[serde(skip)]
    pub sample_index: usize,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, dec: &DecodingConfig, sample_index: usize) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens: dec.max_tokens,
            temperature: dec.temperature,
            top_p: dec.top_p,
            stop: dec.stop.clone(),
            presence_penalty: dec.presence_penalty,
            frequency_penalty: dec.frequency_penalty,
            sample_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
}

pub trait LmEndpoint: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, LmError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(4),
        }
    }
}

/// Calls `endpoint`, retrying transient failures with exponential backoff,
/// and cuts the completion at the first stop sequence.
pub fn complete(
    endpoint: &dyn LmEndpoint,
    req: &CompletionRequest,
    retry: &RetryPolicy,
) -> Result<String, LmError> {
    let mut delay = retry.base_delay;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match endpoint.complete(req) {
            Ok(text) => return Ok(truncate_at_stop(&text, &req.stop).to_string()),
            Err(e @ LmError::Transient { .. }) => {
                if attempt >= retry.max_attempts {
                    return Err(LmError::RetriesExhausted {
                        attempts: attempt,
                        last: e.to_string(),
                    });
                }
                log::debug!("attempt {attempt} failed ({e}); retrying in {delay:?}");
                std::thread::sleep(delay);
                delay = (delay * 2).min(retry.max_delay);
            }
            Err(e) => return Err(e),
        }
    }
}

pub fn truncate_at_stop<'a>(text: &'a str, stop: &str) -> &'a str {
    if stop.is_empty() {
        return text;
    }
    match text.find(stop) {
        Some(i) => &text[..i],
        None => text,
    }
}

/// Token bucket; `rps <= 0` disables limiting.
#[derive(Debug)]
pub struct RateLimiter {
    rps: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(rps: f64) -> Self {
        let burst = rps.max(1.0);
        RateLimiter {
            rps,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        if self.rps <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut st = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.rps;
                st.0 = (st.0 + refill).min(self.rps.max(1.0));
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.rps)
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpEndpointConfig {
    pub url: String,
    /// e.g. `Authorization`.
    pub api_key_header: Option<String>,
    /// e.g. `Bearer sk-...`. Usually supplied through the environment.
    pub api_key: Option<String>,
    pub requests_per_second: f64,
    pub timeout_secs: u64,
}

impl Default for HttpEndpointConfig {
    fn default() -> Self {
        HttpEndpointConfig {
            url: String::new(),
            api_key_header: None,
            api_key: None,
            requests_per_second: 5.0,
            timeout_secs: 60,
        }
    }
}

pub struct HttpEndpoint {
    cfg: HttpEndpointConfig,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
}

impl HttpEndpoint {
    pub fn new(cfg: HttpEndpointConfig) -> Result<Self, LmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LmError::BadResponse(format!("http client: {e}")))?;
        let limiter = RateLimiter::new(cfg.requests_per_second);
        Ok(HttpEndpoint { cfg, client, limiter })
    }
}

impl LmEndpoint for HttpEndpoint {
    fn complete(&self, req: &CompletionRequest) -> Result<String, LmError> {
        self.limiter.acquire();
        let mut builder = self.client.post(&self.cfg.url).json(req);
        if let (Some(h), Some(v)) = (&self.cfg.api_key_header, &self.cfg.api_key) {
            builder = builder.header(h.as_str(), v.as_str());
        }
        let resp = builder.send().map_err(|e| LmError::Transient {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| LmError::Transient {
            status: Some(status.as_u16()),
            message: e.to_string(),
        })?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(LmError::Transient {
                status: Some(status.as_u16()),
                message: body,
            });
        }
        if !status.is_success() {
            return Err(LmError::Http {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str::<CompletionResponse>(&body)
            .map(|r| r.text)
            .map_err(|e| LmError::BadResponse(format!("{e}: {body}")))
    }
}

/// Deterministic stand-in for a real LM. Output depends only on
/// `(seed, prompt, sample_index)`.
///
/// It reads the numbered items back out of the prompt and mostly recombines
/// premises and hypotheses across items, with a share of outputs that
/// exercise every downstream filter: verbatim copies, identical sides,
/// instruction leakage, too-short sides and malformed text.
#[derive(Debug, Clone)]
pub struct MockLm {
    pub seed: u64,
}

impl MockLm {
    pub fn new(seed: u64) -> Self {
        MockLm { seed }
    }
}

/// (premise, relation word, hypothesis) triples recovered from a rendered prompt.
pub(crate) fn prompt_items(prompt: &str) -> Vec<(String, String, String)> {
    let lines: Vec<&str> = prompt.lines().collect();
    let mut out = Vec::new();
    for w in lines.windows(2) {
        let Some(premise) = strip_number(w[0]) else { continue };
        if let Some((word, hyp)) = w[1].split_once(": ") {
            if !word.is_empty() && word.chars().all(char::is_alphabetic) {
                out.push((premise.to_string(), word.to_string(), hyp.to_string()));
            }
        }
    }
    out
}

fn strip_number(line: &str) -> Option<&str> {
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let rest = line[digits..].strip_prefix('.')?;
    let rest = rest.trim_start();
    (!rest.is_empty()).then_some(rest)
}

impl LmEndpoint for MockLm {
    fn complete(&self, req: &CompletionRequest) -> Result<String, LmError> {
        let key = format!("{:016x}:{}", fnv1a(req.prompt.as_bytes()), req.sample_index);
        let mut rng = keyed_rng(self.seed, &key);
        let items = prompt_items(&req.prompt);
        if items.is_empty() {
            return Ok(" I am not sure what to write.".into());
        }
        let word = items[0].1.clone();
        let n = items.len();
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n);
        if n > 1 && j == i {
            j = (j + 1) % n;
        }
        let (p, _, _) = &items[i];
        let (_, _, h) = &items[j];
        let roll: f64 = rng.gen();
        let body = if roll < 0.52 {
            format!(" {p}\n{word}: {h}")
        } else if roll < 0.62 {
            let (cp, _, ch) = &items[i];
            format!(" {cp}\n{word}: {ch}")
        } else if roll < 0.74 {
            format!(" {p}\n{word}: {}", p.to_lowercase().trim_end_matches('.'))
        } else if roll < 0.79 {
            format!(" {p}\n{word}: This pair of sentences has the same relationship.")
        } else if roll < 0.84 {
            format!(" {p}\n{word}: Yes.")
        } else if roll < 0.90 {
            format!(" {p} {h}")
        } else if roll < 0.93 {
            format!(" {p}\n{word}: {h}\n{word}: {h}")
        } else {
            // Hypothesis from one item with the other item's final clause.
            let tail = items[j].0.split_whitespace().last().unwrap_or("today");
            format!(" {p}\n{word}: {} {tail}", h.trim_end_matches('.'))
        };
        // Real endpoints often run past the item; the stop sequence cuts it.
        if rng.gen_bool(0.3) {
            Ok(format!("{body}\n\n{}. {}", n + 2, items[0].0))
        } else {
            Ok(body)
        }
    }
}
