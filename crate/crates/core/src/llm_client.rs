//! Single-turn chat completion behind a backend trait.
//!
//! Two backends ship here: [`ReplayBackend`] serves recorded transcripts and
//! [`OpenAiBackend`] talks to any OpenAI-compatible `/chat/completions`
//! endpoint. [`LlmClient`] adds retries, a concurrency limiter and a
//! persisted [`TranscriptCache`] so every live run can be replayed later.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, LazyLock, Mutex};
use std::time::Duration;
#[cfg(feature = "http")]
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::OptionLabel;

pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const API_KEY_ENV: &str = "METAPHOR_PROMPT_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("replay transcript has no response for prompt hash {0}")]
    ReplayMiss(String),
    #[error("{0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request `{tag}` failed after {attempts} attempt(s): {source}")]
    Exhausted {
        tag: String,
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("request `{tag}`: {source}")]
    Backend {
        tag: String,
        #[source]
        source: BackendError,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transcript {path}: {message}")]
    Transcript { path: PathBuf, message: String },
}

/// Hex SHA-256 of the prompt text.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Item id plus mode, used in diagnostics.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(prompt: impl Into<String>, tag: impl Into<String>) -> Self {
        ChatRequest { prompt: prompt.into(), temperature: 0.0, max_tokens: DEFAULT_MAX_TOKENS, tag: tag.into() }
    }

    fn validate(&self) -> Result<(), ClientError> {
        if self.prompt.is_empty() {
            return Err(ClientError::InvalidRequest(format!("`{}` has an empty prompt", self.tag)));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ClientError::InvalidRequest(format!("`{}` has negative temperature", self.tag)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: String,
    #[serde(default)]
    pub latency: Duration,
    #[serde(default)]
    pub usage: Option<TokenUsage>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse { text: text.into(), finish_reason: "stop".into(), latency: Duration::ZERO, usage: None }
    }
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Whether responses should be written to the transcript cache.
    fn records(&self) -> bool {
        true
    }
}

/// One transcript line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub backend: String,
    pub prompt_hash: String,
    pub response_text: String,
    pub finish_reason: String,
}

fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, ClientError> {
    let err = |message: String| ClientError::Transcript { path: path.to_path_buf(), message };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Deterministic backend serving recorded responses by prompt hash.
pub struct ReplayBackend {
    responses: HashMap<String, ChatResponse>,
}

impl ReplayBackend {
    pub fn new(records: impl IntoIterator<Item = TranscriptRecord>) -> Self {
        let responses = records
            .into_iter()
            .map(|r| {
                let response = ChatResponse {
                    text: r.response_text,
                    finish_reason: r.finish_reason,
                    latency: Duration::ZERO,
                    usage: None,
                };
                (r.prompt_hash, response)
            })
            .collect();
        ReplayBackend { responses }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        Ok(Self::new(read_transcript(path.as_ref())?))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let hash = prompt_hash(&request.prompt);
        self.responses.get(&hash).cloned().ok_or(BackendError::ReplayMiss(hash))
    }

    fn records(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

fn default_concurrency() -> usize {
    4
}

fn default_retries() -> u32 {
    3
}

/// OpenAI-style chat completion over HTTP.
#[cfg(feature = "http")]
pub struct OpenAiBackend {
    id: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl OpenAiBackend {
    pub fn new(config: &LiveConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .new_agent();
        OpenAiBackend {
            id: format!("openai:{}", config.model_name),
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model_name.clone(),
            api_key,
            agent,
        }
    }

    pub fn from_env(config: &LiveConfig) -> Self {
        Self::new(config, std::env::var(API_KEY_ENV).ok())
    }
}

#[cfg(feature = "http")]
impl ChatBackend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let started = Instant::now();
        let mut response = call.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(401 | 403) => BackendError::Auth(e.to_string()),
            ureq::Error::StatusCode(408 | 409 | 429) => BackendError::Transient(e.to_string()),
            ureq::Error::StatusCode(code) if code >= 500 => BackendError::Transient(e.to_string()),
            ureq::Error::StatusCode(_) => BackendError::Fatal(e.to_string()),
            other => BackendError::Transient(other.to_string()),
        })?;
        let json: serde_json::Value =
            response.body_mut().read_json().map_err(|e| BackendError::Transient(e.to_string()))?;
        let choice = &json["choices"][0];
        let text = choice["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::Fatal(format!("response without message content: {json}")))?;
        let usage = json.get("usage").and_then(|u| {
            Some(TokenUsage {
                prompt_tokens: u["prompt_tokens"].as_u64()?,
                completion_tokens: u["completion_tokens"].as_u64()?,
            })
        });
        Ok(ChatResponse {
            text: text.to_string(),
            finish_reason: choice["finish_reason"].as_str().unwrap_or("unknown").to_string(),
            latency: started.elapsed(),
            usage,
        })
    }
}

/// Responses keyed by (backend id, prompt hash), optionally appended to a file.
pub struct TranscriptCache {
    entries: Mutex<HashMap<(String, String), ChatResponse>>,
    sink: Mutex<Option<File>>,
}

impl TranscriptCache {
    pub fn in_memory() -> Self {
        TranscriptCache { entries: Mutex::new(HashMap::new()), sink: Mutex::new(None) }
    }

    /// Loads existing records (if any) and appends new ones to `path`.
    pub fn persistent(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            for r in read_transcript(path)? {
                entries.insert((r.backend, r.prompt_hash), ChatResponse::text(r.response_text));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ClientError::Transcript { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(TranscriptCache { entries: Mutex::new(entries), sink: Mutex::new(Some(file)) })
    }

    pub fn get(&self, backend: &str, hash: &str) -> Option<ChatResponse> {
        self.entries.lock().expect("cache lock").get(&(backend.to_string(), hash.to_string())).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, backend: &str, hash: &str, response: &ChatResponse) -> std::io::Result<()> {
        let record = TranscriptRecord {
            backend: backend.to_string(),
            prompt_hash: hash.to_string(),
            response_text: response.text.clone(),
            finish_reason: response.finish_reason.clone(),
        };
        if let Some(file) = self.sink.lock().expect("sink lock").as_mut() {
            writeln!(file, "{}", serde_json::to_string(&record).expect("record serializes"))?;
            file.flush()?;
        }
        self.entries.lock().expect("cache lock").insert((record.backend, record.prompt_hash), response.clone());
        Ok(())
    }
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(permits: usize) -> Self {
        Limiter { available: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut available = self.available.lock().expect("limiter lock");
        while *available == 0 {
            available = self.freed.wait(available).expect("limiter lock");
        }
        *available -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter lock") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_millis(500) }
    }
}

pub struct LlmClient {
    backend: Box<dyn ChatBackend>,
    cache: TranscriptCache,
    retry: RetryPolicy,
    limiter: Limiter,
    concurrency: usize,
    attempts: AtomicU64,
}

impl LlmClient {
    pub fn new(backend: Box<dyn ChatBackend>, cache: TranscriptCache) -> Self {
        LlmClient {
            backend,
            cache,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(1),
            concurrency: 1,
            attempts: AtomicU64::new(0),
        }
    }

    pub fn replay(backend: ReplayBackend) -> Self {
        Self::new(Box::new(backend), TranscriptCache::in_memory())
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, permits: usize) -> Self {
        self.concurrency = permits.max(1);
        self.limiter = Limiter::new(self.concurrency);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    /// Backend calls issued so far, including retries.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &TranscriptCache {
        &self.cache
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let backend = self.backend.id();
        let hash = prompt_hash(&request.prompt);
        if let Some(hit) = self.cache.get(backend, &hash) {
            return Ok(hit);
        }
        let _permit = self.limiter.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match self.backend.send(request) {
                Ok(response) => {
                    if self.backend.records() {
                        self.cache.insert(backend, &hash, &response).map_err(|e| ClientError::Backend {
                            tag: request.tag.clone(),
                            source: BackendError::Fatal(format!("transcript write failed: {e}")),
                        })?;
                    }
                    log::debug!("`{}` completed on attempt {attempt}", request.tag);
                    return Ok(response);
                }
                Err(BackendError::Transient(message)) if attempt < self.retry.attempts => {
                    let delay = self.retry.base_delay * 2u32.saturating_pow(attempt - 1);
                    log::warn!("`{}` attempt {attempt} failed ({message}), retrying in {delay:?}", request.tag);
                    std::thread::sleep(delay);
                }
                Err(source @ BackendError::Transient(_)) => {
                    return Err(ClientError::Exhausted { tag: request.tag.clone(), attempts: attempt, source });
                }
                Err(source) => return Err(ClientError::Backend { tag: request.tag.clone(), source }),
            }
        }
    }
}

static ANSWER_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?i)(?:the\s+answer\s+is|答案(?:是|为))\s*[:：]?\s*[\(（\[【{"'“‘「]?\s*([A-DＡ-Ｄａ-ｄ])(?:[^A-Za-z]|$)"#,
    )
    .expect("answer pattern compiles")
});

/// Final answer stated in a model response.
///
/// Recognizes `The answer is X` and `答案是X` (also `答案为X`), with optional
/// colon, bracket and fullwidth letters; the last occurrence wins. A response
/// that is nothing but a single option letter counts as that letter.
pub fn extract_answer(text: &str) -> Option<OptionLabel> {
    let last = ANSWER_PATTERN
        .captures_iter(text)
        .last()
        .and_then(|c| c[1].chars().next())
        .and_then(OptionLabel::from_char);
    if last.is_some() {
        return last;
    }
    let mut chars = text.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => OptionLabel::from_char(c),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl ChatBackend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }

        fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Transient(format!("simulated failure {n}")))
            } else {
                Ok(ChatResponse::text(format!("echo {}", request.prompt)))
            }
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy { attempts: 3, base_delay: Duration::ZERO }
    }

    #[test]
    fn replay_hit_and_miss() {
        let record = TranscriptRecord {
            backend: "live".into(),
            prompt_hash: prompt_hash("hello"),
            response_text: "The answer is C.".into(),
            finish_reason: "stop".into(),
        };
        let client = LlmClient::replay(ReplayBackend::new([record]));
        assert_eq!(client.complete(&ChatRequest::new("hello", "t")).unwrap().text, "The answer is C.");
        match client.complete(&ChatRequest::new("other", "t")) {
            Err(ClientError::Backend { source: BackendError::ReplayMiss(hash), .. }) => {
                assert_eq!(hash, prompt_hash("other"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retries_transient_failures_then_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcript.jsonl");
        let backend = Flaky { failures: 2, calls: AtomicU32::new(0) };
        let client = LlmClient::new(Box::new(backend), TranscriptCache::persistent(&path).unwrap()).with_retry(fast_retry());
        let response = client.complete(&ChatRequest::new("p", "item/full")).unwrap();
        assert_eq!(response.text, "echo p");
        assert_eq!(client.attempts(), 3);
        // persisted before returning, so it can be replayed
        let replay = LlmClient::replay(ReplayBackend::from_file(&path).unwrap());
        assert_eq!(replay.complete(&ChatRequest::new("p", "x")).unwrap().text, "echo p");
        // second call is a cache hit
        client.complete(&ChatRequest::new("p", "item/full")).unwrap();
        assert_eq!(client.attempts(), 3);
    }

    #[test]
    fn gives_up_after_configured_attempts() {
        let backend = Flaky { failures: 10, calls: AtomicU32::new(0) };
        let client = LlmClient::new(Box::new(backend), TranscriptCache::in_memory()).with_retry(fast_retry());
        assert!(matches!(
            client.complete(&ChatRequest::new("p", "t")),
            Err(ClientError::Exhausted { attempts: 3, .. })
        ));
    }

    #[test]
    fn rejects_invalid_requests() {
        let client = LlmClient::replay(ReplayBackend::new([]));
        assert!(matches!(client.complete(&ChatRequest::new("", "t")), Err(ClientError::InvalidRequest(_))));
        let mut req = ChatRequest::new("x", "t");
        req.temperature = -1.0;
        assert!(matches!(client.complete(&req), Err(ClientError::InvalidRequest(_))));
    }

    #[test]
    fn limiter_bounds_in_flight_requests() {
        struct Slow {
            live: AtomicU32,
            peak: AtomicU32,
        }
        impl ChatBackend for Slow {
            fn id(&self) -> &str {
                "slow"
            }
            fn send(&self, _: &ChatRequest) -> Result<ChatResponse, BackendError> {
                let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.live.fetch_sub(1, Ordering::SeqCst);
                Ok(ChatResponse::text("ok"))
            }
        }
        let backend = std::sync::Arc::new(Slow { live: AtomicU32::new(0), peak: AtomicU32::new(0) });
        struct Shared(std::sync::Arc<Slow>);
        impl ChatBackend for Shared {
            fn id(&self) -> &str {
                "slow"
            }
            fn send(&self, r: &ChatRequest) -> Result<ChatResponse, BackendError> {
                self.0.send(r)
            }
        }
        let client = LlmClient::new(Box::new(Shared(backend.clone())), TranscriptCache::in_memory()).with_concurrency(2);
        std::thread::scope(|s| {
            for i in 0..8 {
                let client = &client;
                s.spawn(move || client.complete(&ChatRequest::new(format!("p{i}"), "t")).unwrap());
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_answer("…so the ground is purity. The answer is B."), Some(OptionLabel::B));
        assert_eq!(
            extract_answer("The answer is A. … Reconsidering, the answer is C"),
            Some(OptionLabel::C)
        );
        assert_eq!(extract_answer("B"), Some(OptionLabel::B));
        assert_eq!(extract_answer("no idea"), None);
        assert_eq!(extract_answer("答案是：Ｄ。"), Some(OptionLabel::D));
        assert_eq!(extract_answer("The answer is {a}."), Some(OptionLabel::A));
        assert_eq!(extract_answer("The answer is absolutely unclear"), None);
    }

    #[test]
    fn extraction_is_idempotent_on_its_output() {
        for text in ["The answer is B.", "答案是C", "d", "nothing"] {
            let once = extract_answer(text);
            let again = once.and_then(|l| extract_answer(&l.to_string()));
            assert_eq!(once, again);
        }
    }
}
