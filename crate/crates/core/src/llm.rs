//! Chat-completion and embedding backends behind one gateway.
//!
//! The gateway adds a content-addressed disk cache, retry with exponential
//! backoff for transient transport failures, and a bound on in-flight
//! requests. [`ScriptedBackend`] and [`HashEmbedder`] make every stage
//! runnable offline.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "ADRCM_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid exchange: {0}")]
    InvalidExchange(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("transient transport failure: {0}")]
    Transient(String),
    #[error("scripted backend has no replies left")]
    ScriptExhausted,
    #[error("no scripted reply for request {0}")]
    NoScriptedReply(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl LlmError {
    pub fn is_transient(&self) -> bool {
        matches!(self, LlmError::Transient(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self { model_id: "gpt-3.5-turbo-0125".into(), temperature: 0.0, max_tokens: 1024 }
    }
}

/// One chat request. `route` is an optional stable name for the request
/// (stage, document and pair) that scripted backends can key on; it takes
/// part in the cache key like every other field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub messages: Vec<Message>,
    pub params: ChatParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<String>,
}

impl ChatExchange {
    pub fn new(messages: Vec<Message>, params: ChatParams) -> Result<Self, LlmError> {
        let ex = Self { messages, params, route: None };
        ex.validate()?;
        Ok(ex)
    }

    pub fn user(content: impl Into<String>, params: ChatParams) -> Self {
        Self { messages: vec![Message { role: Role::User, content: content.into() }], params, route: None }
    }

    pub fn with_route(mut self, route: impl Into<String>) -> Self {
        self.route = Some(route.into());
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(LlmError::InvalidExchange("at least one user message is required".into()));
        }
        if self.params.temperature.is_nan() || self.params.temperature < 0.0 {
            return Err(LlmError::InvalidExchange(format!(
                "temperature must be non-negative, got {}",
                self.params.temperature
            )));
        }
        Ok(())
    }

    /// Concatenated content of every message, for inspection.
    pub fn text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }

    /// SHA-256 over the canonical JSON encoding of the whole exchange.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("exchange serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, exchange: &ChatExchange) -> Result<String, LlmError>;

    /// Upper bound on concurrent callers this backend tolerates.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

enum Script {
    Sequence(Mutex<VecDeque<String>>),
    Keyed(BTreeMap<String, String>),
}

/// Canned replies for tests and offline runs.
///
/// A sequence script hands out replies in request order and is therefore
/// single-consumer. A keyed script maps a request's content hash or route to
/// its reply, making the reply a pure function of the request.
pub struct ScriptedBackend {
    script: Script,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn sequence<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            script: Script::Sequence(Mutex::new(replies.into_iter().map(Into::into).collect())),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn keyed(replies: BTreeMap<String, String>) -> Self {
        Self { script: Script::Keyed(replies), calls: AtomicUsize::new(0) }
    }

    /// Loads a keyed script from a JSON object of `key -> reply`.
    pub fn keyed_from_json(text: &str) -> Result<Self, LlmError> {
        let map: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| LlmError::Protocol(format!("bad script file: {e}")))?;
        Ok(Self::keyed(map))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, exchange: &ChatExchange) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.script {
            Script::Sequence(queue) => queue.lock().expect("script lock").pop_front().ok_or(LlmError::ScriptExhausted),
            Script::Keyed(map) => {
                let hash = exchange.content_hash();
                if let Some(r) = map.get(&hash) {
                    return Ok(r.clone());
                }
                if let Some(r) = exchange.route.as_ref().and_then(|route| map.get(route)) {
                    return Ok(r.clone());
                }
                Err(LlmError::NoScriptedReply(exchange.route.clone().unwrap_or(hash)))
            }
        }
    }

    fn max_concurrency(&self) -> Option<usize> {
        match self.script {
            Script::Sequence(_) => Some(1),
            Script::Keyed(_) => None,
        }
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpChatBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: Role,
    content: &'a str,
}

#[derive(Serialize)]
struct WireChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireChatReply {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReplyMessage,
}

#[derive(Deserialize)]
struct WireReplyMessage {
    content: Option<String>,
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into()
}

fn classify_status(status: u16, body: String) -> LlmError {
    if status == 429 || status >= 500 {
        LlmError::Transient(format!("HTTP {status}: {body}"))
    } else {
        LlmError::Protocol(format!("HTTP {status}: {body}"))
    }
}

fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &B,
) -> Result<R, LlmError> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(body).map_err(|e| LlmError::Transient(e.to_string()))?;
    let status = resp.status().as_u16();
    if status != 200 {
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(classify_status(status, text));
    }
    resp.body_mut().read_json::<R>().map_err(|e| LlmError::Protocol(e.to_string()))
}

impl HttpChatBackend {
    /// `base_url` is the API root, e.g. `https://api.openai.com/v1`. The API
    /// key falls back to the `ADRCM_API_KEY` environment variable.
    pub fn new(base_url: &str, api_key: Option<String>) -> Self {
        Self {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key.or_else(|| std::env::var(API_KEY_ENV).ok()),
            agent: agent(Duration::from_secs(120)),
        }
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, exchange: &ChatExchange) -> Result<String, LlmError> {
        let req = WireChatRequest {
            model: &exchange.params.model_id,
            messages: exchange.messages.iter().map(|m| WireMessage { role: m.role, content: &m.content }).collect(),
            temperature: exchange.params.temperature,
            max_tokens: exchange.params.max_tokens,
        };
        let reply: WireChatReply = post_json(&self.agent, &self.endpoint, self.api_key.as_deref(), &req)?;
        reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Protocol("reply has no choices".into()))
    }
}

/// Retry schedule: `base_delay * 2^attempt`, capped at `max_delay`.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 4, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_retries: 0, base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Content-addressed reply cache. Entries live in memory and, when a
/// directory is configured, one file per key on disk.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<BTreeMap<String, String>>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    reply: String,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self { dir: None, memory: Mutex::new(BTreeMap::new()) }
    }

    pub fn on_disk(dir: impl AsRef<Path>) -> Result<Self, LlmError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| LlmError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: Some(dir), memory: Mutex::new(BTreeMap::new()) })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.memory.lock().expect("cache lock").get(key) {
            return Some(v.clone());
        }
        let path = self.path(key)?;
        let text = fs::read_to_string(path).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        (entry.key == key).then(|| {
            self.memory.lock().expect("cache lock").insert(key.to_string(), entry.reply.clone());
            entry.reply
        })
    }

    pub fn put(&self, key: &str, reply: &str) -> Result<(), LlmError> {
        self.memory.lock().expect("cache lock").insert(key.to_string(), reply.to_string());
        if let Some(path) = self.path(key) {
            let entry = CacheEntry { key: key.to_string(), reply: reply.to_string() };
            let tmp = path.with_extension("tmp");
            let body = serde_json::to_vec(&entry).expect("entry serializes");
            fs::write(&tmp, body)
                .and_then(|_| fs::rename(&tmp, &path))
                .map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

struct Slots {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut used = self.used.lock().expect("slot lock");
        while *used >= self.limit {
            used = self.freed.wait(used).expect("slot lock");
        }
        *used += 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("slot lock") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    /// Requests that reached the backend (including retries).
    pub backend_calls: usize,
    pub cache_hits: usize,
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Chat access shared by every pipeline stage.
pub struct LlmGateway {
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    slots: Slots,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl LlmGateway {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self::from_boxed(Box::new(backend))
    }

    pub fn from_boxed(backend: Box<dyn ChatBackend>) -> Self {
        Self {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            slots: Slots { limit: DEFAULT_MAX_IN_FLIGHT, used: Mutex::new(0), freed: Condvar::new() },
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.slots.limit = limit.max(1);
        self
    }

    /// Worker count callers should use: the in-flight bound, narrowed by
    /// what the backend tolerates.
    pub fn concurrency(&self) -> usize {
        self.backend.max_concurrency().map_or(self.slots.limit, |b| b.min(self.slots.limit)).max(1)
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    pub fn chat(&self, exchange: &ChatExchange) -> Result<String, LlmError> {
        exchange.validate()?;
        let key = exchange.content_hash();
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(hit);
            }
        }
        let mut attempt = 0u32;
        let reply = loop {
            let result = {
                let _slot = self.slots.acquire();
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                self.backend.complete(exchange)
            };
            match result {
                Ok(r) => break r,
                Err(e) if e.is_transient() => {
                    if attempt >= self.retry.max_retries {
                        return Err(LlmError::Transport { attempts: attempt + 1, message: e.to_string() });
                    }
                    let wait = self.retry.delay(attempt);
                    log::warn!("transient failure ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(cache) = &self.cache {
            cache.put(&key, &reply)?;
        }
        Ok(reply)
    }
}

/// Embedding backend. Every returned vector is L2-normalized.
pub trait Embedder: Send + Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError>;

    /// Output dimension, found by embedding a probe text.
    fn dimension(&self) -> Result<usize, LlmError> {
        Ok(self.embed_batch(&["probe".to_string()])?.first().map_or(0, Vec::len))
    }
}

pub const HASH_EMBED_DIM: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Deterministic offline embedder: bag of whitespace tokens hashed with
/// FNV-1a-64 into 64 buckets, then L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

impl HashEmbedder {
    pub fn embed(text: &str) -> Vec<f64> {
        let mut v = vec![0.0f64; HASH_EMBED_DIM];
        for tok in text.split_whitespace() {
            v[(fnv1a64(tok.as_bytes()) % HASH_EMBED_DIM as u64) as usize] += 1.0;
        }
        normalize(v)
    }
}

/// Scales to unit length; a zero vector becomes the first basis vector.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl Embedder for HashEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        Ok(texts.iter().map(|t| Self::embed(t)).collect())
    }

    fn dimension(&self) -> Result<usize, LlmError> {
        Ok(HASH_EMBED_DIM)
    }
}

/// OpenAI-compatible `/embeddings` client.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireEmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct WireEmbedReply {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key: api_key.or_else(|| std::env::var(API_KEY_ENV).ok()),
            agent: agent(Duration::from_secs(120)),
        }
    }
}

/// Normalizes a batch of raw vectors and checks they share one dimension.
pub fn finish_batch(raw: Vec<Vec<f64>>, expected_len: usize) -> Result<Vec<Vec<f64>>, LlmError> {
    if raw.len() != expected_len {
        return Err(LlmError::Protocol(format!("expected {expected_len} embeddings, got {}", raw.len())));
    }
    let dim = raw.first().map_or(0, Vec::len);
    raw.into_iter()
        .map(|v| {
            if v.len() != dim {
                return Err(LlmError::DimensionMismatch { expected: dim, got: v.len() });
            }
            Ok(normalize(v))
        })
        .collect()
}

impl Embedder for HttpEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let req = WireEmbedRequest { model: &self.model, input: texts };
        let reply: WireEmbedReply = post_json(&self.agent, &self.endpoint, self.api_key.as_deref(), &req)?;
        finish_batch(reply.data.into_iter().map(|d| d.embedding).collect(), texts.len())
    }
}
