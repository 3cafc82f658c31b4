//! Generative and embedding backends.
//!
//! Everything that talks to a language model goes through [`Backend`]. Two
//! implementations ship: [`MockBackend`], whose replies are a pure function
//! of the request, and [`HttpBackend`], a chat-completion style client.
//! [`ResponseCache`] memoizes replies on disk keyed by the canonical request.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::sha256_hex;

pub const DEFAULT_TEMPERATURE: f64 = 0.001;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

pub const ENV_BACKEND_URL: &str = "FCHECK_BACKEND_URL";
pub const ENV_BACKEND_KEY: &str = "FCHECK_BACKEND_KEY";
pub const ENV_EMBED_URL: &str = "FCHECK_EMBED_URL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error ({}): {reason}", status.map_or("no status".to_string(), |s| s.to_string()))]
    Transport { status: Option<u16>, reason: String },
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache entry {0} is corrupt")]
    CacheCorrupt(String),
    #[error("cache i/o: {0}")]
    CacheIo(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. } | BackendError::Timeout(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendParams {
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl BackendParams {
    pub fn new<S: Into<String>>(model_name: S) -> Self {
        Self {
            model_name: model_name.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

impl Message {
    pub fn system<S: Into<String>>(content: S) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user<S: Into<String>>(content: S) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub params: BackendParams,
}

impl CompletionRequest {
    pub fn new(messages: Vec<Message>, params: BackendParams) -> Self {
        Self { messages, params }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(BackendError::InvalidRequest("no user message".into()));
        }
        if !(self.params.temperature >= 0.0 && self.params.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest("temperature must be finite and >= 0".into()));
        }
        if self.params.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }

    pub fn system_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// SHA-256 over the canonical request: model, temperature, max_tokens
    /// and messages. The seed is not part of the digest.
    pub fn digest(&self) -> String {
        sha256_hex(self.canonical(None).as_bytes())
    }

    fn canonical(&self, backend_id: Option<&str>) -> String {
        // `{:?}` on f64 is the shortest round-tripping repr, so distinct
        // temperatures always canonicalize differently.
        let temperature = format!("{:?}", self.params.temperature);
        let messages: Vec<[&str; 2]> = self
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                };
                [role, m.content.as_str()]
            })
            .collect();
        let value = match backend_id {
            Some(id) => serde_json::json!([
                id,
                self.params.model_name,
                temperature,
                self.params.max_tokens,
                messages
            ]),
            None => serde_json::json!([
                self.params.model_name,
                temperature,
                self.params.max_tokens,
                messages
            ]),
        };
        value.to_string()
    }
}

/// Cache key: SHA-256 over `(backend_id, model, temperature, max_tokens, messages)`.
pub fn cache_key(backend_id: &str, request: &CompletionRequest) -> String {
    sha256_hex(request.canonical(Some(backend_id)).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub backend_id: String,
    pub cache_hit: bool,
    pub latency_ms: f64,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Produces the reply text for a validated request.
    fn generate(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

/// Validates `request`, calls the backend and wraps the reply.
pub fn complete(backend: &dyn Backend, request: &CompletionRequest) -> Result<Completion, BackendError> {
    request.validate()?;
    let started = Instant::now();
    let text = backend.generate(request)?;
    Ok(Completion {
        text,
        backend_id: backend.id().to_string(),
        cache_hit: false,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Looks `request` up in `cache`; on a miss calls the backend and stores the
/// reply. A corrupt entry is treated as a miss and superseded.
pub fn cached_complete(
    backend: &dyn Backend,
    request: &CompletionRequest,
    cache: &ResponseCache,
) -> Result<Completion, BackendError> {
    request.validate()?;
    let key = cache_key(backend.id(), request);
    let started = Instant::now();
    match cache.get(&key) {
        Ok(Some(text)) => {
            return Ok(Completion {
                text,
                backend_id: backend.id().to_string(),
                cache_hit: true,
                latency_ms: started.elapsed().as_secs_f64() * 1e3,
            })
        }
        Ok(None) => {}
        Err(BackendError::CacheCorrupt(key)) => {
            log::warn!("cache entry {key} is corrupt; refetching");
        }
        Err(e) => return Err(e),
    }
    let completion = complete(backend, request)?;
    cache.put(&key, &request.digest(), &completion.text)?;
    Ok(completion)
}

/// Calls through an optional cache.
pub fn complete_with(
    backend: &dyn Backend,
    request: &CompletionRequest,
    cache: Option<&ResponseCache>,
) -> Result<Completion, BackendError> {
    match cache {
        Some(cache) => cached_complete(backend, request, cache),
        None => complete(backend, request),
    }
}

/// A pattern rule for [`MockBackend`]: when the system text contains
/// `system_contains` (if given) and the last user message contains
/// `user_contains`, reply with `reply`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_contains: Option<String>,
    pub user_contains: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "text")]
pub enum MockFallback {
    /// Reply with the last user message verbatim.
    Echo,
    /// Reply with a fixed string.
    Constant(String),
    /// Reply with `mock-<first 16 hex of the request digest>`.
    Digest,
}

type Responder = dyn Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync;

/// Deterministic backend. Resolution order: script table (by request
/// digest), then rules in order, then a custom responder if set, then the
/// fallback.
pub struct MockBackend {
    id: String,
    script: HashMap<String, String>,
    rules: Vec<MockRule>,
    responder: Option<Box<Responder>>,
    fallback: MockFallback,
    calls: AtomicUsize,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend")
            .field("id", &self.id)
            .field("script_entries", &self.script.len())
            .field("rules", &self.rules)
            .field("fallback", &self.fallback)
            .finish()
    }
}

impl MockBackend {
    pub fn new<S: Into<String>>(id: S, fallback: MockFallback) -> Self {
        Self {
            id: id.into(),
            script: HashMap::new(),
            rules: Vec::new(),
            responder: None,
            fallback,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn echo<S: Into<String>>(id: S) -> Self {
        Self::new(id, MockFallback::Echo)
    }

    pub fn constant<S: Into<String>, T: Into<String>>(id: S, text: T) -> Self {
        Self::new(id, MockFallback::Constant(text.into()))
    }

    pub fn with_rules(mut self, rules: Vec<MockRule>) -> Self {
        self.rules.extend(rules);
        self
    }

    pub fn rule(mut self, system_contains: Option<&str>, user_contains: &str, reply: &str) -> Self {
        self.rules.push(MockRule {
            system_contains: system_contains.map(str::to_string),
            user_contains: user_contains.to_string(),
            reply: reply.to_string(),
        });
        self
    }

    pub fn script_entry<S: Into<String>>(mut self, request_digest: S, text: S) -> Self {
        self.script.insert(request_digest.into(), text.into());
        self
    }

    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        self.responder = Some(Box::new(f));
        self
    }

    /// Loads a script file: one `<request-digest>\t<reply>` pair per line,
    /// where the reply escapes `\n`, `\t` and `\\`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn load_script(mut self, path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (digest, reply) = line.split_once('\t').ok_or_else(|| {
                BackendError::Config(format!("{}:{}: expected <digest>\\t<reply>", path.display(), n + 1))
            })?;
            self.script.insert(digest.trim().to_string(), unescape(reply));
        }
        Ok(self)
    }

    /// Number of `generate` invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

pub fn escape_script_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.script.is_empty() {
            if let Some(text) = self.script.get(&request.digest()) {
                return Ok(text.clone());
            }
        }
        let user = request.last_user();
        if !self.rules.is_empty() {
            let system = request.system_text();
            for rule in &self.rules {
                let system_ok = rule
                    .system_contains
                    .as_deref()
                    .is_none_or(|s| system.contains(s));
                if system_ok && user.contains(&rule.user_contains) {
                    return Ok(rule.reply.clone());
                }
            }
        }
        if let Some(responder) = &self.responder {
            return responder(request);
        }
        Ok(match &self.fallback {
            MockFallback::Echo => user.to_string(),
            MockFallback::Constant(text) => text.clone(),
            MockFallback::Digest => format!("mock-{}", &request.digest()[..16]),
        })
    }
}

/// Retry schedule for transport failures. Each entry is the wait before the
/// next attempt; malformed responses are never retried.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub delays: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            delays: vec![Duration::from_millis(500), Duration::from_secs(2)],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { delays: Vec::new() }
    }

    pub fn run<T>(&self, mut attempt: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut delays = self.delays.iter();
        loop {
            match attempt() {
                Err(e) if e.is_retryable() => match delays.next() {
                    Some(delay) => {
                        log::warn!("backend call failed ({e}); retrying in {delay:?}");
                        std::thread::sleep(*delay);
                    }
                    None => return Err(e),
                },
                other => return other,
            }
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client, BackendError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::Config(e.to_string()))
}

fn send_json(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &impl Serialize,
    timeout: Duration,
) -> Result<serde_json::Value, BackendError> {
    let mut req = client.post(url).json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            BackendError::Timeout(timeout.as_millis() as u64)
        } else {
            BackendError::Transport {
                status: e.status().map(|s| s.as_u16()),
                reason: e.to_string(),
            }
        }
    })?;
    let status = resp.status();
    if !status.is_success() {
        let reason = resp.text().unwrap_or_default();
        return Err(BackendError::Transport {
            status: Some(status.as_u16()),
            reason: reason.chars().take(200).collect(),
        });
    }
    let text = resp.text().map_err(|e| {
        if e.is_timeout() {
            BackendError::Timeout(timeout.as_millis() as u64)
        } else {
            BackendError::Transport {
                status: Some(status.as_u16()),
                reason: e.to_string(),
            }
        }
    })?;
    serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
}

/// Chat-completion client. Posts `{model, messages, temperature, max_tokens,
/// seed?}` and reads `candidates[0].message.content` (or
/// `choices[0].message.content` from servers using that name).
#[derive(Debug, Clone)]
pub struct HttpBackend {
    id: String,
    url: String,
    api_key: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new<S: Into<String>, U: Into<String>>(id: S, url: U) -> Result<Self, BackendError> {
        let timeout = Duration::from_secs(120);
        Ok(Self {
            id: id.into(),
            url: url.into(),
            api_key: None,
            timeout,
            retry: RetryPolicy::default(),
            client: http_client(timeout)?,
        })
    }

    /// Builds a client from `FCHECK_BACKEND_URL` / `FCHECK_BACKEND_KEY`.
    pub fn from_env<S: Into<String>>(id: S) -> Result<Self, BackendError> {
        let url = std::env::var(ENV_BACKEND_URL)
            .map_err(|_| BackendError::Config(format!("{ENV_BACKEND_URL} is not set")))?;
        let mut backend = Self::new(id, url)?;
        backend.api_key = std::env::var(ENV_BACKEND_KEY).ok().filter(|k| !k.is_empty());
        Ok(backend)
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Result<Self, BackendError> {
        self.timeout = timeout;
        self.client = http_client(timeout)?;
        Ok(self)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn first_candidate_text(value: &serde_json::Value) -> Result<String, BackendError> {
    let list = value
        .get("candidates")
        .or_else(|| value.get("choices"))
        .and_then(|v| v.as_array())
        .ok_or_else(|| BackendError::MalformedResponse("no candidates array".into()))?;
    let first = list
        .first()
        .ok_or_else(|| BackendError::MalformedResponse("empty candidates array".into()))?;
    first
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| BackendError::MalformedResponse("candidate has no message.content".into()))
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let body = WireRequest {
            model: &request.params.model_name,
            messages: &request.messages,
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
            seed: request.params.seed,
        };
        self.retry.run(|| {
            let value = send_json(&self.client, &self.url, self.api_key.as_deref(), &body, self.timeout)?;
            first_candidate_text(&value)
        })
    }
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;

    /// Raw vectors, one per input; need not be normalized.
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

/// Embeds `texts` and L2-normalizes each vector. All vectors must share one
/// dimension.
pub fn embed(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let mut vectors = embedder.embed_raw(texts)?;
    if vectors.len() != texts.len() {
        return Err(BackendError::MalformedResponse(format!(
            "{} vectors for {} inputs",
            vectors.len(),
            texts.len()
        )));
    }
    let dim = vectors[0].len();
    for v in &mut vectors {
        if v.len() != dim {
            return Err(BackendError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(vectors)
}

/// Hashed bag-of-words embedder. Texts sharing words get positive cosine;
/// explicit overrides pin chosen texts to fixed vectors.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    id: String,
    dim: usize,
    overrides: HashMap<String, Vec<f64>>,
}

impl MockEmbedder {
    pub fn new<S: Into<String>>(id: S, dim: usize) -> Self {
        Self {
            id: id.into(),
            dim: dim.max(1),
            overrides: HashMap::new(),
        }
    }

    pub fn with_vector<S: Into<String>>(mut self, text: S, vector: Vec<f64>) -> Self {
        self.overrides.insert(text.into(), vector);
        self
    }
}

impl Embedder for MockEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts
            .iter()
            .map(|text| {
                if let Some(v) = self.overrides.get(text) {
                    return v.clone();
                }
                let mut v = vec![0.0; self.dim];
                for token in text.to_lowercase().split_whitespace() {
                    let h = crate::verdict::fnv1a64(token.as_bytes());
                    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                    v[(h % self.dim as u64) as usize] += sign;
                }
                v
            })
            .collect())
    }
}

/// Embedding client: posts `{model, input: [...]}` and reads
/// `data[i].embedding`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new<S: Into<String>, U: Into<String>, M: Into<String>>(
        id: S,
        url: U,
        model: M,
    ) -> Result<Self, BackendError> {
        let timeout = Duration::from_secs(60);
        Ok(Self {
            id: id.into(),
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout,
            retry: RetryPolicy::default(),
            client: http_client(timeout)?,
        })
    }

    /// Builds a client from `FCHECK_EMBED_URL` (and `FCHECK_BACKEND_KEY`).
    pub fn from_env<S: Into<String>, M: Into<String>>(id: S, model: M) -> Result<Self, BackendError> {
        let url = std::env::var(ENV_EMBED_URL)
            .map_err(|_| BackendError::Config(format!("{ENV_EMBED_URL} is not set")))?;
        let mut e = Self::new(id, url, model)?;
        e.api_key = std::env::var(ENV_BACKEND_KEY).ok().filter(|k| !k.is_empty());
        Ok(e)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = serde_json::json!({"model": self.model, "input": texts});
        self.retry.run(|| {
            let value = send_json(&self.client, &self.url, self.api_key.as_deref(), &body, self.timeout)?;
            let data = value
                .get("data")
                .and_then(|d| d.as_array())
                .ok_or_else(|| BackendError::MalformedResponse("no data array".into()))?;
            data.iter()
                .map(|item| {
                    item.get("embedding")
                        .and_then(|e| e.as_array())
                        .and_then(|e| e.iter().map(|x| x.as_f64()).collect::<Option<Vec<f64>>>())
                        .ok_or_else(|| BackendError::MalformedResponse("bad embedding entry".into()))
                })
                .collect()
        })
    }
}

pub const CACHE_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    request_digest: String,
    text: String,
    /// SHA-256 over `key`, a NUL byte, then `text`.
    check: String,
}

fn line_check(key: &str, text: &str) -> String {
    let mut buf = Vec::with_capacity(key.len() + text.len() + 1);
    buf.extend_from_slice(key.as_bytes());
    buf.push(0);
    buf.extend_from_slice(text.as_bytes());
    sha256_hex(&buf)
}

#[derive(Debug, Clone)]
enum Slot {
    Valid(String),
    Corrupt,
}

/// Persistent response cache.
///
/// Layout under the cache directory:
///
/// ```text
/// VERSION        layout version ("1")
/// log.jsonl      append-only, one {key, request_digest, text, check} per line
/// ```
///
/// The key index is rebuilt in memory from the log on open; later lines win.
/// A line whose checksum fails (or whose JSON is damaged but still names a
/// key) marks only that key corrupt.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    index: Mutex<HashMap<String, Slot>>,
    log: Mutex<File>,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        let io = |e: std::io::Error| BackendError::CacheIo(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let version_path = dir.join("VERSION");
        match std::fs::read_to_string(&version_path) {
            Ok(v) if v.trim() == CACHE_LAYOUT_VERSION.to_string() => {}
            Ok(v) => {
                return Err(BackendError::CacheIo(format!(
                    "unsupported cache layout version {:?}",
                    v.trim()
                )))
            }
            Err(_) => std::fs::write(&version_path, format!("{CACHE_LAYOUT_VERSION}\n")).map_err(io)?,
        }
        let log_path = dir.join("log.jsonl");
        let mut index = HashMap::new();
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path).map_err(io)?);
            for line in reader.split(b'\n') {
                let line = line.map_err(io)?;
                if line.is_empty() {
                    continue;
                }
                match serde_json::from_slice::<CacheLine>(&line) {
                    Ok(entry) if line_check(&entry.key, &entry.text) == entry.check => {
                        index.insert(entry.key, Slot::Valid(entry.text));
                    }
                    Ok(entry) => {
                        index.insert(entry.key, Slot::Corrupt);
                    }
                    Err(_) => {
                        if let Some(key) = salvage_key(&line) {
                            index.insert(key, Slot::Corrupt);
                        }
                    }
                }
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index: Mutex::new(index),
            log: Mutex::new(log),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.lock().expect("cache index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, BackendError> {
        match self.index.lock().expect("cache index lock").get(key) {
            Some(Slot::Valid(text)) => Ok(Some(text.clone())),
            Some(Slot::Corrupt) => Err(BackendError::CacheCorrupt(key.to_string())),
            None => Ok(None),
        }
    }

    pub fn put(&self, key: &str, request_digest: &str, text: &str) -> Result<(), BackendError> {
        let line = serde_json::to_string(&CacheLine {
            key: key.to_string(),
            request_digest: request_digest.to_string(),
            text: text.to_string(),
            check: line_check(key, text),
        })
        .expect("cache line serializes");
        {
            let mut log = self.log.lock().expect("cache log lock");
            log.write_all(format!("{line}\n").as_bytes())
                .and_then(|_| log.flush())
                .map_err(|e| BackendError::CacheIo(e.to_string()))?;
        }
        self.index
            .lock()
            .expect("cache index lock")
            .insert(key.to_string(), Slot::Valid(text.to_string()));
        Ok(())
    }
}

fn salvage_key(line: &[u8]) -> Option<String> {
    let text = String::from_utf8_lossy(line);
    let rest = text.split_once("\"key\":\"")?.1;
    let key = rest.split('"').next()?;
    (key.len() == 64 && key.bytes().all(|b| b.is_ascii_hexdigit())).then(|| key.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;

    fn req(user: &str) -> CompletionRequest {
        CompletionRequest::new(
            vec![Message::system("sys"), Message::user(user)],
            BackendParams::new("test-model"),
        )
    }

    #[test]
    fn default_temperature_is_exact() {
        assert_eq!(BackendParams::new("m").temperature, 0.001);
        let parsed: BackendParams = serde_json::from_str(r#"{"model_name": "m"}"#).unwrap();
        assert_eq!(parsed.temperature, 0.001);
    }

    #[test]
    fn requests_need_a_user_message() {
        let r = CompletionRequest::new(vec![Message::system("s")], BackendParams::new("m"));
        assert!(matches!(r.validate(), Err(BackendError::InvalidRequest(_))));
        let mock = MockBackend::echo("mock");
        assert!(complete(&mock, &r).is_err());
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn mock_is_deterministic() {
        let mock = MockBackend::new("mock", MockFallback::Digest);
        let a = complete(&mock, &req("hello")).unwrap();
        let b = complete(&mock, &req("hello")).unwrap();
        assert_eq!(a.text, b.text);
        assert_ne!(a.text, complete(&mock, &req("other")).unwrap().text);
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn scripted_mock_looks_up_digest() {
        let r = req("classify this");
        let mock = MockBackend::constant("mock", "fallback").script_entry(r.digest(), "supporting".into());
        assert_eq!(complete(&mock, &r).unwrap().text, "supporting");
        assert_eq!(complete(&mock, &req("x")).unwrap().text, "fallback");
    }

    #[test]
    fn script_file_round_trips_escapes() {
        let r = req("q");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.tsv");
        let reply = "line one\n\tindented \\ done";
        std::fs::write(&path, format!("# comment\n{}\t{}\n", r.digest(), escape_script_text(reply))).unwrap();
        let mock = MockBackend::echo("mock").load_script(&path).unwrap();
        assert_eq!(complete(&mock, &r).unwrap().text, reply);
    }

    #[test]
    fn rules_respect_system_filter() {
        let mock = MockBackend::echo("mock").rule(Some("stance"), "zsup", "supporting");
        let stance = CompletionRequest::new(
            vec![Message::system("Task: evidence stance."), Message::user("... zsup ...")],
            BackendParams::new("m"),
        );
        assert_eq!(complete(&mock, &stance).unwrap().text, "supporting");
        let other = req("... zsup ...");
        assert_eq!(complete(&mock, &other).unwrap().text, "... zsup ...");
    }

    #[test]
    fn cache_keys() {
        let a = req("x");
        let mut b = a.clone();
        b.params.temperature = 0.002;
        assert_ne!(cache_key("m", &a), cache_key("m", &b));
        assert_ne!(cache_key("m1", &a), cache_key("m2", &a));
        let mut c = a.clone();
        c.params.max_tokens = 7;
        assert_ne!(cache_key("m", &a), cache_key("m", &c));
        let mut d = a.clone();
        d.params.seed = Some(3);
        assert_eq!(cache_key("m", &a), cache_key("m", &d));
        // role boundaries are part of the key
        let e = CompletionRequest::new(vec![Message::user("sys"), Message::user("x")], a.params.clone());
        assert_ne!(cache_key("m", &a), cache_key("m", &e));
    }

    #[test]
    fn cache_miss_then_hit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let mock = MockBackend::new("mock", MockFallback::Digest);
        let r = req("hi");
        let first = cached_complete(&mock, &r, &cache).unwrap();
        let second = cached_complete(&mock, &r, &cache).unwrap();
        assert!(!first.cache_hit);
        assert!(second.cache_hit);
        assert_eq!(first.text, second.text);
        assert_eq!(mock.calls(), 1);

        drop(cache);
        let reopened = ResponseCache::open(dir.path()).unwrap();
        let third = cached_complete(&mock, &r, &reopened).unwrap();
        assert!(third.cache_hit);
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn corrupt_entry_is_isolated_and_refetched() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockBackend::new("mock", MockFallback::Digest);
        let (a, b) = (req("a"), req("b"));
        {
            let cache = ResponseCache::open(dir.path()).unwrap();
            cached_complete(&mock, &a, &cache).unwrap();
            cached_complete(&mock, &b, &cache).unwrap();
        }
        let log = dir.path().join("log.jsonl");
        let text = std::fs::read_to_string(&log).unwrap();
        let tampered = text.replacen("mock-", "xock-", 1);
        std::fs::write(&log, tampered).unwrap();

        let cache = ResponseCache::open(dir.path()).unwrap();
        let key_a = cache_key("mock", &a);
        assert_eq!(cache.get(&key_a), Err(BackendError::CacheCorrupt(key_a.clone())));
        assert!(cache.get(&cache_key("mock", &b)).unwrap().is_some());

        mock.reset_calls();
        let again = cached_complete(&mock, &a, &cache).unwrap();
        assert!(!again.cache_hit);
        assert_eq!(mock.calls(), 1);
        assert!(cache.get(&key_a).unwrap().is_some());
    }

    #[test]
    fn truncated_line_only_loses_that_entry() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockBackend::new("mock", MockFallback::Digest);
        {
            let cache = ResponseCache::open(dir.path()).unwrap();
            cached_complete(&mock, &req("a"), &cache).unwrap();
        }
        let log = dir.path().join("log.jsonl");
        let mut text = std::fs::read_to_string(&log).unwrap();
        let key = cache_key("mock", &req("zzz"));
        text.push_str(&format!("{{\"key\":\"{key}\",\"request_digest\":\"x\",\"te"));
        std::fs::write(&log, text).unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert!(cache.get(&cache_key("mock", &req("a"))).unwrap().is_some());
        assert!(matches!(cache.get(&key), Err(BackendError::CacheCorrupt(_))));
    }

    #[test]
    fn retry_policy_only_retries_transport() {
        let policy = RetryPolicy {
            delays: vec![Duration::from_millis(1), Duration::from_millis(1)],
        };
        let mut n = 0;
        let r: Result<(), _> = policy.run(|| {
            n += 1;
            Err(BackendError::Transport { status: Some(503), reason: String::new() })
        });
        assert!(r.is_err());
        assert_eq!(n, 3);

        let mut n = 0;
        let r: Result<(), _> = policy.run(|| {
            n += 1;
            Err(BackendError::MalformedResponse("x".into()))
        });
        assert!(r.is_err());
        assert_eq!(n, 1);

        let mut n = 0;
        let r = policy.run(|| {
            n += 1;
            if n < 2 { Err(BackendError::Timeout(5)) } else { Ok(n) }
        });
        assert_eq!(r, Ok(2));
    }

    /// Serves `responses` in order, one per connection, and returns the
    /// request bodies it saw.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(header_end) = text.find("\r\n\r\n") {
                        let len = text[..header_end]
                            .lines()
                            .find_map(|l| {
                                let (k, v) = l.split_once(':')?;
                                k.eq_ignore_ascii_case("content-length").then(|| v.trim().parse::<usize>().ok())?
                            })
                            .unwrap_or(0);
                        if buf.len() >= header_end + 4 + len {
                            bodies.push(text[header_end + 4..].to_string());
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn http_reads_first_candidate() {
        let (url, server) = serve(vec![(
            200,
            r#"{"candidates":[{"message":{"role":"assistant","content":"refuting"}}]}"#.into(),
        )]);
        let backend = HttpBackend::new("http", url).unwrap().with_retry(RetryPolicy::none());
        let mut r = req("x");
        r.params.seed = Some(9);
        assert_eq!(complete(&backend, &r).unwrap().text, "refuting");
        let bodies = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["temperature"], 0.001);
        assert_eq!(sent["seed"], 9);
        assert_eq!(sent["messages"][1]["role"], "user");
    }

    #[test]
    fn http_500_is_transport_error() {
        let (url, server) = serve(vec![(500, "{}".into())]);
        let backend = HttpBackend::new("http", url).unwrap().with_retry(RetryPolicy::none());
        match complete(&backend, &req("x")) {
            Err(BackendError::Transport { status, .. }) => assert_eq!(status, Some(500)),
            other => panic!("expected Transport(500), got {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn http_retries_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"content":"fine"}}]}"#.to_string();
        let (url, server) = serve(vec![(503, "{}".into()), (200, ok)]);
        let backend = HttpBackend::new("http", url).unwrap().with_retry(RetryPolicy {
            delays: vec![Duration::from_millis(5), Duration::from_millis(5)],
        });
        assert_eq!(complete(&backend, &req("x")).unwrap().text, "fine");
        assert_eq!(server.join().unwrap().len(), 2);
    }

    #[test]
    fn http_malformed_is_not_retried() {
        let (url, server) = serve(vec![(200, r#"{"candidates":[]}"#.into())]);
        let backend = HttpBackend::new("http", url).unwrap().with_retry(RetryPolicy {
            delays: vec![Duration::from_millis(5)],
        });
        assert!(matches!(
            complete(&backend, &req("x")),
            Err(BackendError::MalformedResponse(_))
        ));
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn http_embedder_normalizes() {
        let (url, server) = serve(vec![(
            200,
            r#"{"data":[{"embedding":[3.0,4.0]},{"embedding":[0.0,2.0]}]}"#.into(),
        )]);
        let e = HttpEmbedder::new("emb", url, "m").unwrap().with_retry(RetryPolicy::none());
        let v = embed(&e, &["a".into(), "b".into()]).unwrap();
        assert_eq!(v, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
        server.join().unwrap();
    }

    #[test]
    fn mock_embedder_contract() {
        let e = MockEmbedder::new("emb", 32);
        let v = embed(&e, &["a".into()]).unwrap();
        assert_eq!(v.len(), 1);
        let norm: f64 = v[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(embed(&e, &[]).unwrap().is_empty());
        let twice = embed(&e, &["same text".into(), "same text".into()]).unwrap();
        assert_eq!(twice[0], twice[1]);
    }

    #[test]
    fn embed_rejects_ragged_dimensions() {
        let e = MockEmbedder::new("emb", 4)
            .with_vector("x", vec![1.0, 0.0])
            .with_vector("y", vec![1.0, 0.0, 0.0]);
        assert_eq!(
            embed(&e, &["x".into(), "y".into()]),
            Err(BackendError::DimensionMismatch { expected: 2, got: 3 })
        );
    }
}
