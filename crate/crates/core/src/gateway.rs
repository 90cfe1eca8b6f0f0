//! Chat-completions gateway: one client surface over an HTTP backend and a
//! deterministic offline mock, with response caching, exponential-backoff
//! retries and bounded request parallelism.
//!
//! Every request is identified by a canonical digest of its content. The
//! digest keys the response cache, the mock fixture file and the screening
//! journal, so "has this exact call happened before" means the same thing
//! everywhere.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const API_KEY_ENV: &str = "PSKIT_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("no fixture entry for digest {key}")]
    FixtureMiss { key: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> GatewayError {
    GatewayError::Io { path: path.to_path_buf(), source }
}

// ==== request / response types ============================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }
}

/// Decoding knobs for one logical model. Screening and judging default to
/// temperature 0 so reruns are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { model_id: "default".into(), temperature: 0.0, max_output_tokens: 4096 }
    }
}

impl ModelParams {
    pub fn named(model_id: impl Into<String>) -> Self {
        ModelParams { model_id: model_id.into(), ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// Single-turn user request, the shape every pipeline stage issues.
    pub fn single_user(params: &ModelParams, content: impl Into<String>) -> Self {
        ChatRequest {
            model_id: params.model_id.clone(),
            messages: vec![ChatMessage::user(content)],
            temperature: params.temperature,
            max_output_tokens: params.max_output_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id.is_empty() {
            return Err(GatewayError::InvalidRequest("model_id is empty".into()));
        }
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages are empty".into()));
        }
        if self.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(GatewayError::InvalidRequest("last message must be from the user".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

impl ChatResponse {
    fn check(self) -> Result<Self, GatewayError> {
        if self.finish_reason == FinishReason::Stop && self.content.is_empty() {
            return Err(GatewayError::MalformedResponse(
                "backend reported a clean stop with empty content".into(),
            ));
        }
        Ok(self)
    }
}

/// Hex SHA-256 of the canonical JSON form of the request. The typed struct
/// serializes with a fixed field order and no insignificant whitespace, so
/// equal requests digest identically.
pub fn canonical_digest(req: &ChatRequest) -> String {
    let bytes = serde_json::to_vec(req).expect("request serializes");
    let hash = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for byte in hash {
        let _ = std::fmt::Write::write_fmt(&mut out, format_args!("{byte:02x}"));
    }
    out
}

// ==== backends ============================================================

/// What a backend reports when it cannot produce a response. The gateway
/// decides retry policy from the variant.
#[derive(Debug)]
pub enum BackendError {
    /// Transient fault (throttling, 5xx, transport); worth retrying.
    Retryable(String),
    /// Mock fixture has no entry under the request digest.
    FixtureMiss(String),
    /// The backend answered but the payload is unusable.
    Malformed(String),
    /// Definitive rejection (auth, bad request); retrying cannot help.
    Rejected(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Base URL for the http kind; the wire path is appended.
    pub endpoint: Option<String>,
    /// Fixture file for the mock kind.
    pub fixture_path: Option<PathBuf>,
    /// Extra attempts after the first failure.
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles per subsequent retry.
    #[serde(default = "defaults::backoff_base_ms")]
    pub backoff_base_ms: u64,
    /// Upper bound on in-flight requests for batch completion.
    #[serde(default = "defaults::parallelism")]
    pub parallelism: usize,
    /// Response cache directory; no caching when absent.
    pub cache_dir: Option<PathBuf>,
}

/// Deserialization defaults, matching [`BackendConfig::http`].
mod defaults {
    pub fn max_retries() -> u32 {
        3
    }
    pub fn backoff_base_ms() -> u64 {
        250
    }
    pub fn parallelism() -> usize {
        4
    }
}

impl BackendConfig {
    pub fn mock(fixture_path: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            fixture_path: Some(fixture_path.into()),
            max_retries: 0,
            backoff_base_ms: 100,
            parallelism: 1,
            cache_dir: None,
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            fixture_path: None,
            max_retries: 3,
            backoff_base_ms: 250,
            parallelism: 4,
            cache_dir: None,
        }
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.parallelism == 0 {
            return Err(GatewayError::InvalidConfig("parallelism must be at least 1".into()));
        }
        if self.backoff_base_ms == 0 {
            return Err(GatewayError::InvalidConfig("backoff_base_ms must be positive".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() => {
                Err(GatewayError::InvalidConfig("http backend requires an endpoint".into()))
            }
            BackendKind::Mock if self.fixture_path.is_none() => {
                Err(GatewayError::InvalidConfig("mock backend requires a fixture_path".into()))
            }
            _ => Ok(()),
        }
    }
}

/// POSTs to `{endpoint}/chat/completions` in the common completions shape.
/// The bearer credential is read from [`API_KEY_ENV`] at construction.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let url = format!("{}/chat/completions", self.endpoint.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": req.model_id,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });

        let mut builder = self.agent.post(&url).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", format!("Bearer {key}"));
        }

        let mut response = match builder.send_json(&body) {
            Ok(response) => response,
            Err(ureq::Error::StatusCode(code)) if code == 429 || (500..600).contains(&code) => {
                return Err(BackendError::Retryable(format!("http status {code}")));
            }
            Err(ureq::Error::StatusCode(code)) => {
                return Err(BackendError::Rejected(format!("http status {code}")));
            }
            Err(other) => return Err(BackendError::Retryable(format!("transport: {other}"))),
        };

        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(format!("body is not JSON: {e}")))?;
        parse_completions_body(&value)
    }
}

fn parse_completions_body(value: &serde_json::Value) -> Result<ChatResponse, BackendError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Malformed("no choices in response".into()))?;
    let content = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| BackendError::Malformed("choices[0].message.content missing".into()))?;
    let finish_reason = match choice.get("finish_reason").and_then(|f| f.as_str()) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    let tokens = |key: &str| {
        value.pointer(&format!("/usage/{key}")).and_then(|v| v.as_u64()).unwrap_or(0)
    };
    Ok(ChatResponse {
        content: content.to_string(),
        finish_reason,
        usage: Usage {
            prompt_tokens: tokens("prompt_tokens"),
            completion_tokens: tokens("completion_tokens"),
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureEntry {
    key: String,
    content: String,
}

/// Offline backend: a map from request digest to reply text, loaded from a
/// JSONL fixture file. Usage counts are synthesized from word counts so the
/// response shape matches the http backend.
pub struct FixtureBackend {
    entries: HashMap<String, String>,
}

impl FixtureBackend {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut entries = HashMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(&line).map_err(|e| {
                GatewayError::MalformedResponse(format!(
                    "fixture {}:{}: {e}",
                    path.display(),
                    idx + 1
                ))
            })?;
            entries.insert(entry.key, entry.content);
        }
        Ok(FixtureBackend { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatBackend for FixtureBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = canonical_digest(req);
        let content = self.entries.get(&key).ok_or(BackendError::FixtureMiss(key))?;
        Ok(synth_response(req, content.clone()))
    }
}

/// Append fixture entries (request digest, reply text) as JSONL.
pub fn write_fixture<I, K, V>(path: &Path, entries: I) -> Result<(), GatewayError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for (key, content) in entries {
        let entry =
            FixtureEntry { key: key.as_ref().to_string(), content: content.as_ref().to_string() };
        let line = serde_json::to_string(&entry).expect("fixture entry serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// In-process backend driven by a closure; simulations and tests script
/// model behavior with it without touching the filesystem.
pub struct ScriptedBackend {
    script: Box<dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync>,
}

impl ScriptedBackend {
    pub fn new<F>(script: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        ScriptedBackend { script: Box::new(script) }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (self.script)(req).map(|content| synth_response(req, content))
    }
}

fn synth_response(req: &ChatRequest, content: String) -> ChatResponse {
    let prompt_tokens: usize =
        req.messages.iter().map(|m| crate::tokenize::token_count(&m.content)).sum();
    let completion_tokens = crate::tokenize::token_count(&content);
    ChatResponse {
        content,
        finish_reason: FinishReason::Stop,
        usage: Usage {
            prompt_tokens: prompt_tokens as u64,
            completion_tokens: completion_tokens as u64,
        },
    }
}

// ==== response cache ======================================================

struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    fn new(dir: PathBuf) -> Result<Self, GatewayError> {
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(ResponseCache { dir })
    }

    fn entry_path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    /// Unreadable or corrupt entries count as misses; the backend is the
    /// source of truth.
    fn load(&self, digest: &str) -> Option<ChatResponse> {
        let text = std::fs::read_to_string(self.entry_path(digest)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Write-then-rename so concurrent writers of the same key never leave
    /// a torn entry behind.
    fn store(&self, digest: &str, response: &ChatResponse) -> Result<(), GatewayError> {
        let tmp = self.dir.join(format!(
            ".{digest}.{}.tmp",
            std::process::id(),
        ));
        let body = serde_json::to_vec(response).expect("response serializes");
        std::fs::write(&tmp, body).map_err(|e| io_err(&tmp, e))?;
        let path = self.entry_path(digest);
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }
}

// ==== gateway =============================================================

/// The single client every module talks through.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    max_retries: u32,
    backoff_base: Duration,
    parallelism: usize,
}

impl Gateway {
    pub fn new(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let backend: Box<dyn ChatBackend> = match cfg.kind {
            BackendKind::Http => {
                Box::new(HttpBackend::new(cfg.endpoint.clone().expect("validated")))
            }
            BackendKind::Mock => {
                Box::new(FixtureBackend::load(cfg.fixture_path.as_deref().expect("validated"))?)
            }
        };
        Gateway::with_backend(backend, cfg)
    }

    /// Wire in a caller-provided backend (scripted selectors, fakes). The
    /// retry, cache and parallelism settings still come from `cfg`.
    pub fn with_backend(backend: Box<dyn ChatBackend>, cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let cache = match &cfg.cache_dir {
            Some(dir) => Some(ResponseCache::new(dir.clone())?),
            None => None,
        };
        Ok(Gateway {
            backend,
            cache,
            max_retries: cfg.max_retries,
            backoff_base: Duration::from_millis(cfg.backoff_base_ms),
            parallelism: cfg.parallelism,
        })
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    /// Complete one request. Identical requests are served from the cache
    /// without a backend call when a cache directory is configured.
    pub fn complete_chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.complete_inner(req, true)
    }

    /// Complete bypassing the cache read; the screening engine uses this
    /// when retrying a group whose cached reply already failed to parse.
    /// Fresh responses are still stored.
    pub fn complete_chat_fresh(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.complete_inner(req, false)
    }

    fn complete_inner(&self, req: &ChatRequest, read_cache: bool) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        // The request digest is only a cache key; hashing is skipped
        // entirely on cache-less gateways.
        let digest = self.cache.as_ref().map(|_| canonical_digest(req));
        if read_cache {
            if let (Some(cache), Some(digest)) = (self.cache.as_ref(), digest.as_deref()) {
                if let Some(hit) = cache.load(digest) {
                    return Ok(hit);
                }
            }
        }

        let attempts = self.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * (1 << (attempt - 1)));
            }
            match self.backend.complete(req) {
                Ok(response) => {
                    let response = response.check()?;
                    if let (Some(cache), Some(digest)) = (&self.cache, digest.as_deref()) {
                        cache.store(digest, &response)?;
                    }
                    return Ok(response);
                }
                Err(BackendError::Retryable(msg)) => {
                    log::warn!("attempt {} of {attempts} failed: {msg}", attempt + 1);
                    last_error = msg;
                }
                Err(BackendError::FixtureMiss(key)) => {
                    return Err(GatewayError::FixtureMiss { key });
                }
                Err(BackendError::Malformed(msg)) => {
                    return Err(GatewayError::MalformedResponse(msg));
                }
                Err(BackendError::Rejected(msg)) => return Err(GatewayError::Rejected(msg)),
            }
        }
        Err(GatewayError::BackendUnavailable { attempts, last_error })
    }

    /// Complete a batch with at most `parallelism` requests in flight.
    /// Results are positionally aligned with the input.
    pub fn complete_many(&self, reqs: &[ChatRequest]) -> Vec<Result<ChatResponse, GatewayError>> {
        if reqs.is_empty() {
            return Vec::new();
        }
        let workers = self.parallelism.min(reqs.len());
        if workers <= 1 {
            return reqs.iter().map(|r| self.complete_chat(r)).collect();
        }

        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<ChatResponse, GatewayError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    if idx >= reqs.len() {
                        break;
                    }
                    let result = self.complete_chat(&reqs[idx]);
                    *slots[idx].lock().expect("result slot") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("result slot").expect("worker filled slot"))
            .collect()
    }
}
