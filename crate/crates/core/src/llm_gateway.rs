//! Chat-completion client used by the augmentation phase.
//!
//! Requests go through a [`Gateway`], which keys every exchange by a content
//! hash, answers repeats from an in-memory map backed by an optional
//! content-addressed directory of JSON files, retries transient failures with
//! exponential backoff, and caps the number of requests in flight. The wire
//! format is the common chat-completions JSON, so any compatible endpoint
//! works; [`MockProvider`] stands in for the network in tests.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_API_KEY_ENV: &str = "API_KEY";
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("invalid exchange: {0}")]
    InvalidExchange(String),
    #[error("provider error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { status: Option<u16>, message: String },
    #[error("gave up after {attempts} attempts: {last_error}")]
    Timeout { attempts: u32, last_error: String },
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

impl ChatExchange {
    pub fn new(model_name: impl Into<String>, temperature: f64, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_name: model_name.into(),
            temperature,
            max_tokens: DEFAULT_MAX_TOKENS,
            messages,
            response: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::InvalidExchange(m));
        match self.messages.first() {
            None => return bad("no messages".into()),
            Some(m) if m.role != Role::System => return bad("first message must be the system message".into()),
            _ => {}
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        if self.model_name.is_empty() {
            return bad("empty model name".into());
        }
        Ok(())
    }

    pub fn cache_key(&self) -> CacheKey {
        CacheKey::of(&self.model_name, self.temperature, &self.messages)
    }

    /// The chat-completions request body.
    pub fn request_body(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model_name,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

/// 64-bit digest of (model, temperature, messages).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub u64);

impl CacheKey {
    pub fn of(model_name: &str, temperature: f64, messages: &[ChatMessage]) -> Self {
        let canonical = serde_json::to_vec(&(model_name, temperature.to_bits(), messages))
            .expect("messages serialize");
        let digest = Sha256::digest(&canonical);
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        Self(u64::from_be_bytes(head))
    }

    pub fn hex(self) -> String {
        format!("{:016x}", self.0)
    }
}

/// Outcome of a single failed provider call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderFailure {
    /// Worth retrying: rate limits, server errors, transport failures.
    Transient(String),
    Fatal { status: Option<u16>, message: String },
}

pub trait ChatProvider: Send + Sync {
    fn send(&self, exchange: &ChatExchange) -> Result<String, ProviderFailure>;
}

/// Chat-completions over HTTP with a bearer credential.
pub struct HttpProvider {
    endpoint_url: String,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(endpoint_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self {
            endpoint_url: endpoint_url.into(),
            api_key: api_key.into(),
            agent,
        }
    }

    /// Read the credential from the environment variable `var`.
    pub fn from_env(endpoint_url: &str, var: &str) -> Result<Self, GatewayError> {
        if endpoint_url.is_empty() {
            return Err(GatewayError::Config("endpoint_url is not set".into()));
        }
        match std::env::var(var) {
            Ok(key) if !key.is_empty() => Ok(Self::new(endpoint_url, key)),
            _ => Err(GatewayError::Config(format!("credential variable `{var}` is not set"))),
        }
    }
}

impl ChatProvider for HttpProvider {
    fn send(&self, exchange: &ChatExchange) -> Result<String, ProviderFailure> {
        let mut response = self
            .agent
            .post(&self.endpoint_url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(exchange.request_body())
            .map_err(|e| ProviderFailure::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderFailure::Transient(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(ProviderFailure::Transient(format!("HTTP {status}: {body}")));
        }
        if !(200..300).contains(&status) {
            return Err(ProviderFailure::Fatal { status: Some(status), message: body });
        }
        extract_content(&body).ok_or_else(|| ProviderFailure::Fatal {
            status: Some(status),
            message: format!("no choices[0].message.content in response: {body}"),
        })
    }
}

fn extract_content(body: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(body).ok()?;
    value["choices"][0]["message"]["content"].as_str().map(str::to_string)
}

type Responder = dyn Fn(&ChatExchange) -> Result<String, ProviderFailure> + Send + Sync;

/// In-process provider driven by a closure or a fixed script.
pub struct MockProvider {
    responder: Box<Responder>,
}

impl MockProvider {
    pub fn new(
        responder: impl Fn(&ChatExchange) -> Result<String, ProviderFailure> + Send + Sync + 'static,
    ) -> Self {
        Self { responder: Box::new(responder) }
    }

    /// Always answer `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }

    /// Replay `script` in order; once exhausted every call fails fatally.
    pub fn scripted(script: Vec<Result<String, ProviderFailure>>) -> Self {
        let queue = Mutex::new(VecDeque::from(script));
        Self::new(move |_| {
            queue.lock().unwrap().pop_front().unwrap_or_else(|| {
                Err(ProviderFailure::Fatal { status: None, message: "mock script exhausted".into() })
            })
        })
    }
}

impl ChatProvider for MockProvider {
    fn send(&self, exchange: &ChatExchange) -> Result<String, ProviderFailure> {
        (self.responder)(exchange)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Wait before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GatewayStats {
    /// Provider calls made, retries included.
    pub network_calls: usize,
    pub cache_hits: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    model_name: String,
    temperature: f64,
    messages: Vec<ChatMessage>,
    response: String,
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { available: Mutex::new(n.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    provider: Box<dyn ChatProvider>,
    cache_dir: Option<PathBuf>,
    memory: Mutex<HashMap<CacheKey, String>>,
    key_locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
    in_flight: Semaphore,
    retry: RetryPolicy,
    network_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl Gateway {
    pub fn new(provider: impl ChatProvider + 'static) -> Self {
        Self {
            provider: Box::new(provider),
            cache_dir: None,
            memory: Mutex::new(HashMap::new()),
            key_locks: Mutex::new(HashMap::new()),
            in_flight: Semaphore::new(DEFAULT_MAX_IN_FLIGHT),
            retry: RetryPolicy::default(),
            network_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    /// Persist responses under `dir`, one `<key>.json` file per exchange.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.in_flight = Semaphore::new(n);
        self
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            network_calls: self.network_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    /// Return the assistant text for `exchange`, from cache when possible.
    pub fn complete(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        exchange.validate()?;
        let key = exchange.cache_key();
        let key_lock = self
            .key_locks
            .lock()
            .unwrap()
            .entry(key)
            .or_default()
            .clone();
        let _guard = key_lock.lock().unwrap();

        if let Some(hit) = self.lookup(key, exchange)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let response = self.call_with_retry(exchange)?;
        self.store(key, exchange, &response)?;
        Ok(response)
    }

    fn lookup(&self, key: CacheKey, exchange: &ChatExchange) -> Result<Option<String>, GatewayError> {
        if let Some(hit) = self.memory.lock().unwrap().get(&key) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.cache_path(key) else {
            return Ok(None);
        };
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(cache_error(&path, e)),
        };
        let entry: CacheEntry = serde_json::from_str(&text).map_err(|e| cache_error(&path, e))?;
        // a digest collision must not serve another exchange's answer
        if entry.model_name != exchange.model_name
            || entry.temperature.to_bits() != exchange.temperature.to_bits()
            || entry.messages != exchange.messages
        {
            return Ok(None);
        }
        self.memory.lock().unwrap().insert(key, entry.response.clone());
        Ok(Some(entry.response))
    }

    fn store(&self, key: CacheKey, exchange: &ChatExchange, response: &str) -> Result<(), GatewayError> {
        self.memory.lock().unwrap().insert(key, response.to_string());
        let Some(path) = self.cache_path(key) else {
            return Ok(());
        };
        let entry = CacheEntry {
            key: key.hex(),
            model_name: exchange.model_name.clone(),
            temperature: exchange.temperature,
            messages: exchange.messages.clone(),
            response: response.to_string(),
        };
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| cache_error(dir, e))?;
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&entry).expect("cache entry serializes");
        std::fs::write(&tmp, text).map_err(|e| cache_error(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| cache_error(&path, e))
    }

    fn cache_path(&self, key: CacheKey) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{}.json", key.hex())))
    }

    fn call_with_retry(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        let _permit = self.in_flight.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match self.provider.send(exchange) {
                Ok(text) => return Ok(text),
                Err(ProviderFailure::Fatal { status, message }) => {
                    return Err(GatewayError::Provider { status, message })
                }
                Err(ProviderFailure::Transient(message)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::Timeout { attempts: attempt, last_error: message });
                    }
                    std::thread::sleep(self.retry.delay(attempt));
                }
            }
        }
    }
}

fn cache_error(path: &Path, e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Cache { path: path.to_path_buf(), message: e.to_string() }
}
