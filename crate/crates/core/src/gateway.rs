//! Chat-completion client for OpenAI-compatible endpoints.
//!
//! [`HttpGateway`] adds an on-disk response cache, retries with exponential
//! backoff and a global in-flight limit. [`StubModel`] is a scripted stand-in
//! used by tests and offline runs.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "message")]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("rate limited after {0} attempts")]
    RateLimited(u32),
    #[error("server error {status} after {attempts} attempts")]
    ServerError { status: u16, attempts: u32 },
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// One chat-completion call. `sample_index` distinguishes repeated draws of
/// the same prompt so each gets its own cache entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub sample_index: u32,
    /// Overrides the gateway temperature when set.
    pub temperature: Option<f64>,
}

impl CompletionRequest {
    pub fn sample(prompt: impl Into<String>, sample_index: u32) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            sample_index,
            temperature: None,
        }
    }

    /// Deterministic judge call at temperature 0.
    pub fn judge(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            sample_index: 0,
            temperature: Some(0.0),
        }
    }
}

#[async_trait]
pub trait ChatModel: Send + Sync {
    fn model_id(&self) -> &str;

    async fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError>;
}

/// Runs `reqs` with at most `limit` in flight; results stay aligned with the
/// inputs and failures are reported per item.
pub async fn batch_complete(
    model: &dyn ChatModel,
    reqs: &[CompletionRequest],
    limit: usize,
) -> Vec<Result<String, GatewayError>> {
    stream::iter((0..reqs.len()).map(|i| model.complete(&reqs[i])))
        .buffered(limit.max(1))
        .collect()
        .await
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            max_attempts: 5,
            backoff_base_ms: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env_var: String,
    pub model: String,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub max_concurrency: usize,
    pub retry: RetryConfig,
    pub cache_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            base_url: "https://api.openai.com/v1".to_string(),
            api_key_env_var: "OPENAI_API_KEY".to_string(),
            model: "gpt-4o-mini".to_string(),
            temperature: None,
            max_tokens: Some(512),
            max_concurrency: 8,
            retry: RetryConfig::default(),
            cache_dir: None,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_concurrency == 0 {
            return Err(GatewayError::Config(
                "max_concurrency must be at least 1".into(),
            ));
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::Config(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        if self.model.trim().is_empty() {
            return Err(GatewayError::Config("model must be set".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request_hash: String,
    pub model: String,
    pub prompt: String,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub sample_index: u32,
    pub response: String,
    pub latency_ms: u64,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

/// Stable cache key over everything that determines a response.
pub fn request_hash(
    model: &str,
    prompt: &str,
    temperature: Option<f64>,
    max_tokens: Option<u32>,
    sample_index: u32,
) -> String {
    let key = serde_json::json!([model, prompt, temperature, max_tokens, sample_index]);
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

/// JSON-file cache laid out as `<dir>/<first two hash chars>/<hash>.json`.
#[derive(Clone, Debug)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into() }
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.dir.join(&hash[..2]).join(format!("{hash}.json"))
    }

    pub fn load(&self, hash: &str) -> Option<CompletionRecord> {
        let bytes = std::fs::read(self.path_for(hash)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn store(&self, record: &CompletionRecord) -> Result<(), GatewayError> {
        let path = self.path_for(&record.request_hash);
        let bytes =
            serde_json::to_vec_pretty(record).map_err(|e| GatewayError::Cache(e.to_string()))?;
        write_atomic(&path, &bytes).map_err(|e| GatewayError::Cache(e.to_string()))
    }
}

/// Writes via a temporary file in the target directory and renames it into
/// place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

pub struct HttpGateway {
    cfg: GatewayConfig,
    client: reqwest::Client,
    limit: Arc<Semaphore>,
    cache: Option<ResponseCache>,
    api_key: Option<String>,
    network_calls: AtomicUsize,
}

impl HttpGateway {
    pub fn new(cfg: GatewayConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(HttpGateway {
            limit: Arc::new(Semaphore::new(cfg.max_concurrency)),
            cache: cfg.cache_dir.clone().map(ResponseCache::new),
            api_key: None,
            network_calls: AtomicUsize::new(0),
            client,
            cfg,
        })
    }

    /// Uses `key` instead of reading the configured environment variable.
    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    /// HTTP requests attempted so far (retries included).
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn resolve_key(&self) -> Result<String, GatewayError> {
        if let Some(k) = &self.api_key {
            return Ok(k.clone());
        }
        match std::env::var(&self.cfg.api_key_env_var) {
            Ok(k) if !k.trim().is_empty() => Ok(k),
            _ => Err(GatewayError::AuthFailed(format!(
                "environment variable {} is not set",
                self.cfg.api_key_env_var
            ))),
        }
    }

    async fn call(
        &self,
        key: &str,
        prompt: &str,
        temperature: Option<f64>,
    ) -> Result<String, GatewayError> {
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let mut body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(t) = temperature {
            body["temperature"] = serde_json::json!(t);
        }
        if let Some(m) = self.cfg.max_tokens {
            body["max_tokens"] = serde_json::json!(m);
        }
        let attempts = self.cfg.retry.max_attempts;
        let mut last = GatewayError::Transport("no attempt made".into());
        for attempt in 1..=attempts {
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let sent = self
                .client
                .post(&url)
                .bearer_auth(key)
                .json(&body)
                .send()
                .await;
            let retryable = match sent {
                Err(e) => {
                    last = GatewayError::Transport(e.to_string());
                    true
                }
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if resp.status().is_success() {
                        let parsed: ChatResponse = resp
                            .json()
                            .await
                            .map_err(|e| GatewayError::BadResponse(e.to_string()))?;
                        return parsed
                            .choices
                            .into_iter()
                            .next()
                            .and_then(|c| c.message.content)
                            .ok_or_else(|| GatewayError::BadResponse("no message content".into()));
                    }
                    match status {
                        401 | 403 => {
                            let text = resp.text().await.unwrap_or_default();
                            return Err(GatewayError::AuthFailed(format!(
                                "status {status}: {text}"
                            )));
                        }
                        429 => {
                            last = GatewayError::RateLimited(attempt);
                            true
                        }
                        500..=599 => {
                            last = GatewayError::ServerError {
                                status,
                                attempts: attempt,
                            };
                            true
                        }
                        _ => {
                            let body = resp.text().await.unwrap_or_default();
                            return Err(GatewayError::Rejected { status, body });
                        }
                    }
                }
            };
            if retryable && attempt < attempts {
                let delay = self
                    .cfg
                    .retry
                    .backoff_base_ms
                    .saturating_mul(1u64 << (attempt - 1).min(16));
                tracing::debug!(attempt, delay, "retrying chat completion");
                tokio::time::sleep(Duration::from_millis(delay)).await;
            }
        }
        Err(last)
    }
}

#[async_trait]
impl ChatModel for HttpGateway {
    fn model_id(&self) -> &str {
        &self.cfg.model
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let temperature = req.temperature.or(self.cfg.temperature);
        let hash = request_hash(
            &self.cfg.model,
            &req.prompt,
            temperature,
            self.cfg.max_tokens,
            req.sample_index,
        );
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.load(&hash)) {
            return Ok(hit.response);
        }
        let key = self.resolve_key()?;
        let _permit = self
            .limit
            .acquire()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let started = Instant::now();
        let response = self.call(&key, &req.prompt, temperature).await?;
        if let Some(cache) = &self.cache {
            cache.store(&CompletionRecord {
                request_hash: hash,
                model: self.cfg.model.clone(),
                prompt: req.prompt.clone(),
                temperature,
                max_tokens: self.cfg.max_tokens,
                sample_index: req.sample_index,
                response: response.clone(),
                latency_ms: started.elapsed().as_millis() as u64,
                created_at: now_ms(),
            })?;
        }
        Ok(response)
    }
}

type Script = dyn Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync;

/// Scripted in-process model.
#[derive(Clone)]
pub struct StubModel {
    id: String,
    script: Arc<Script>,
    calls: Arc<AtomicUsize>,
}

impl StubModel {
    pub fn from_fn<F>(id: impl Into<String>, f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync + 'static,
    {
        StubModel {
            id: id.into(),
            script: Arc::new(f),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Always answers `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        StubModel::from_fn(format!("stub:{text}"), move |_| Ok(text.clone()))
    }

    /// Answers `yes` for the first `k` sample indices and `no` afterwards.
    pub fn first_k(k: u32, yes: impl Into<String>, no: impl Into<String>) -> Self {
        let (yes, no) = (yes.into(), no.into());
        StubModel::from_fn(format!("stub-first-{k}"), move |r| {
            Ok(if r.sample_index < k {
                yes.clone()
            } else {
                no.clone()
            })
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatModel for StubModel {
    fn model_id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.script)(req)
    }
}

/// Builds a model from a spec string: `stub:<text>` yields a constant stub,
/// anything else is an HTTP model id overriding `cfg.model`.
pub fn model_from_spec(
    spec: &str,
    cfg: &GatewayConfig,
) -> Result<Arc<dyn ChatModel>, GatewayError> {
    if let Some(text) = spec.strip_prefix("stub:") {
        return Ok(Arc::new(StubModel::constant(text)));
    }
    let mut cfg = cfg.clone();
    if !spec.is_empty() {
        cfg.model = spec.to_string();
    }
    Ok(Arc::new(HttpGateway::new(cfg)?))
}
