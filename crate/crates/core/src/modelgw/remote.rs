use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_image_count, BackendConfig, GatewayError, ModelBackend, Query, Response};

const DEFAULT_MAX_IMAGE_BYTES: u64 = 20 * 1024 * 1024;
const DEFAULT_BACKOFF_MS: u64 = 500;
const MAX_BACKOFF_MS: u64 = 30_000;

/// Wire format spoken by a remote service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// Chat-completions style: one user message with text and data-URI
    /// image parts; the answer is `choices[0].message.content`.
    #[serde(rename = "openai_chat")]
    OpenAiChat,
    /// `{"prompt", "images": [base64...], "temperature"}` → `{"text"}`.
    Simple,
}

/// Token bucket shared by every worker querying one backend.
#[derive(Debug)]
pub struct RateLimiter {
    rate_per_s: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(rate_per_s: f64, burst: usize) -> Self {
        let capacity = burst.max(1) as f64;
        Self {
            rate_per_s,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.rate_per_s;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.rate_per_s
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Debug)]
pub struct RemoteBackend {
    id: String,
    endpoint: String,
    dialect: Dialect,
    model: Option<String>,
    api_key: Option<String>,
    max_images: usize,
    max_image_bytes: u64,
    max_retries: u32,
    backoff: Duration,
    parallelism: usize,
    limiter: Option<RateLimiter>,
    agent: ureq::Agent,
}

enum Attempt {
    Done(String),
    Retry(GatewayError),
    Fail(GatewayError),
}

impl RemoteBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| GatewayError::Config(format!("`{}`: endpoint missing", cfg.id)))?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Config(format!("`{}`: environment variable {var} is not set", cfg.id))
            })?),
            None => None,
        };
        if cfg.timeout_s.is_nan() || cfg.timeout_s <= 0.0 {
            return Err(GatewayError::Config(format!("`{}`: timeout_s must be > 0", cfg.id)));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        let parallelism = cfg.parallelism.max(1);
        Ok(Self {
            id: cfg.id.clone(),
            endpoint,
            dialect: cfg.dialect.unwrap_or(Dialect::OpenAiChat),
            model: cfg.model.clone(),
            api_key,
            max_images: cfg.max_images,
            max_image_bytes: cfg.max_image_bytes.unwrap_or(DEFAULT_MAX_IMAGE_BYTES),
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms.unwrap_or(DEFAULT_BACKOFF_MS)),
            parallelism,
            limiter: cfg.rate_per_s.filter(|r| *r > 0.0).map(|r| RateLimiter::new(r, parallelism)),
            agent,
        })
    }

    fn encode_image(&self, path: &Path) -> Result<(String, &'static str), GatewayError> {
        let meta = fs::metadata(path).map_err(|_| GatewayError::UnreadableImage(path.to_path_buf()))?;
        if meta.len() > self.max_image_bytes {
            return Err(GatewayError::OversizeImage {
                path: path.to_path_buf(),
                bytes: meta.len(),
                limit: self.max_image_bytes,
            });
        }
        let bytes = fs::read(path).map_err(|_| GatewayError::UnreadableImage(path.to_path_buf()))?;
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "png" => "image/png",
            Some(e) if e == "webp" => "image/webp",
            _ => "image/jpeg",
        };
        Ok((BASE64.encode(bytes), mime))
    }

    /// Request body for one query. Temperature is pinned to 0.
    pub fn request_body(&self, q: &Query) -> Result<Value, GatewayError> {
        let images = q
            .images
            .iter()
            .map(|p| self.encode_image(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(match self.dialect {
            Dialect::OpenAiChat => {
                let mut content = vec![json!({ "type": "text", "text": q.prompt.text })];
                for (b64, mime) in &images {
                    content.push(json!({
                        "type": "image_url",
                        "image_url": { "url": format!("data:{mime};base64,{b64}") }
                    }));
                }
                let mut body = json!({
                    "temperature": 0,
                    "messages": [{ "role": "user", "content": content }],
                });
                if let Some(m) = &self.model {
                    body["model"] = json!(m);
                }
                body
            }
            Dialect::Simple => json!({
                "prompt": q.prompt.text,
                "images": images.iter().map(|(b, _)| b).collect::<Vec<_>>(),
                "temperature": 0,
            }),
        })
    }

    fn extract_text(&self, body: &str) -> Result<String, GatewayError> {
        let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        let text = match self.dialect {
            Dialect::OpenAiChat => v.pointer("/choices/0/message/content"),
            Dialect::Simple => v.get("text"),
        };
        text.and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::BadResponse(format!("no answer text in {body:.200}")))
    }

    fn attempt(&self, body: &str) -> Attempt {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(GatewayError::Timeout),
            Err(e) => return Attempt::Retry(GatewayError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(GatewayError::Timeout),
            Err(e) => return Attempt::Retry(GatewayError::Transport(e.to_string())),
        };
        match status {
            200..=299 => match self.extract_text(&text) {
                Ok(t) => Attempt::Done(t),
                Err(e) => Attempt::Fail(e),
            },
            429 => Attempt::Retry(GatewayError::RateLimited { attempts: 0 }),
            500..=599 => Attempt::Retry(GatewayError::Http { status, body: text }),
            _ => Attempt::Fail(GatewayError::Http { status, body: text }),
        }
    }
}

impl ModelBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_images(&self) -> usize {
        self.max_images
    }

    fn query(&self, q: &Query) -> Result<Response, GatewayError> {
        check_image_count(q, self.max_images)?;
        let body = self.request_body(q)?.to_string();
        let started = Instant::now();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    return Ok(Response {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    if attempts > self.max_retries {
                        return Err(match e {
                            GatewayError::RateLimited { .. } => GatewayError::RateLimited { attempts },
                            other => other,
                        });
                    }
                    let factor = 1u64 << (attempts - 1).min(16);
                    let wait = (self.backoff.as_millis() as u64).saturating_mul(factor).min(MAX_BACKOFF_MS);
                    log::warn!("{}: {e}; retry {attempts}/{} in {wait} ms", self.id, self.max_retries);
                    thread::sleep(Duration::from_millis(wait));
                }
            }
        }
    }

    fn parallelism(&self) -> usize {
        self.parallelism
    }
}
