//! Uniform access to model backends.
//!
//! A backend answers a [`Query`] (ordered image paths plus a rendered prompt)
//! with free text. Two families exist: remote inference services spoken to
//! over HTTP through a dialect adapter, and reference policies that answer
//! without opening any image, used to validate the harness itself.

mod geometry;
mod policy;
mod remote;
mod transcript;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptkit::PromptText;
use crate::sampling::Choice;

pub use geometry::{backproject_depth, project_point, CameraIntrinsics, DepthMap, GeometryError};
pub use policy::{PolicyBackend, PolicyKind};
pub use remote::{Dialect, RateLimiter, RemoteBackend};
pub use transcript::{prompt_sha256, read_transcript, record_transcript, TranscriptEntry, TranscriptSink};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("image {path} is {bytes} bytes, limit is {limit}")]
    OversizeImage { path: PathBuf, bytes: u64, limit: u64 },
    #[error("{given} images exceed the backend limit of {max}")]
    TooManyImages { given: usize, max: usize },
    #[error("cannot read image {0}")]
    UnreadableImage(PathBuf),
    #[error("oracle policy queried without ground truth for `{0}`")]
    MissingTruth(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("backend config: {0}")]
    Config(String),
}

impl GatewayError {
    /// Failures of the transport itself, as opposed to bad requests.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            GatewayError::Timeout
                | GatewayError::Transport(_)
                | GatewayError::RateLimited { .. }
                | GatewayError::Http { .. }
                | GatewayError::BadResponse(_)
        )
    }
}

/// One request to a backend.
#[derive(Debug, Clone)]
pub struct Query {
    pub sample_id: String,
    pub images: Vec<PathBuf>,
    pub prompt: PromptText,
    /// Ground-truth side channel; only the oracle policy reads it.
    pub truth: Option<Choice>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub text: String,
    pub latency_ms: u64,
}

impl Response {
    pub fn instant(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            latency_ms: 0,
        }
    }
}

pub trait ModelBackend: Send + Sync {
    fn id(&self) -> &str;

    fn max_images(&self) -> usize;

    fn query(&self, q: &Query) -> Result<Response, GatewayError>;

    /// Concurrent in-flight queries this backend tolerates.
    fn parallelism(&self) -> usize {
        1
    }

    /// True when responses depend only on the query (no clock, no network).
    fn deterministic(&self) -> bool {
        false
    }
}

pub(crate) fn check_image_count(q: &Query, max: usize) -> Result<(), GatewayError> {
    if q.images.len() > max {
        return Err(GatewayError::TooManyImages {
            given: q.images.len(),
            max,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKindTag {
    Remote,
    Policy,
}

fn default_max_images() -> usize {
    2
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_parallelism() -> usize {
    4
}

/// One entry of the backend roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub id: String,
    pub kind: BackendKindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialect: Option<Dialect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_images")]
    pub max_images: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Model name passed to chat-style services.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_per_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_image_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backoff_ms: Option<u64>,
    /// Policy name for `kind = "policy"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Probability of answering `img2` for the chronological-bias simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

impl BackendConfig {
    pub fn policy(id: &str, policy: &str) -> Self {
        Self {
            id: id.to_string(),
            kind: BackendKindTag::Policy,
            endpoint: None,
            dialect: None,
            api_key_env: None,
            max_images: default_max_images(),
            timeout_s: default_timeout(),
            max_retries: default_retries(),
            parallelism: default_parallelism(),
            model: None,
            rate_per_s: None,
            max_image_bytes: None,
            backoff_ms: None,
            policy: Some(policy.to_string()),
            seed: None,
            p: None,
        }
    }

    /// Built-in reference policies addressable by id without a roster entry.
    pub fn builtin(id: &str) -> Option<Self> {
        match id {
            "oracle" | "always_first" | "always_second" | "seeded_random" | "chrono_bias_sim" => {
                Some(Self::policy(id, id))
            }
            _ => None,
        }
    }

    /// Instantiates the backend; `run_seed` seeds stochastic policies that
    /// carry no seed of their own.
    pub fn build(&self, run_seed: u64) -> Result<Box<dyn ModelBackend>, GatewayError> {
        match self.kind {
            BackendKindTag::Policy => {
                let name = self
                    .policy
                    .as_deref()
                    .ok_or_else(|| GatewayError::Config(format!("`{}`: policy name missing", self.id)))?;
                let seed = self.seed.unwrap_or(run_seed);
                let kind = PolicyKind::from_name(name, seed, self.p)
                    .ok_or_else(|| GatewayError::Config(format!("unknown policy `{name}`")))?;
                Ok(Box::new(PolicyBackend::new(&self.id, kind, self.max_images)))
            }
            BackendKindTag::Remote => Ok(Box::new(RemoteBackend::from_config(self)?)),
        }
    }
}

/// Parses a roster file: a JSON array of [`BackendConfig`] entries.
pub fn parse_roster(text: &str) -> Result<Vec<BackendConfig>, GatewayError> {
    let roster: Vec<BackendConfig> =
        serde_json::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
    let mut ids = std::collections::HashSet::new();
    for b in &roster {
        if !ids.insert(b.id.as_str()) {
            return Err(GatewayError::Config(format!("duplicate backend id `{}`", b.id)));
        }
    }
    Ok(roster)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roster_parsing_and_defaults() {
        let r = parse_roster(
            r#"[{"id":"gpt","kind":"remote","endpoint":"http://x/v1/chat/completions","dialect":"openai_chat","api_key_env":"KEY"},
                {"id":"bias","kind":"policy","policy":"chrono_bias_sim","p":0.9}]"#,
        )
        .unwrap();
        assert_eq!(r[0].max_images, 2);
        assert_eq!(r[0].max_retries, 3);
        assert_eq!(r[0].dialect, Some(Dialect::OpenAiChat));
        assert_eq!(r[1].p, Some(0.9));
        assert!(r[1].build(1).is_ok());
        assert!(parse_roster(r#"[{"id":"a","kind":"policy"},{"id":"a","kind":"policy"}]"#).is_err());
    }

    #[test]
    fn builtins_resolve() {
        for id in ["oracle", "always_first", "always_second", "seeded_random", "chrono_bias_sim"] {
            let b = BackendConfig::builtin(id).unwrap().build(0).unwrap();
            assert_eq!(b.id(), id);
            assert!(b.deterministic());
        }
        assert!(BackendConfig::builtin("gpt-4o").is_none());
        let mut bad = BackendConfig::policy("x", "nope");
        assert!(bad.build(0).is_err());
        bad.policy = None;
        assert!(bad.build(0).is_err());
    }
}
