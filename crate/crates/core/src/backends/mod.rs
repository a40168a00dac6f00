//! Model backends: a chat-completions HTTP client, fixture-driven scripted
//! and replay backends, a recording wrapper, and a deterministic rule-based
//! oracle that understands the bundled scenarios.

mod cassette;
mod http;
mod oracle;

pub use cassette::{
    read_cassette, CassetteHeader, CassetteRecord, RecordBackend, ReplayBackend, RequestSummary,
    ScriptedBackend,
};
pub use http::HttpBackend;
pub use oracle::OracleBackend;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{AgentRequest, AgentResponse, Role};
use crate::simulator::Scenario;

pub const API_KEY_ENV: &str = "TABLETOP_API_KEY";
pub const ENDPOINT_ENV: &str = "TABLETOP_ENDPOINT";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Transport failure that survived the configured retries.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    /// No fixture or cassette record for the request.
    #[error("no recorded response for {role} request {hash}")]
    Miss { role: Role, hash: String },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("cassette io: {0}")]
    Io(String),
}

impl BackendError {
    /// Misses abort the run instead of entering the recovery ladder.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, BackendError::Unavailable(_))
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError>;

    /// Whether requests should carry the rendered frame. Replay and scripted
    /// backends follow their cassette so that request hashes line up.
    fn wants_images(&self) -> bool {
        false
    }

    fn kind(&self) -> BackendKind;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        (**self).complete(req)
    }

    fn wants_images(&self) -> bool {
        (**self).wants_images()
    }

    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Scripted,
    Replay,
    Record,
    Oracle,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(Self::Http),
            "scripted" => Ok(Self::Scripted),
            "replay" => Ok(Self::Replay),
            "record" => Ok(Self::Record),
            "oracle" => Ok(Self::Oracle),
            other => Err(format!("unknown backend kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_transport_retries")]
    pub transport_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub attach_images: bool,
    #[serde(default)]
    pub cassette_path: Option<PathBuf>,
    #[serde(default)]
    pub fixture_path: Option<PathBuf>,
}

fn default_model() -> String {
    "gpt-4.1-mini".into()
}

fn default_timeout() -> f64 {
    60.0
}

fn default_transport_retries() -> u32 {
    2
}

fn default_true() -> bool {
    true
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint_url: None,
            model_name: default_model(),
            timeout: default_timeout(),
            transport_retries: default_transport_retries(),
            temperature: 0.0,
            attach_images: true,
            cassette_path: None,
            fixture_path: None,
        }
    }

    /// Endpoint with the environment override applied.
    pub fn resolved_endpoint(&self) -> Option<String> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.endpoint_url.clone())
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(BackendError::Config(format!(
                    "{:?} backend needs {what}",
                    self.kind
                )))
            }
        };
        if !(self.timeout > 0.0) || !self.timeout.is_finite() {
            return Err(BackendError::Config("timeout must be > 0".into()));
        }
        match self.kind {
            BackendKind::Http => need(self.resolved_endpoint().is_some(), "an endpoint_url"),
            BackendKind::Record => {
                need(self.resolved_endpoint().is_some(), "an endpoint_url")?;
                need(self.cassette_path.is_some(), "a cassette_path")
            }
            BackendKind::Replay => need(self.cassette_path.is_some(), "a cassette_path"),
            BackendKind::Scripted => need(self.fixture_path.is_some(), "a fixture_path"),
            BackendKind::Oracle => Ok(()),
        }
    }
}

/// Builds the configured backend. The oracle needs the scenario it plans for.
pub fn build_backend(
    cfg: &BackendConfig,
    scenario: &Scenario,
) -> Result<Arc<dyn Backend>, BackendError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::Http => Arc::new(HttpBackend::from_config(cfg)?),
        BackendKind::Record => {
            let inner = HttpBackend::from_config(cfg)?;
            Arc::new(RecordBackend::create(
                inner,
                cfg.cassette_path.as_ref().expect("validated"),
            )?)
        }
        BackendKind::Replay => Arc::new(ReplayBackend::open(
            cfg.cassette_path.as_ref().expect("validated"),
        )?),
        BackendKind::Scripted => Arc::new(ScriptedBackend::open(
            cfg.fixture_path.as_ref().expect("validated"),
        )?),
        BackendKind::Oracle => Arc::new(OracleBackend::new(scenario.clone())),
    })
}

/// Canonical document a request hash is computed over. Object keys are sorted
/// by `serde_json`'s ordered map; the image enters only through its digest.
pub fn canonical_request(req: &AgentRequest) -> Value {
    json!({
        "role": req.role.as_str(),
        "version": req.version,
        "payload": req.user_payload,
        "image": req.image.as_ref().map(|i| i.digest.clone()),
    })
}

/// Stable SHA-256 (hex) of the canonical request document.
pub fn canonical_request_hash(req: &AgentRequest) -> String {
    let text = serde_json::to_string(&canonical_request(req)).expect("json value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}
