//! Detection providers feeding the grounder: the simulator's synthetic
//! detectors, a client for a remote open-vocabulary detector, and a provider
//! that always faults (for exercising partial failure).
//!
//! A provider fault never aborts grounding: it yields an empty list plus a
//! [`ProviderFault`] record.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::{
    clamp_to_image, mix_seed, oracle_detect, DetectorNoise, Observation, SimDetectorSpec,
};
use crate::state::{BBox, Detection};

pub const DEFAULT_PROVIDER_TIMEOUT_SECS: f64 = 10.0;

/// Which frame a query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub episode_seed: u64,
    pub step_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionQuery {
    labels: Vec<String>,
    pub image_ref: ImageRef,
    pub source_id: String,
    /// Distinguishes repeated queries on the same frame so retries see fresh
    /// detector noise.
    pub nonce: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("detection query needs at least one label")]
    NoLabels,
}

impl DetectionQuery {
    /// Trims and deduplicates labels (case-insensitive, first spelling kept).
    pub fn new(
        labels: &[String],
        image_ref: ImageRef,
        source_id: impl Into<String>,
        nonce: u64,
    ) -> Result<Self, QueryError> {
        let mut out: Vec<String> = Vec::new();
        for l in labels {
            let t = l.trim();
            if !t.is_empty() && !out.iter().any(|o| o.eq_ignore_ascii_case(t)) {
                out.push(t.to_string());
            }
        }
        if out.is_empty() {
            return Err(QueryError::NoLabels);
        }
        Ok(Self {
            labels: out,
            image_ref,
            source_id: source_id.into(),
            nonce,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderFault {
    pub source_id: String,
    pub message: String,
}

pub trait DetectionProvider: Send + Sync {
    fn id(&self) -> &str;
    fn detect_raw(
        &self,
        query: &DetectionQuery,
        obs: &Observation,
    ) -> Result<Vec<Detection>, String>;
}

/// Runs one provider and sanitizes its output: boxes are clamped to the image,
/// degenerate boxes and unrequested labels dropped, and `source` set to the
/// provider id.
pub fn detect(
    query: &DetectionQuery,
    provider: &dyn DetectionProvider,
    obs: &Observation,
) -> (Vec<Detection>, Option<ProviderFault>) {
    match provider.detect_raw(query, obs) {
        Ok(raw) => {
            let dets = raw
                .into_iter()
                .filter(|d| {
                    query
                        .labels
                        .iter()
                        .any(|l| l.eq_ignore_ascii_case(d.label.trim()))
                })
                .filter_map(|d| {
                    let b = clamp_to_image(d.bbox, obs.width(), obs.height());
                    let conf = if d.confidence.is_finite() {
                        d.confidence.clamp(0.0, 1.0)
                    } else {
                        return None;
                    };
                    Detection::new(d.label, b, conf, provider.id()).ok()
                })
                .collect();
            (dets, None)
        }
        Err(message) => {
            log::warn!("detection provider {} failed: {message}", provider.id());
            (
                Vec::new(),
                Some(ProviderFault {
                    source_id: provider.id().to_string(),
                    message,
                }),
            )
        }
    }
}

/// Queries every provider concurrently; results keep provider order.
pub fn detect_all(
    providers: &[Box<dyn DetectionProvider>],
    labels: &[String],
    obs: &Observation,
    nonce: u64,
) -> Result<(Vec<Vec<Detection>>, Vec<ProviderFault>), QueryError> {
    let image_ref = ImageRef {
        episode_seed: obs.episode_seed,
        step_index: obs.step_index,
    };
    let queries = providers
        .iter()
        .map(|p| DetectionQuery::new(labels, image_ref, p.id(), nonce))
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<(Vec<Detection>, Option<ProviderFault>)> = if providers.len() <= 1 {
        providers
            .iter()
            .zip(&queries)
            .map(|(p, q)| detect(q, p.as_ref(), obs))
            .collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = providers
                .iter()
                .zip(&queries)
                .map(|(p, q)| s.spawn(move || detect(q, p.as_ref(), obs)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("provider thread"))
                .collect()
        })
    };
    let mut faults = Vec::new();
    let mut lists = Vec::new();
    for (d, f) in results {
        lists.push(d);
        faults.extend(f);
    }
    Ok((lists, faults))
}

/// The simulator's synthetic detector.
pub struct SimProvider {
    spec: SimDetectorSpec,
}

impl SimProvider {
    pub fn new(spec: SimDetectorSpec) -> Self {
        Self { spec }
    }

    pub fn with_noise(source_id: &str, noise: DetectorNoise, seed: u64) -> Self {
        Self::new(SimDetectorSpec {
            source_id: source_id.into(),
            noise,
            seed,
        })
    }
}

impl DetectionProvider for SimProvider {
    fn id(&self) -> &str {
        &self.spec.source_id
    }

    fn detect_raw(
        &self,
        query: &DetectionQuery,
        obs: &Observation,
    ) -> Result<Vec<Detection>, String> {
        let seed = mix_seed(&[
            self.spec.seed,
            obs.episode_seed,
            obs.step_index,
            query.nonce,
        ]);
        Ok(oracle_detect(
            obs,
            &query.labels,
            &self.spec.noise,
            &self.spec.source_id,
            seed,
        ))
    }
}

/// Always fails; stands in for an unreachable detector.
pub struct FailingProvider {
    id: String,
}

impl FailingProvider {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }
}

impl DetectionProvider for FailingProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn detect_raw(
        &self,
        _q: &DetectionQuery,
        _obs: &Observation,
    ) -> Result<Vec<Detection>, String> {
        Err("provider configured to fail".into())
    }
}

/// Request body of the remote detector protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteDetectRequest {
    pub source_id: String,
    pub labels: Vec<String>,
    pub width: usize,
    pub height: usize,
    /// PNG frame, base64.
    pub image_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteDetection {
    pub label: String,
    /// `[u_min, v_min, u_max, v_max]` pixels.
    pub bbox: [f64; 4],
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteDetectResponse {
    pub detections: Vec<RemoteDetection>,
}

/// Client for a single-endpoint detector service.
pub struct RemoteProvider {
    id: String,
    url: String,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(id: impl Into<String>, url: impl Into<String>, timeout_secs: f64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(timeout_secs)))
            .build()
            .into();
        Self {
            id: id.into(),
            url: url.into(),
            agent,
        }
    }
}

impl DetectionProvider for RemoteProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn detect_raw(
        &self,
        query: &DetectionQuery,
        obs: &Observation,
    ) -> Result<Vec<Detection>, String> {
        let png = obs.rgb.to_png().map_err(|e| e.to_string())?;
        let body = RemoteDetectRequest {
            source_id: self.id.clone(),
            labels: query.labels.clone(),
            width: obs.width(),
            height: obs.height(),
            image_png: STANDARD.encode(png),
        };
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let parsed: RemoteDetectResponse =
            resp.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(parsed
            .detections
            .into_iter()
            .filter_map(|d| {
                let [a, b, c, e] = d.bbox;
                let bbox = BBox {
                    u_min: a,
                    v_min: b,
                    u_max: c,
                    v_max: e,
                };
                bbox.as_array()
                    .iter()
                    .all(|v| v.is_finite())
                    .then(|| Detection {
                        label: d.label,
                        bbox,
                        confidence: d.confidence,
                        source: self.id.clone(),
                    })
            })
            .collect())
    }
}

/// Provider settings as they appear in run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Sim {
        source_id: String,
        #[serde(default)]
        noise: DetectorNoise,
        #[serde(default)]
        seed: u64,
    },
    Remote {
        source_id: String,
        url: String,
        #[serde(default = "default_timeout")]
        timeout: f64,
    },
    Failing {
        source_id: String,
    },
}

fn default_timeout() -> f64 {
    DEFAULT_PROVIDER_TIMEOUT_SECS
}

impl ProviderConfig {
    pub fn build(&self) -> Box<dyn DetectionProvider> {
        match self {
            ProviderConfig::Sim {
                source_id,
                noise,
                seed,
            } => Box::new(SimProvider::with_noise(source_id, *noise, *seed)),
            ProviderConfig::Remote {
                source_id,
                url,
                timeout,
            } => Box::new(RemoteProvider::new(source_id, url, *timeout)),
            ProviderConfig::Failing { source_id } => Box::new(FailingProvider::new(source_id)),
        }
    }
}

impl From<&SimDetectorSpec> for ProviderConfig {
    fn from(s: &SimDetectorSpec) -> Self {
        ProviderConfig::Sim {
            source_id: s.source_id.clone(),
            noise: s.noise,
            seed: s.seed,
        }
    }
}
