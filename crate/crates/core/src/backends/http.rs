//! Chat-completions client.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::{Backend, BackendConfig, BackendError, BackendKind, API_KEY_ENV};
use crate::agents::{AgentRequest, AgentResponse};

pub struct HttpBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    transport_retries: u32,
    attach_images: bool,
    agent: ureq::Agent,
}

/// Accepts either a full completions URL or a server base URL.
fn completions_url(endpoint: &str) -> String {
    let e = endpoint.trim_end_matches('/');
    if e.ends_with("/chat/completions") {
        e.to_string()
    } else if e.ends_with("/v1") {
        format!("{e}/chat/completions")
    } else {
        format!("{e}/v1/chat/completions")
    }
}

impl HttpBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let endpoint = cfg
            .resolved_endpoint()
            .ok_or_else(|| BackendError::Config("http backend needs an endpoint".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            url: completions_url(&endpoint),
            model: cfg.model_name.clone(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            temperature: cfg.temperature,
            transport_retries: cfg.transport_retries,
            attach_images: cfg.attach_images,
            agent,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// The chat-completions request document.
    pub fn request_body(&self, req: &AgentRequest) -> Value {
        let text = serde_json::to_string(&req.user_payload).expect("payload serializes");
        let user_content = match &req.image {
            Some(img) => json!([
                {"type": "text", "text": text},
                {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{}", STANDARD.encode(img.png.as_slice()))}}
            ]),
            None => Value::String(text),
        };
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": req.system_instruction},
                {"role": "user", "content": user_content}
            ]
        })
    }

    fn round_trip(&self, body: &Value) -> Result<String, String> {
        let mut rb = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            rb = rb.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = rb.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        if status != 200 {
            return Err(format!(
                "HTTP {status}: {}",
                text.chars().take(200).collect::<String>()
            ));
        }
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| format!("bad response body: {e}"))?;
        doc["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        let body = self.request_body(req);
        let mut last = String::new();
        for attempt in 0..=self.transport_retries {
            match self.round_trip(&body) {
                Ok(text) => return Ok(AgentResponse::from_raw(text)),
                Err(e) => {
                    log::warn!("{} request failed (attempt {}): {e}", req.role, attempt + 1);
                    last = e;
                }
            }
        }
        Err(BackendError::Unavailable(last))
    }

    fn wants_images(&self) -> bool {
        self.attach_images
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }
}
