use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Decomposer,
    Descriptor,
    Perceptor,
    Thinker,
    Reflector,
    SingleAgent,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Decomposer,
        Role::Descriptor,
        Role::Perceptor,
        Role::Thinker,
        Role::Reflector,
        Role::SingleAgent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Decomposer => "decomposer",
            Role::Descriptor => "descriptor",
            Role::Perceptor => "perceptor",
            Role::Thinker => "thinker",
            Role::Reflector => "reflector",
            Role::SingleAgent => "single_agent",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

/// PNG-encoded frame plus its SHA-256, shared cheaply between requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub png: Arc<Vec<u8>>,
    pub digest: String,
}

impl ImageAttachment {
    pub fn from_png(png: Vec<u8>) -> Self {
        let digest = hex::encode(Sha256::digest(&png));
        Self {
            png: Arc::new(png),
            digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRequest {
    pub role: Role,
    /// Prompt asset version, e.g. `"v1"`.
    pub version: String,
    pub system_instruction: String,
    pub user_payload: Value,
    pub image: Option<ImageAttachment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentResponse {
    pub raw_text: String,
    /// JSON document found in `raw_text`, or `Null` if there is none.
    pub parsed: Value,
}

impl AgentResponse {
    pub fn from_raw(raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        let parsed = extract_json(&raw_text).unwrap_or(Value::Null);
        Self { raw_text, parsed }
    }
}

/// Pulls a JSON object out of model text, tolerating code fences and prose
/// around it.
pub fn extract_json(text: &str) -> Option<Value> {
    let t = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(t) {
        return Some(v);
    }
    let fenced = t
        .split("```")
        .nth(1)
        .map(|block| block.trim_start_matches("json").trim());
    if let Some(Ok(v)) = fenced.map(serde_json::from_str::<Value>) {
        return Some(v);
    }
    let (start, end) = (t.find('{')?, t.rfind('}')?);
    (start < end)
        .then(|| serde_json::from_str(&t[start..=end]).ok())
        .flatten()
}
