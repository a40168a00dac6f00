//! Line-delimited cassettes: one header line, then one record per exchange.
//!
//! ```text
//! {"cassette":1,"attach_images":true}
//! {"hash":"…","role":"decomposer","request":{…},"response":"…"}
//! ```

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{canonical_request_hash, Backend, BackendError, BackendKind};
use crate::agents::{AgentRequest, AgentResponse, Role};

pub const CASSETTE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteHeader {
    pub cassette: u32,
    pub attach_images: bool,
}

/// Enough of the request to make a cassette readable by eye.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestSummary {
    pub version: String,
    pub payload: Value,
    #[serde(default)]
    pub image_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteRecord {
    pub hash: String,
    pub role: Role,
    pub request: RequestSummary,
    pub response: String,
}

impl CassetteRecord {
    pub fn new(req: &AgentRequest, response: impl Into<String>) -> Self {
        Self {
            hash: canonical_request_hash(req),
            role: req.role,
            request: RequestSummary {
                version: req.version.clone(),
                payload: req.user_payload.clone(),
                image_digest: req.image.as_ref().map(|i| i.digest.clone()),
            },
            response: response.into(),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::Io(format!("{}: {e}", path.display()))
}

/// Reads a cassette. A missing header means `attach_images = false`.
pub fn read_cassette(path: &Path) -> Result<(CassetteHeader, Vec<CassetteRecord>), BackendError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = CassetteHeader {
        cassette: CASSETTE_VERSION,
        attach_images: false,
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<CassetteHeader>(&line) {
                if h.cassette != CASSETTE_VERSION {
                    return Err(io_err(
                        path,
                        format!("unsupported cassette version {}", h.cassette),
                    ));
                }
                header = h;
                continue;
            }
        }
        let rec: CassetteRecord = serde_json::from_str(&line)
            .map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok((header, records))
}

/// Fixture lookup keyed by `(role, request hash)`. Entries may be served any
/// number of times.
pub struct ScriptedBackend {
    attach_images: bool,
    table: HashMap<(Role, String), String>,
}

impl ScriptedBackend {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let (header, records) = read_cassette(path)?;
        Ok(Self::from_records(header.attach_images, records))
    }

    pub fn from_records(attach_images: bool, records: Vec<CassetteRecord>) -> Self {
        let mut table = HashMap::new();
        for r in records {
            table.entry((r.role, r.hash)).or_insert(r.response);
        }
        Self {
            attach_images,
            table,
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        let hash = canonical_request_hash(req);
        match self.table.get(&(req.role, hash.clone())) {
            Some(text) => Ok(AgentResponse::from_raw(text.clone())),
            None => Err(BackendError::Miss {
                role: req.role,
                hash,
            }),
        }
    }

    fn wants_images(&self) -> bool {
        self.attach_images
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }
}

/// Serves each recorded exchange once, in order among records with the same
/// hash.
pub struct ReplayBackend {
    attach_images: bool,
    records: Vec<CassetteRecord>,
    consumed: Mutex<Vec<bool>>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let (header, records) = read_cassette(path)?;
        Ok(Self::from_records(header.attach_images, records))
    }

    pub fn from_records(attach_images: bool, records: Vec<CassetteRecord>) -> Self {
        let consumed = Mutex::new(vec![false; records.len()]);
        Self {
            attach_images,
            records,
            consumed,
        }
    }

    pub fn remaining(&self) -> usize {
        self.consumed
            .lock()
            .expect("replay lock")
            .iter()
            .filter(|c| !**c)
            .count()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        let hash = canonical_request_hash(req);
        let mut consumed = self.consumed.lock().expect("replay lock");
        let idx = self
            .records
            .iter()
            .enumerate()
            .position(|(i, r)| !consumed[i] && r.role == req.role && r.hash == hash)
            .ok_or(BackendError::Miss {
                role: req.role,
                hash,
            })?;
        consumed[idx] = true;
        Ok(AgentResponse::from_raw(self.records[idx].response.clone()))
    }

    fn wants_images(&self) -> bool {
        self.attach_images
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }
}

/// Delegates to `inner` and appends every successful exchange.
pub struct RecordBackend<B> {
    inner: B,
    file: Mutex<File>,
}

impl<B: Backend> RecordBackend<B> {
    /// Creates (truncating) the cassette and writes its header.
    pub fn create(inner: B, path: &Path) -> Result<Self, BackendError> {
        let mut file = File::create(path).map_err(|e| io_err(path, e))?;
        let header = CassetteHeader {
            cassette: CASSETTE_VERSION,
            attach_images: inner.wants_images(),
        };
        writeln!(
            file,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )
        .map_err(|e| io_err(path, e))?;
        Ok(Self {
            inner,
            file: Mutex::new(file),
        })
    }

    /// Appends to an existing cassette without rewriting its header.
    pub fn append(inner: B, path: &Path) -> Result<Self, BackendError> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            inner,
            file: Mutex::new(file),
        })
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: Backend> Backend for RecordBackend<B> {
    fn complete(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        let resp = self.inner.complete(req)?;
        let line = serde_json::to_string(&CassetteRecord::new(req, resp.raw_text.clone()))
            .expect("record serializes");
        let mut f = self.file.lock().expect("cassette lock");
        writeln!(f, "{line}")
            .and_then(|_| f.flush())
            .map_err(|e| BackendError::Io(e.to_string()))?;
        Ok(resp)
    }

    fn wants_images(&self) -> bool {
        self.inner.wants_images()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Record
    }
}
