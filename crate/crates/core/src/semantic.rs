//! Frozen per-fragment embeddings in the `TFEM` binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header  = "TFEM" | u32 version (=1) | u32 dim | u8 pooling (0 cls, 1 mean, 2 max)
//! record  = u16 id_len | id bytes (UTF-8) | dim × f32 | u32 crc32(record body)
//! ```
//!
//! The record body covered by the checksum is everything in the record
//! before the checksum itself.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"TFEM";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 13;
pub const DEFAULT_DIM: usize = 768;

#[derive(Debug, thiserror::Error)]
pub enum SemanticError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0}")]
    BadVersion(u32),
    #[error("unknown pooling code {0}")]
    BadPooling(u8),
    #[error("store header truncated ({0} bytes)")]
    ShortHeader(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("record at offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("duplicate fragment id {id:?} at offset {offset}")]
    DuplicateId { id: String, offset: usize },
    #[error("fragment {0:?} not found in embedding store")]
    NotFound(String),
    #[error("fragment {id:?}: {reason}")]
    InvalidVector { id: String, reason: String },
    #[error("{path}:{line}: {message}")]
    Jsonl { path: String, line: usize, message: String },
    #[error("embedder service: {0}")]
    Service(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Mean,
    Max,
}

impl Pooling {
    pub fn code(self) -> u8 {
        match self {
            Pooling::Cls => 0,
            Pooling::Mean => 1,
            Pooling::Max => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, SemanticError> {
        match code {
            0 => Ok(Pooling::Cls),
            1 => Ok(Pooling::Mean),
            2 => Ok(Pooling::Max),
            other => Err(SemanticError::BadPooling(other)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = SemanticError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            _ => Err(SemanticError::Service(format!("unknown pooling {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding {
    pub fragment_id: String,
    pub vector: Vec<f32>,
    pub pooling: Pooling,
}

impl SemanticEmbedding {
    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|x| x.is_finite())
    }
}

fn check_vector(id: &str, vector: &[f32], dim: usize) -> Result<(), SemanticError> {
    if vector.len() != dim {
        return Err(SemanticError::InvalidVector {
            id: id.to_string(),
            reason: format!("length {} != dimension {dim}", vector.len()),
        });
    }
    if let Some(i) = vector.iter().position(|x| !x.is_finite()) {
        return Err(SemanticError::InvalidVector {
            id: id.to_string(),
            reason: format!("component {i} is not finite"),
        });
    }
    Ok(())
}

/// In-memory, read-only view of a validated store. Safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    pooling: Pooling,
    data: Vec<u8>,
    /// fragment id -> byte offset of the first vector component
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    /// Parses and fully validates a store image.
    pub fn from_bytes(data: Vec<u8>) -> Result<Self, SemanticError> {
        if data.len() < HEADER_LEN {
            return Err(SemanticError::ShortHeader(data.len()));
        }
        let magic: [u8; 4] = data[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(SemanticError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(SemanticError::BadVersion(version));
        }
        let dim = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
        let pooling = Pooling::from_code(data[12])?;

        let mut index = HashMap::new();
        let mut pos = HEADER_LEN;
        while pos < data.len() {
            let start = pos;
            let corrupt = |reason: &str| SemanticError::Corrupt {
                offset: start,
                reason: reason.to_string(),
            };
            if data.len() - pos < 2 {
                return Err(corrupt("truncated id length"));
            }
            let id_len = u16::from_le_bytes([data[pos], data[pos + 1]]) as usize;
            let body_len = 2 + id_len + 4 * dim;
            if data.len() - start < body_len + 4 {
                return Err(corrupt("truncated record"));
            }
            let body = &data[start..start + body_len];
            let stored = u32::from_le_bytes(data[start + body_len..start + body_len + 4].try_into().unwrap());
            if crc32fast::hash(body) != stored {
                return Err(corrupt("checksum mismatch"));
            }
            let id = std::str::from_utf8(&body[2..2 + id_len])
                .map_err(|_| corrupt("fragment id is not UTF-8"))?
                .to_string();
            let vec_off = start + 2 + id_len;
            if let Some(i) = (0..dim).find(|&i| !read_f32(&data, vec_off + 4 * i).is_finite()) {
                return Err(SemanticError::InvalidVector {
                    id,
                    reason: format!("component {i} is not finite"),
                });
            }
            if index.insert(id.clone(), vec_off).is_some() {
                return Err(SemanticError::DuplicateId { id, offset: start });
            }
            pos = start + body_len + 4;
        }
        Ok(Self {
            dim,
            pooling,
            data,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, fragment_id: &str) -> bool {
        self.index.contains_key(fragment_id)
    }

    /// Fragment ids in sorted order.
    pub fn ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.index.keys().map(String::as_str).collect();
        ids.sort_unstable();
        ids
    }

    pub fn get(&self, fragment_id: &str) -> Result<SemanticEmbedding, SemanticError> {
        let &off = self
            .index
            .get(fragment_id)
            .ok_or_else(|| SemanticError::NotFound(fragment_id.to_string()))?;
        Ok(SemanticEmbedding {
            fragment_id: fragment_id.to_string(),
            vector: (0..self.dim).map(|i| read_f32(&self.data, off + 4 * i)).collect(),
            pooling: self.pooling,
        })
    }
}

fn read_f32(data: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(data[at..at + 4].try_into().unwrap())
}

pub fn open_store(path: &Path) -> Result<EmbeddingStore, SemanticError> {
    EmbeddingStore::from_bytes(std::fs::read(path)?)
}

/// Opens a store and checks its declared dimension.
pub fn open_store_with_dim(path: &Path, expected: usize) -> Result<EmbeddingStore, SemanticError> {
    let store = open_store(path)?;
    if store.dim() != expected {
        return Err(SemanticError::DimensionMismatch {
            expected,
            found: store.dim(),
        });
    }
    Ok(store)
}

/// Serializes records into a store image. Rejects duplicate ids, wrong
/// lengths and non-finite components.
pub fn encode_store<'a, I>(dim: usize, pooling: Pooling, records: I) -> Result<Vec<u8>, SemanticError>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.push(pooling.code());
    let mut seen = std::collections::HashSet::new();
    for (id, vector) in records {
        check_vector(id, vector, dim)?;
        let id_len = u16::try_from(id.len()).map_err(|_| SemanticError::InvalidVector {
            id: id.to_string(),
            reason: "fragment id longer than 65535 bytes".into(),
        })?;
        if !seen.insert(id) {
            return Err(SemanticError::DuplicateId {
                id: id.to_string(),
                offset: out.len(),
            });
        }
        let start = out.len();
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

pub fn write_store<'a, I>(path: &Path, dim: usize, pooling: Pooling, records: I) -> Result<(), SemanticError>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let bytes = encode_store(dim, pooling, records)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// JSON-lines interchange row for embeddings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingRecord {
    pub fragment_id: String,
    pub vector: Vec<f32>,
}

/// Reads `{"fragment_id","vector"}` rows; every vector must have the same
/// length.
pub fn read_embedding_jsonl(path: &Path) -> Result<(usize, Vec<EmbeddingRecord>), SemanticError> {
    let rows: Vec<EmbeddingRecord> = crate::jsonl::read(path).map_err(|e| match e {
        crate::jsonl::JsonlError::Parse { path, line, source } => SemanticError::Jsonl {
            path,
            line,
            message: source.to_string(),
        },
        crate::jsonl::JsonlError::Io { source, .. } => SemanticError::Io(source),
    })?;
    let dim = rows.first().map_or(0, |r| r.vector.len());
    for r in &rows {
        check_vector(&r.fragment_id, &r.vector, dim)?;
    }
    Ok((dim, rows))
}

/// The fusion input `h_sem` for a pair: `[left ‖ right]`.
pub fn pair_semantic_input(left: &SemanticEmbedding, right: &SemanticEmbedding) -> Result<Vec<f32>, SemanticError> {
    if left.vector.len() != right.vector.len() {
        return Err(SemanticError::DimensionMismatch {
            expected: left.vector.len(),
            found: right.vector.len(),
        });
    }
    let mut out = Vec::with_capacity(2 * left.vector.len());
    out.extend_from_slice(&left.vector);
    out.extend_from_slice(&right.vector);
    Ok(out)
}

/// Request body of the embedder service's `POST /embed`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedRequest {
    pub source: String,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedResponse {
    pub vector: Vec<f32>,
}

/// Response of `GET /health`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HealthResponse {
    pub dim: usize,
}

/// Blocking client for a running embedder service.
pub struct EmbedderClient {
    base_url: String,
    agent: ureq::Agent,
}

impl EmbedderClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(60)))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: config.into(),
        }
    }

    pub fn health(&self) -> Result<HealthResponse, SemanticError> {
        let mut resp = self
            .agent
            .get(&format!("{}/health", self.base_url))
            .call()
            .map_err(|e| SemanticError::Service(e.to_string()))?;
        if resp.status() != 200 {
            return Err(SemanticError::Service(format!("GET /health returned {}", resp.status())));
        }
        resp.body_mut()
            .read_json()
            .map_err(|e| SemanticError::Service(e.to_string()))
    }

    /// Embeds one source string; the returned vector must have `dim` finite
    /// components.
    pub fn embed(&self, source: &str, pooling: Pooling, dim: usize) -> Result<Vec<f32>, SemanticError> {
        let mut resp = self
            .agent
            .post(&format!("{}/embed", self.base_url))
            .send_json(EmbedRequest {
                source: source.to_string(),
                pooling,
            })
            .map_err(|e| SemanticError::Service(e.to_string()))?;
        if resp.status() != 200 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(SemanticError::Service(format!("POST /embed returned {}: {body}", resp.status())));
        }
        let parsed: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| SemanticError::Service(e.to_string()))?;
        check_vector("<request>", &parsed.vector, dim)?;
        Ok(parsed.vector)
    }
}
