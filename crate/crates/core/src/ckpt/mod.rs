//! Checkpoint container: an ordered map of named dense tensors plus a flat
//! string metadata table, stored as
//!
//! ```text
//! [u64 LE header length N][N bytes of JSON header][raw tensor payloads]
//! ```
//!
//! The header maps every tensor name to `{"dtype", "shape", "data_offsets"}`
//! with offsets relative to the start of the payload region. The reserved
//! key `__metadata__` holds string metadata.

mod format;
mod tensor;

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

pub use format::{from_bytes, to_bytes};
pub use tensor::{shape_numel, Dtype, Tensor};

/// Reserved header key carrying the metadata table.
pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensors `{first}` and `{second}` have overlapping data offsets")]
    OverlappingOffsets { first: String, second: String },
    #[error("tensor `{name}` ends at byte {end} but the data region holds {available} bytes")]
    TruncatedData {
        name: String,
        end: u64,
        available: u64,
    },
    #[error("tensor `{name}` has unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid tensor name `{0}`")]
    InvalidName(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
}

impl CkptError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CkptError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Named tensors with deterministic (lexicographic) iteration order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

fn check_name(name: &str) -> Result<(), CkptError> {
    if name.is_empty() || name == METADATA_KEY {
        return Err(CkptError::InvalidName(name.to_string()));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a checkpoint, rejecting duplicate or reserved names.
    pub fn from_tensors<I, S>(tensors: I) -> Result<Self, CkptError>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        let mut ckpt = Self::new();
        for (name, tensor) in tensors {
            ckpt.insert(name, tensor)?;
        }
        Ok(ckpt)
    }

    /// Adds a tensor. Fails if the name is taken or reserved.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), CkptError> {
        let name = name.into();
        check_name(&name)?;
        if self.tensors.contains_key(&name) {
            return Err(CkptError::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensor names, sorted ascending.
    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    /// Total element count across tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

pub fn tensor_names(ckpt: &Checkpoint) -> Vec<String> {
    ckpt.tensor_names()
}

/// Short identity: the `id` metadata entry if set, otherwise the first 16 hex
/// digits of the SHA-256 of the serialized file.
pub fn checkpoint_id(ckpt: &Checkpoint) -> String {
    ckpt.metadata()
        .get("id")
        .cloned()
        .unwrap_or_else(|| crate::fsutil::sha256_hex(&to_bytes(ckpt))[..16].to_string())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CkptError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CkptError::io(path, e))?;
    from_bytes(&bytes)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so the path never holds a partial file.
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CkptError> {
    let path = path.as_ref();
    let bytes = to_bytes(ckpt);
    crate::fsutil::write_atomic(path, &bytes).map_err(|e| CkptError::io(path, e))
}
