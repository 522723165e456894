//! safetensors container reading and writing.
//!
//! Layout on disk: an 8-byte little-endian header length `N`, `N` bytes of
//! JSON, then the data region. Headers are written with sorted keys and
//! padded with spaces to an 8-byte boundary.

pub mod layout;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::tensor::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("file too short for a header length ({0} bytes)")]
    Truncated(usize),
    #[error("header length {declared} exceeds the {available} bytes after the length prefix")]
    HeaderLength { declared: u64, available: usize },
    #[error("header is not valid JSON: {0}")]
    Json(String),
    #[error("tensor '{tensor}': malformed entry: {reason}")]
    Entry { tensor: String, reason: String },
    #[error("tensor '{tensor}': unknown dtype '{dtype}'")]
    UnknownDtype { tensor: String, dtype: String },
    #[error("tensor '{tensor}': offsets [{start}, {end}) out of bounds for a {len}-byte data region")]
    OutOfBounds { tensor: String, start: usize, end: usize, len: usize },
    #[error("tensor '{tensor}': byte range holds {found} bytes but shape {shape:?} needs {expected}")]
    SizeMismatch { tensor: String, shape: Vec<usize>, expected: usize, found: usize },
    #[error("tensors '{first}' and '{second}' overlap")]
    Overlap { first: String, second: String },
    #[error("data region has {0} bytes not covered by any tensor")]
    Uncovered(usize),
    #[error("no tensor named '{0}'")]
    Missing(String),
    #[error("tensor '{0}' already exists")]
    Duplicate(String),
    #[error("tensor '{tensor}' has {expected} elements, got {found}")]
    ElementCount { tensor: String, expected: usize, found: usize },
    #[error("tensor '{tensor}' has rank {rank}; only 1-D and 2-D tensors convert to matrices")]
    Rank { tensor: String, rank: usize },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "F64" => DType::F64,
            "F32" => DType::F32,
            "F16" => DType::F16,
            "BF16" => DType::BF16,
            _ => return None,
        })
    }

    /// Default equivalence tolerance for weights stored at this precision.
    pub fn default_tolerance(self) -> f64 {
        match self {
            DType::F64 => 1e-10,
            DType::F32 => 1e-6,
            DType::F16 => 1e-2,
            DType::BF16 => 5e-2,
        }
    }

    /// Decodes little-endian bytes into f64 (exact for every dtype).
    pub fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            DType::BF16 => bytes
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
        }
    }

    /// Encodes f64 values with round-to-nearest-even.
    pub fn encode(self, values: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.width());
        for &v in values {
            match self {
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                DType::BF16 => out.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
            }
        }
        out
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte range within the data region.
    pub start: usize,
    pub end: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointFile {
    tensors: BTreeMap<String, TensorEntry>,
    metadata: Option<BTreeMap<String, String>>,
    data: Vec<u8>,
}

const METADATA_KEY: &str = "__metadata__";

fn entry_err(tensor: &str, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Entry {
        tensor: tensor.to_string(),
        reason: reason.into(),
    }
}

fn parse_entry(name: &str, value: &Value) -> Result<TensorEntry> {
    let obj = value.as_object().ok_or_else(|| entry_err(name, "not a JSON object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| entry_err(name, "missing string field 'dtype'"))?;
    let dtype = DType::parse(dtype_str).ok_or_else(|| CheckpointError::UnknownDtype {
        tensor: name.to_string(),
        dtype: dtype_str.to_string(),
    })?;
    let as_usizes = |field: &str| -> Result<Vec<usize>> {
        obj.get(field)
            .and_then(Value::as_array)
            .ok_or_else(|| entry_err(name, format!("missing array field '{field}'")))?
            .iter()
            .map(|v| {
                v.as_u64()
                    .map(|u| u as usize)
                    .ok_or_else(|| entry_err(name, format!("'{field}' holds a non-integer")))
            })
            .collect()
    };
    let shape = as_usizes("shape")?;
    let offsets = as_usizes("data_offsets")?;
    if offsets.len() != 2 || offsets[0] > offsets[1] {
        return Err(entry_err(name, format!("data_offsets {offsets:?} is not an ordered pair")));
    }
    Ok(TensorEntry {
        dtype,
        shape,
        start: offsets[0],
        end: offsets[1],
    })
}

impl CheckpointFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let declared = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = bytes.len() - 8;
        if declared > available as u64 {
            return Err(CheckpointError::HeaderLength { declared, available });
        }
        let header_end = 8 + declared as usize;
        let header: Value =
            serde_json::from_slice(&bytes[8..header_end]).map_err(|e| CheckpointError::Json(e.to_string()))?;
        let root = header
            .as_object()
            .ok_or_else(|| CheckpointError::Json("header root is not an object".into()))?;
        let data = bytes[header_end..].to_vec();
        let mut tensors = BTreeMap::new();
        let mut metadata = None;
        for (name, value) in root {
            if name == METADATA_KEY {
                let obj = value
                    .as_object()
                    .ok_or_else(|| entry_err(METADATA_KEY, "metadata is not an object"))?;
                let mut md = BTreeMap::new();
                for (k, v) in obj {
                    let s = v
                        .as_str()
                        .ok_or_else(|| entry_err(METADATA_KEY, format!("value of '{k}' is not a string")))?;
                    md.insert(k.clone(), s.to_string());
                }
                metadata = Some(md);
                continue;
            }
            tensors.insert(name.clone(), parse_entry(name, value)?);
        }
        let cp = Self { tensors, metadata, data };
        cp.validate()?;
        Ok(cp)
    }

    /// Checks sizes, bounds, overlap and full coverage of the data region.
    pub fn validate(&self) -> Result<()> {
        let len = self.data.len();
        for (name, e) in &self.tensors {
            if e.end > len {
                return Err(CheckpointError::OutOfBounds {
                    tensor: name.clone(),
                    start: e.start,
                    end: e.end,
                    len,
                });
            }
            let expected = e.numel() * e.dtype.width();
            if e.end - e.start != expected {
                return Err(CheckpointError::SizeMismatch {
                    tensor: name.clone(),
                    shape: e.shape.clone(),
                    expected,
                    found: e.end - e.start,
                });
            }
        }
        let ordered = self.in_data_order();
        let mut covered = 0usize;
        for pair in ordered.windows(2) {
            let ((a, ea), (b, eb)) = (pair[0], pair[1]);
            if eb.start < ea.end && eb.end > eb.start && ea.end > ea.start {
                return Err(CheckpointError::Overlap {
                    first: a.to_string(),
                    second: b.to_string(),
                });
            }
        }
        for (_, e) in &ordered {
            covered += e.end - e.start;
        }
        if covered != len {
            return Err(CheckpointError::Uncovered(len.saturating_sub(covered)));
        }
        Ok(())
    }

    fn in_data_order(&self) -> Vec<(&str, &TensorEntry)> {
        let mut v: Vec<(&str, &TensorEntry)> = self.tensors.iter().map(|(k, e)| (k.as_str(), e)).collect();
        v.sort_by_key(|(name, e)| (e.start, e.end, *name));
        v
    }

    /// Serializes with sorted header keys, keeping the data-region order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut root = Map::new();
        if let Some(md) = &self.metadata {
            let obj: Map<String, Value> = md.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
            root.insert(METADATA_KEY.to_string(), Value::Object(obj));
        }
        let mut payload = Vec::with_capacity(self.data.len());
        for (name, e) in self.in_data_order() {
            let start = payload.len();
            payload.extend_from_slice(&self.data[e.start..e.end]);
            root.insert(
                name.to_string(),
                json!({
                    "dtype": e.dtype.name(),
                    "shape": e.shape,
                    "data_offsets": [start, payload.len()],
                }),
            );
        }
        let mut header = serde_json::to_vec(&Value::Object(root)).expect("header serializes");
        while header.len() % 8 != 0 {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn raw_bytes(&self, name: &str) -> Result<&[u8]> {
        let e = self.entry(name)?;
        Ok(&self.data[e.start..e.end])
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let e = self.entry(name)?;
        Ok(e.dtype.decode(&self.data[e.start..e.end]))
    }

    /// Appends a tensor, encoding `values` into `dtype`.
    pub fn insert(&mut self, name: &str, dtype: DType, shape: &[usize], values: &[f64]) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(CheckpointError::Duplicate(name.to_string()));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(CheckpointError::ElementCount {
                tensor: name.to_string(),
                expected,
                found: values.len(),
            });
        }
        let start = self.data.len();
        self.data.extend_from_slice(&dtype.encode(values));
        self.tensors.insert(
            name.to_string(),
            TensorEntry {
                dtype,
                shape: shape.to_vec(),
                start,
                end: self.data.len(),
            },
        );
        Ok(())
    }

    /// Overwrites a tensor's values in place, re-encoding to its stored dtype.
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let e = self.entry(name)?.clone();
        if values.len() != e.numel() {
            return Err(CheckpointError::ElementCount {
                tensor: name.to_string(),
                expected: e.numel(),
                found: values.len(),
            });
        }
        self.data[e.start..e.end].copy_from_slice(&e.dtype.encode(values));
        Ok(())
    }

    /// Reads a 2-D tensor as stored, or a 1-D tensor as a row vector.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let e = self.entry(name)?;
        let (rows, cols) = match e.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(CheckpointError::Rank {
                    tensor: name.to_string(),
                    rank: other.len(),
                })
            }
        };
        Ok(Matrix::from_vec(rows, cols, self.values(name)?).expect("validated size"))
    }

    pub fn set_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.set_values(name, m.data())
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointFile> {
    CheckpointFile::from_bytes(&fs::read(path)?)
}

pub fn write_checkpoint(cp: &CheckpointFile, path: impl AsRef<Path>) -> Result<()> {
    cp.validate()?;
    fs::write(path, cp.to_bytes())?;
    Ok(())
}
