//! Named-tensor checkpoints and their on-disk container.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! [0..8)        u64 header length H
//! [8..8+H)      UTF-8 JSON header
//! [8+H..)       raw tensor payloads, lexicographic name order, contiguous
//! ```
//!
//! The header maps every tensor name to
//! `{"dtype": "f32"|"f64", "shape": [...], "data_offsets": [begin, end]}`
//! and carries a reserved `"__metadata__"` string map. Offsets are relative
//! to the first payload byte.
//!
//! Loading validates the entire header against the real file length before
//! any payload byte is read or any payload buffer is allocated.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const METADATA_KEY: &str = "__metadata__";

/// Upper bound on the JSON header; anything larger is treated as corrupt.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {name:?}: data offsets [{begin}, {end}) out of bounds (payload is {payload_len} bytes)")]
    OutOfBounds { name: String, begin: u64, end: u64, payload_len: u64 },
    #[error("tensor {name:?}: unknown dtype {dtype:?}")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor {name:?}: non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("tensor {name:?}: data length {len} does not match shape {shape:?}")]
    ShapeMismatch { name: String, shape: Vec<usize>, len: usize },
    #[error("tensor name sets differ: {0}")]
    NameSetMismatch(String),
    #[error("tensor {name:?}: incompatible layout {left} vs {right}")]
    LayoutMismatch { name: String, left: String, right: String },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

/// A dense row-major tensor. An empty shape denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if element_count(&shape) != data.len() {
            return Err(CheckpointError::ShapeMismatch { name: String::new(), len: data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn scalar_f32(value: f32) -> Self {
        Self { shape: Vec::new(), data: TensorData::F32(vec![value]) }
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = element_count(&shape);
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
        };
        Self { shape, data }
    }

    /// Builds a tensor of `dtype` from f64 values, rounding when narrowing.
    pub fn from_f64_values(shape: Vec<usize>, dtype: DType, values: Vec<f64>) -> Result<Self> {
        let data = match dtype {
            DType::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
            DType::F64 => TensorData::F64(values),
        };
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Element `i` widened to f64.
    pub fn get(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        match &self.data {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype().size_of()
    }

    pub fn write_le_bytes(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.write_le_bytes(&mut out);
        out
    }

    fn from_le_bytes(shape: Vec<usize>, dtype: DType, bytes: &[u8]) -> Self {
        let data = match dtype {
            DType::F32 => {
                TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
            }
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect(),
            ),
        };
        Self { shape, data }
    }

    fn layout(&self) -> String {
        format!("{}{:?}", self.dtype(), self.shape)
    }
}

/// An ordered map of named tensors plus free-form string metadata.
///
/// Iteration is lexicographic by tensor name, which is also the order used
/// for payload layout, hashing and every merge reduction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a checkpoint from a list, rejecting duplicate or invalid names.
    pub fn from_tensors<I, S>(tensors: I) -> Result<Self>
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

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.tensors.contains_key(&name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing tensor or inserts a new one.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over (name, dtype, shape, payload bytes) in lexicographic
    /// name order, hex encoded. Metadata does not participate.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update(tensor.dtype().as_str().as_bytes());
            hasher.update((tensor.shape.len() as u64).to_le_bytes());
            for &d in &tensor.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            hasher.update(tensor.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, tensor) in &self.tensors {
            if let Some(index) = tensor.first_non_finite() {
                return Err(CheckpointError::NonFinite { name: name.clone(), index });
            }
        }
        Ok(())
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name == METADATA_KEY {
        return Err(CheckpointError::InvalidName(name.to_string()));
    }
    Ok(())
}

/// Options shared by [`save_checkpoint_with`] and [`load_checkpoint_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct IoOptions {
    pub allow_nonfinite: bool,
}

/// Serializes a checkpoint to the container byte layout.
pub fn encode_checkpoint(ckpt: &Checkpoint, opts: IoOptions) -> Result<Vec<u8>> {
    if !opts.allow_nonfinite {
        ckpt.check_finite()?;
    }
    let mut header = Map::new();
    let mut offset = 0u64;
    for (name, tensor) in &ckpt.tensors {
        let end = offset + tensor.byte_len() as u64;
        header.insert(
            name.clone(),
            json!({
                "dtype": tensor.dtype().as_str(),
                "shape": tensor.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    header.insert(METADATA_KEY.to_string(), serde_json::to_value(&ckpt.metadata).expect("string map serializes"));
    let header_bytes =
        serde_json::to_vec(&Value::Object(header)).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for tensor in ckpt.tensors.values() {
        tensor.write_le_bytes(&mut out);
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with(ckpt, path, IoOptions::default())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint_with(ckpt: &Checkpoint, path: impl AsRef<Path>, opts: IoOptions) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt, opts)?;
    let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let file = File::create(&tmp).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header object kept as an ordered list so duplicate keys can be detected.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;
        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }
        deserializer.deserialize_map(HeaderVisitor)
    }
}

struct PlannedTensor {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

struct ParsedHeader {
    tensors: Vec<PlannedTensor>,
    metadata: BTreeMap<String, String>,
}

fn parse_header(bytes: &[u8], payload_len: u64) -> Result<ParsedHeader> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CheckpointError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let raw: RawHeader = serde_json::from_str(text).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;

    let mut seen = std::collections::BTreeSet::new();
    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::new();
    for (name, value) in raw.0 {
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| CheckpointError::MalformedHeader(format!("bad {METADATA_KEY}: {e}")))?;
            continue;
        }
        validate_name(&name)?;
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| CheckpointError::MalformedHeader(format!("tensor {name:?}: {e}")))?;
        let dtype = DType::parse(&entry.dtype)
            .ok_or_else(|| CheckpointError::UnknownDtype { name: name.clone(), dtype: entry.dtype.clone() })?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > payload_len {
            return Err(CheckpointError::OutOfBounds { name, begin, end, payload_len });
        }
        let expected = entry.shape.iter().try_fold(dtype.size_of() as u64, |acc, &d| acc.checked_mul(d as u64));
        if expected != Some(end - begin) {
            return Err(CheckpointError::ShapeMismatch {
                len: ((end - begin) / dtype.size_of() as u64) as usize,
                name,
                shape: entry.shape,
            });
        }
        tensors.push(PlannedTensor { name, dtype, shape: entry.shape, begin, end });
    }

    // Payloads must tile the data region exactly, in name order.
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    let mut cursor = 0u64;
    for t in &tensors {
        if t.begin != cursor {
            return Err(CheckpointError::MalformedHeader(format!(
                "tensor {:?} starts at {} but previous payload ends at {}",
                t.name, t.begin, cursor
            )));
        }
        cursor = t.end;
    }
    if cursor != payload_len {
        return Err(CheckpointError::MalformedHeader(format!(
            "payloads cover {cursor} bytes but data region is {payload_len} bytes"
        )));
    }
    Ok(ParsedHeader { tensors, metadata })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    load_checkpoint_with(path, IoOptions::default())
}

/// Loads a checkpoint, reading tensor payloads one at a time.
pub fn load_checkpoint_with(path: impl AsRef<Path>, opts: IoOptions) -> Result<Checkpoint> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut file = File::open(path).map_err(io_err)?;
    let file_len = file.metadata().map_err(io_err)?.len();
    if file_len < 8 {
        return Err(CheckpointError::MalformedHeader(format!(
            "file is {file_len} bytes, shorter than the length prefix"
        )));
    }
    let mut prefix = [0u8; 8];
    file.read_exact(&mut prefix).map_err(io_err)?;
    let header_len = u64::from_le_bytes(prefix);
    if header_len > MAX_HEADER_LEN || header_len > file_len - 8 {
        return Err(CheckpointError::MalformedHeader(format!(
            "declared header length {header_len} exceeds file length {file_len}"
        )));
    }
    let mut header = vec![0u8; header_len as usize];
    file.read_exact(&mut header).map_err(io_err)?;
    let payload_len = file_len - 8 - header_len;
    let parsed = parse_header(&header, payload_len)?;

    let data_start = 8 + header_len;
    let mut ckpt = Checkpoint { tensors: BTreeMap::new(), metadata: parsed.metadata };
    let mut buf = Vec::new();
    for t in parsed.tensors {
        buf.resize((t.end - t.begin) as usize, 0);
        file.seek(SeekFrom::Start(data_start + t.begin)).map_err(io_err)?;
        file.read_exact(&mut buf).map_err(io_err)?;
        let tensor = Tensor::from_le_bytes(t.shape, t.dtype, &buf);
        if !opts.allow_nonfinite {
            if let Some(index) = tensor.first_non_finite() {
                return Err(CheckpointError::NonFinite { name: t.name, index });
            }
        }
        ckpt.tensors.insert(t.name, tensor);
    }
    Ok(ckpt)
}

/// Succeeds iff both checkpoints have the same tensor names and, per name,
/// the same dtype and shape.
pub fn validate_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    if let Some(name) = a.names().find(|n| !b.tensors.contains_key(*n)) {
        return Err(CheckpointError::NameSetMismatch(format!("{name:?} present in the first checkpoint only")));
    }
    if let Some(name) = b.names().find(|n| !a.tensors.contains_key(*n)) {
        return Err(CheckpointError::NameSetMismatch(format!("{name:?} present in the second checkpoint only")));
    }
    for (name, ta) in &a.tensors {
        let tb = &b.tensors[name];
        if ta.dtype() != tb.dtype() || ta.shape != tb.shape {
            return Err(CheckpointError::LayoutMismatch { name: name.clone(), left: ta.layout(), right: tb.layout() });
        }
    }
    Ok(())
}
