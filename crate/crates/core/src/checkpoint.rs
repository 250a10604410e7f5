//! Model checkpoints.
//!
//! Layout: the magic line `ASKD-CKPT-v1\n`, a little-endian u64 header
//! length, a JSON header (config, tensor index, metadata), then all tensors
//! as little-endian f64 in index order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::params::{hash_values, ParamEntry};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::losses::{ClassHead, MarginConfig};

pub const MAGIC: &[u8] = b"ASKD-CKPT-v1\n";
const HEAD_TENSOR: &str = "head.weight";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `teacher` or `student`.
    pub role: String,
    pub epochs_completed: usize,
    pub final_metrics: BTreeMap<String, f64>,
    /// Parameter hash of the frozen teacher, for students.
    pub teacher_hash: Option<String>,
    /// Training configuration echo.
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub head: ClassHead,
    pub seed: u64,
    pub margin: MarginConfig,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    backbone: BackboneConfig,
    seed: u64,
    margin: MarginConfig,
    tensors: Vec<ParamEntry>,
    param_hash: String,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn param_hash(&self) -> String {
        hash_values(&self.all_values())
    }

    fn all_values(&self) -> Vec<f64> {
        let mut v = self.backbone.params.clone();
        v.extend(self.head.weights.iter());
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.backbone.layout.entries.clone();
        tensors.push(ParamEntry {
            name: HEAD_TENSOR.into(),
            shape: vec![self.head.dim(), self.head.classes()],
            offset: self.backbone.params.len(),
        });
        let values = self.all_values();
        let header = Header {
            format_version: 1,
            backbone: self.backbone.config.clone(),
            seed: self.seed,
            margin: self.margin,
            tensors,
            param_hash: hash_values(&values),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(MAGIC.len() + 8 + json.len() + values.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in &values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a checkpoint"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&rest[..hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
        if header.format_version != 1 {
            return Err(bad("unsupported format version"));
        }
        let data = &rest[hlen..];
        if data.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of f64"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if hash_values(&values) != header.param_hash {
            return Err(bad("parameter hash mismatch"));
        }
        let mut backbone = Backbone::zeroed(&header.backbone)?;
        let n = backbone.params.len();
        let head_entry = header
            .tensors
            .iter()
            .find(|t| t.name == HEAD_TENSOR)
            .ok_or_else(|| bad("missing head tensor"))?;
        if header.tensors[..header.tensors.len() - 1] != backbone.layout.entries[..]
            || head_entry.offset != n
            || head_entry.shape.len() != 2
            || values.len() != n + head_entry.len()
        {
            return Err(bad("tensor index does not match the backbone config"));
        }
        backbone.params.copy_from_slice(&values[..n]);
        let (d, c) = (head_entry.shape[0], head_entry.shape[1]);
        if d != header.backbone.embedding_dim {
            return Err(bad("head width differs from embedding_dim"));
        }
        let head = ClassHead::new(Array2::from_shape_vec((d, c), values[n..].to_vec()).unwrap());
        Ok(Self {
            backbone,
            head,
            seed: header.seed,
            margin: header.margin,
            meta: header.meta,
        })
    }
}
