//! On-disk formats and the in-memory fixed-context store.
//!
//! Tensors travel as a two-file pair: a JSON header describing shapes and a
//! raw little-endian f32 blob. The blob holds the keys tensor, then values,
//! then (optionally) per-head calibration queries, each laid out
//! `layer, head, token, dim`.
//!
//! Indexes persist in a little-endian binary format: the 8-byte magic
//! `SQZIDX1\0`, the four u32 dimensions (layers, heads, head_dim, seq_len),
//! then per (layer, head) entry: a u32 level count followed by each level
//! coarsest-first as u32 cluster count, f32 centroids (c*d), u32 sizes, u32
//! key weights, per-cluster u32 member count + u32 member ids, and — on
//! every level but the first — u32 parent ids. Loading re-validates all
//! structural invariants.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterIndex, HeadIndex, HierarchicalIndex};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const INDEX_MAGIC: &[u8; 8] = b"SQZIDX1\0";
pub const TENSOR_LAYOUT: &str = "layer,head,token,dim";

/// JSON header for the tensor file pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub dtype: String,
    pub layout: String,
    pub tensors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_window: Option<usize>,
}

/// The fixed context: per-(layer, head) key and value matrices, plus
/// optional per-head calibration query matrices. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyStore {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    calib_queries: Option<Vec<Matrix>>,
    calib_window: usize,
}

impl KeyStore {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        seq_len: usize,
        keys: Vec<Matrix>,
        values: Vec<Matrix>,
        calib_queries: Option<Vec<Matrix>>,
        calib_window: usize,
    ) -> Result<Self> {
        if num_layers == 0 || num_heads == 0 || head_dim == 0 || seq_len == 0 {
            return Err(Error::Config(
                "num_layers, num_heads, head_dim, seq_len must all be at least 1".into(),
            ));
        }
        let heads_total = num_layers * num_heads;
        for (name, set, rows) in [
            ("keys", Some(&keys), seq_len),
            ("values", Some(&values), seq_len),
            ("calib_queries", calib_queries.as_ref(), calib_window),
        ] {
            let Some(set) = set else { continue };
            if set.len() != heads_total {
                return Err(Error::Dimension(format!(
                    "{name}: {} matrices, expected {heads_total}",
                    set.len()
                )));
            }
            if let Some(m) = set
                .iter()
                .find(|m| m.rows() != rows || m.cols() != head_dim)
            {
                return Err(Error::Dimension(format!(
                    "{name}: matrix is {}x{}, expected {rows}x{head_dim}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if calib_queries.is_some() && calib_window == 0 {
            return Err(Error::Config(
                "calib_window must be at least 1 when calibration queries are present".into(),
            ));
        }
        Ok(Self {
            num_layers,
            num_heads,
            head_dim,
            seq_len,
            keys,
            values,
            calib_queries,
            calib_window,
        })
    }

    pub fn heads_total(&self) -> usize {
        self.num_layers * self.num_heads
    }

    pub fn keys(&self, layer: usize, head: usize) -> &Matrix {
        &self.keys[layer * self.num_heads + head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &Matrix {
        &self.values[layer * self.num_heads + head]
    }

    pub fn keys_flat(&self, head_idx: usize) -> &Matrix {
        &self.keys[head_idx]
    }

    pub fn values_flat(&self, head_idx: usize) -> &Matrix {
        &self.values[head_idx]
    }

    pub fn calib_window(&self) -> usize {
        self.calib_window
    }

    pub fn calib_queries(&self, layer: usize, head: usize) -> Option<&Matrix> {
        self.calib_queries
            .as_ref()
            .map(|q| &q[layer * self.num_heads + head])
    }

    pub fn calib_queries_flat(&self, head_idx: usize) -> Option<&Matrix> {
        self.calib_queries.as_ref().map(|q| &q[head_idx])
    }

    pub fn has_calib_queries(&self) -> bool {
        self.calib_queries.is_some()
    }

    pub fn header(&self) -> TensorHeader {
        let mut tensors = vec!["keys".to_string(), "values".to_string()];
        if self.calib_queries.is_some() {
            tensors.push("calib_queries".to_string());
        }
        TensorHeader {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            seq_len: self.seq_len,
            dtype: "f32".into(),
            layout: TENSOR_LAYOUT.into(),
            tensors,
            calib_window: self.calib_queries.as_ref().map(|_| self.calib_window),
        }
    }
}

fn f32s_to_bytes(buf: &mut Vec<u8>, vals: &[f32]) {
    buf.reserve(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn validate_header(h: &TensorHeader) -> Result<()> {
    if h.dtype != "f32" {
        return Err(Error::Format(format!(
            "unsupported dtype `{}` (only \"f32\")",
            h.dtype
        )));
    }
    if h.layout != TENSOR_LAYOUT {
        return Err(Error::Format(format!(
            "unsupported layout `{}` (only \"{TENSOR_LAYOUT}\")",
            h.layout
        )));
    }
    let names: Vec<&str> = h.tensors.iter().map(String::as_str).collect();
    match names.as_slice() {
        ["keys", "values"] => {
            if h.calib_window.is_some() {
                return Err(Error::Format(
                    "calib_window set but tensors has no calib_queries entry".into(),
                ));
            }
        }
        ["keys", "values", "calib_queries"] => {
            if h.calib_window.is_none() {
                return Err(Error::Format(
                    "tensors lists calib_queries but calib_window is missing".into(),
                ));
            }
        }
        _ => {
            return Err(Error::Format(format!(
                "tensors must be [keys, values] or [keys, values, calib_queries], got {names:?}"
            )));
        }
    }
    Ok(())
}

pub fn load_tensors(header_path: &Path, blob_path: &Path) -> Result<KeyStore> {
    let header: TensorHeader = serde_json::from_slice(&fs::read(header_path)?)?;
    validate_header(&header)?;
    let heads_total = header.num_layers * header.num_heads;
    let per_head = header.seq_len * header.head_dim;
    let window = header.calib_window.unwrap_or(0);
    let expected_floats = heads_total * (2 * per_head + window * header.head_dim);

    let blob = fs::read(blob_path)?;
    if blob.len() != expected_floats * 4 {
        return Err(Error::Format(format!(
            "blob is {} bytes, header implies {}",
            blob.len(),
            expected_floats * 4
        )));
    }
    let floats = bytes_to_f32s(&blob);

    let mut offset = 0usize;
    let mut take = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        let n = rows * cols;
        let m = Matrix::new(rows, cols, floats[offset..offset + n].to_vec())
            .map_err(|e| Error::Format(format!("{name} tensor: {e}")))?;
        offset += n;
        Ok(m)
    };

    let mut keys = Vec::with_capacity(heads_total);
    for _ in 0..heads_total {
        keys.push(take("keys", header.seq_len, header.head_dim)?);
    }
    let mut values = Vec::with_capacity(heads_total);
    for _ in 0..heads_total {
        values.push(take("values", header.seq_len, header.head_dim)?);
    }
    let calib = if window > 0 {
        let mut qs = Vec::with_capacity(heads_total);
        for _ in 0..heads_total {
            qs.push(take("calib_queries", window, header.head_dim)?);
        }
        Some(qs)
    } else {
        None
    };

    KeyStore::new(
        header.num_layers,
        header.num_heads,
        header.head_dim,
        header.seq_len,
        keys,
        values,
        calib,
        window,
    )
}

pub fn save_tensors(store: &KeyStore, header_path: &Path, blob_path: &Path) -> Result<()> {
    let header = store.header();
    fs::write(header_path, serde_json::to_string_pretty(&header)?)?;

    let mut blob = Vec::new();
    for m in &store.keys {
        f32s_to_bytes(&mut blob, m.data());
    }
    for m in &store.values {
        f32s_to_bytes(&mut blob, m.data());
    }
    if let Some(qs) = &store.calib_queries {
        for m in qs {
            f32s_to_bytes(&mut blob, m.data());
        }
    }
    fs::write(blob_path, blob)?;
    Ok(())
}

fn encode_index(index: &HierarchicalIndex) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INDEX_MAGIC);
    for dim in [
        index.num_layers,
        index.num_heads,
        index.head_dim,
        index.seq_len,
    ] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for head in &index.heads {
        buf.extend_from_slice(&(head.levels.len() as u32).to_le_bytes());
        for (lv, level) in head.levels.iter().enumerate() {
            buf.extend_from_slice(&(level.num_clusters() as u32).to_le_bytes());
            f32s_to_bytes(&mut buf, level.centroids.data());
            for &s in &level.sizes {
                buf.extend_from_slice(&s.to_le_bytes());
            }
            for &w in &level.key_weights {
                buf.extend_from_slice(&w.to_le_bytes());
            }
            for m in &level.members {
                buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
                for &i in m {
                    buf.extend_from_slice(&i.to_le_bytes());
                }
            }
            if lv > 0 {
                let parents = level.parents.as_ref().expect("validated index");
                for &p in parents {
                    buf.extend_from_slice(&p.to_le_bytes());
                }
            }
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "index file truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(bytes_to_f32s(self.take(n * 4)?))
    }
}

pub fn save_index(index: &HierarchicalIndex, path: &Path) -> Result<()> {
    index.validate()?;
    fs::write(path, encode_index(index))?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<HierarchicalIndex> {
    let buf = fs::read(path)?;
    decode_index(&buf)
}

fn decode_index(buf: &[u8]) -> Result<HierarchicalIndex> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8)?;
    if magic != INDEX_MAGIC {
        return Err(Error::Format(format!(
            "bad index magic {magic:?}, expected {INDEX_MAGIC:?}"
        )));
    }
    let num_layers = r.u32()? as usize;
    let num_heads = r.u32()? as usize;
    let head_dim = r.u32()? as usize;
    let seq_len = r.u32()? as usize;

    let heads_total = num_layers
        .checked_mul(num_heads)
        .filter(|&n| n > 0 && n <= 1 << 24)
        .ok_or_else(|| Error::Format("implausible layer/head counts".into()))?;

    let mut heads = Vec::with_capacity(heads_total);
    for _ in 0..heads_total {
        let level_count = r.u32()? as usize;
        if level_count == 0 || level_count > 64 {
            return Err(Error::Format(format!(
                "implausible level count {level_count}"
            )));
        }
        let mut levels = Vec::with_capacity(level_count);
        for lv in 0..level_count {
            let c = r.u32()? as usize;
            if c == 0 || c > seq_len.max(1) {
                return Err(Error::Format(format!("implausible cluster count {c}")));
            }
            let centroids = Matrix::new(c, head_dim, r.f32s(c * head_dim)?)
                .map_err(|e| Error::Invariant(format!("centroids: {e}")))?;
            let sizes = r.u32s(c)?;
            let key_weights = r.u32s(c)?;
            let mut members = Vec::with_capacity(c);
            for _ in 0..c {
                let len = r.u32()? as usize;
                members.push(r.u32s(len)?);
            }
            let parents = if lv > 0 { Some(r.u32s(c)?) } else { None };
            levels.push(ClusterIndex {
                centroids,
                sizes,
                key_weights,
                members,
                parents,
            });
        }
        heads.push(HeadIndex { levels });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "index file has {} trailing bytes",
            buf.len() - r.pos
        )));
    }

    let index = HierarchicalIndex {
        num_layers,
        num_heads,
        head_dim,
        seq_len,
        heads,
    };
    index.validate()?;
    Ok(index)
}
