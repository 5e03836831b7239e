//! Tensor archive ("QGVT") file format, encoder configuration presets, and
//! the deterministic synthetic-weights generator.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..4    magic "QGVT"
//! bytes 4..8    format version, u32 (currently 1)
//! bytes 8..16   header length H, u64
//! bytes 16..16+H  UTF-8 JSON header
//! bytes 16+H..  payload: contiguous f32 tensor data
//! ```
//!
//! The header maps each tensor name to `{"shape": [rows, cols], "offset": o,
//! "len": l}` where `offset`/`len` are byte positions relative to the payload
//! start. The reserved key `"__metadata__"` holds a string→string map.
//! Tensors are laid out in ascending name order, so identical archives
//! serialize to identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::guidance::D_TEXT;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"QGVT";
const VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";

/// splitmix64 state update: returns `(output, next_state)` for `state`.
pub fn splitmix64_next(state: u64) -> (u64, u64) {
    let next = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = next;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31), next)
}

/// splitmix64 stream (Vigna's reference update). Non-cryptographic; used for
/// every reproducible pseudo-random draw in the crate.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let (value, next) = splitmix64_next(self.state);
        self.state = next;
        value
    }

    /// Uniform f64 in [0, 1) from the top 53 bits.
    pub fn next_unit_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 / DEN
    }

    /// Uniform f32 in `[lo, hi)`: computes `lo + (hi - lo)·u` in f64 and
    /// rounds once to f32. That final rounding can land on or above `hi`;
    /// such draws are clamped to the largest f32 below `hi` so the interval
    /// stays half-open.
    pub fn next_range_f32(&mut self, lo: f64, hi: f64) -> f32 {
        let u = self.next_unit_f64();
        let v = (lo + (hi - lo) * u) as f32;
        if (v as f64) < hi {
            v
        } else {
            largest_f32_below(hi)
        }
    }
}

fn largest_f32_below(x: f64) -> f32 {
    let rounded = x as f32;
    if (rounded as f64) < x {
        rounded
    } else {
        f32::from_bits(rounded.to_bits() - 1)
    }
}

/// Vision-encoder hyperparameters. `token_count` is derived, not stored:
/// `(image_size / patch_size)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub eps: f32,
}

impl EncoderConfig {
    /// CLIP-style ViT-L/14 at 336×336: 24 layers, width 1024, 16 heads,
    /// FFN 4096, 576 patch tokens.
    pub fn vit_l_14() -> Self {
        Self {
            layers: 24,
            dim: 1024,
            heads: 16,
            ffn_dim: 4096,
            patch_size: 14,
            image_size: 336,
            eps: 1e-5,
        }
    }

    /// Small preset for fast end-to-end runs: same 576-token geometry,
    /// narrow width.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            patch_size: 14,
            image_size: 336,
            eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vit-l-14" => Some(Self::vit_l_14()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.dim == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.patch_size == 0
            || self.image_size == 0
        {
            return Err(Error::Validation("config fields must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Validation(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::Validation("eps must be positive".into()));
        }
        Ok(())
    }

    /// Patches per side of the image grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens N (CLS excluded).
    pub fn token_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Reconstruct a config from archive metadata written by `gen_synthetic`.
    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Validation(format!("archive metadata missing '{key}'")))
        };
        let eps: f32 = meta
            .get("eps")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Validation("archive metadata missing 'eps'".into()))?;
        let config = Self {
            layers: get("layers")?,
            dim: get("dim")?,
            heads: get("heads")?,
            ffn_dim: get("ffn_dim")?,
            patch_size: get("patch_size")?,
            image_size: get("image_size")?,
            eps,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Named tensor collection plus string metadata. Immutable once built except
/// through `insert`, which enforces name uniqueness and finiteness.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, Matrix>,
    metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Matrix) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate tensor name '{name}'")));
        }
        if !tensor.all_finite() {
            return Err(Error::Validation(format!("tensor '{name}' has non-finite values")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    /// Like `get`, but a missing tensor is a validation error naming it.
    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Total payload bytes (4 per f32 element).
    pub fn payload_bytes(&self) -> u64 {
        self.entries
            .values()
            .map(|m| (m.rows() * m.cols() * 4) as u64)
            .sum()
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&self.metadata).expect("string map serializes"),
        );
        let mut offset = 0u64;
        for (name, m) in &self.entries {
            let len = (m.rows() * m.cols() * 4) as u64;
            header.insert(
                name.clone(),
                serde_json::json!({ "shape": [m.rows(), m.cols()], "offset": offset, "len": len }),
            );
            offset += len;
        }
        serde_json::to_vec(&serde_json::Value::Object(header)).expect("header serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = self.header_bytes();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for m in self.entries.values() {
            for &v in m.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_bytes();
        let mut out =
            Vec::with_capacity(16 + header.len() + self.payload_bytes() as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.entries.values() {
            for &v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("file shorter than the 16-byte preamble".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic (expected \"QGVT\")".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .ok_or_else(|| Error::Corruption("header length overflows".into()))?;
        if payload_start > bytes.len() {
            return Err(Error::Corruption(format!(
                "header claims {header_len} bytes but only {} remain",
                bytes.len() - 16
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("duplicate tensor name") {
                Error::Validation(msg)
            } else {
                Error::Format(format!("header is not valid JSON: {msg}"))
            }
        })?;

        let payload = &bytes[payload_start..];
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        let mut archive = TensorArchive {
            entries: BTreeMap::new(),
            metadata: header.metadata,
        };
        for (name, entry) in &header.tensors {
            let expected = (entry.shape[0] as u64)
                .checked_mul(entry.shape[1] as u64)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Corruption(format!("tensor '{name}' shape overflows")))?;
            if expected != entry.len {
                return Err(Error::Corruption(format!(
                    "tensor '{name}' declares {} bytes but shape {}x{} implies {expected}",
                    entry.len, entry.shape[0], entry.shape[1]
                )));
            }
            let end = entry.offset.checked_add(entry.len).ok_or_else(|| {
                Error::Corruption(format!("tensor '{name}' region overflows"))
            })?;
            if end > payload.len() as u64 {
                return Err(Error::Corruption(format!(
                    "tensor '{name}' region {}..{end} exceeds payload of {} bytes",
                    entry.offset,
                    payload.len()
                )));
            }
            spans.push((entry.offset, end, name));
        }
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Corruption(format!(
                    "tensor '{}' overlaps tensor '{}'",
                    pair[1].2, pair[0].2
                )));
            }
        }
        for (name, entry) in header.tensors {
            let start = entry.offset as usize;
            let raw = &payload[start..start + entry.len as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corruption(format!(
                    "tensor '{name}' contains non-finite values"
                )));
            }
            let m = Matrix::new(entry.shape[0], entry.shape[1], data)?;
            archive.entries.insert(name, m);
        }
        Ok(archive)
    }
}

#[derive(Debug, Deserialize)]
struct HeaderEntry {
    shape: [usize; 2],
    offset: u64,
    len: u64,
}

struct Header {
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, HeaderEntry>,
}

// Manual Deserialize so duplicate tensor names are rejected instead of being
// silently collapsed by the JSON map representation.
impl<'de> Deserialize<'de> for Header {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = Header;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("archive header object")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Header, A::Error> {
                let mut metadata = BTreeMap::new();
                let mut tensors: BTreeMap<String, HeaderEntry> = BTreeMap::new();
                while let Some(key) = map.next_key::<String>()? {
                    if key == METADATA_KEY {
                        metadata = map.next_value()?;
                    } else {
                        let entry: HeaderEntry = map.next_value()?;
                        if tensors.insert(key.clone(), entry).is_some() {
                            return Err(serde::de::Error::custom(format!(
                                "duplicate tensor name '{key}'"
                            )));
                        }
                    }
                }
                Ok(Header { metadata, tensors })
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

/// Canonical tensor names and shapes the encoder, guidance MLP, and patch
/// embedding require for a config.
pub fn canonical_tensor_shapes(config: &EncoderConfig) -> BTreeMap<String, (usize, usize)> {
    let d = config.dim;
    let mut shapes = BTreeMap::new();
    shapes.insert("patch.weight".into(), (3 * config.patch_size * config.patch_size, d));
    shapes.insert("patch.pos".into(), (config.token_count() + 1, d));
    shapes.insert("patch.cls".into(), (1, d));
    shapes.insert("guide.mlp.w1".into(), (D_TEXT, d));
    shapes.insert("guide.mlp.w2".into(), (d, d));
    for i in 0..config.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            shapes.insert(format!("layers.{i}.attn.{w}"), (d, d));
        }
        for ln in ["ln1", "ln2"] {
            shapes.insert(format!("layers.{i}.{ln}.gamma"), (1, d));
            shapes.insert(format!("layers.{i}.{ln}.beta"), (1, d));
        }
        shapes.insert(format!("layers.{i}.ffn.w1"), (d, config.ffn_dim));
        shapes.insert(format!("layers.{i}.ffn.w2"), (config.ffn_dim, d));
    }
    shapes
}

/// Deterministic synthetic weights: one splitmix64 stream seeded with `seed`
/// fills every canonical tensor in ascending name order, each value uniform
/// in [-0.1, 0.1). The archive is a pure function of `(seed, config)`.
pub fn gen_synthetic(seed: u64, config: &EncoderConfig) -> Result<TensorArchive> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut archive = TensorArchive::new();
    for (name, (rows, cols)) in canonical_tensor_shapes(config) {
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| rng.next_range_f32(-0.1, 0.1))
            .collect();
        archive.insert(name, Matrix::new(rows, cols, data)?)?;
    }
    let meta = archive.metadata_mut();
    meta.insert("seed".into(), seed.to_string());
    meta.insert("layers".into(), config.layers.to_string());
    meta.insert("dim".into(), config.dim.to_string());
    meta.insert("heads".into(), config.heads.to_string());
    meta.insert("ffn_dim".into(), config.ffn_dim.to_string());
    meta.insert("patch_size".into(), config.patch_size.to_string());
    meta.insert("image_size".into(), config.image_size.to_string());
    meta.insert("eps".into(), config.eps.to_string());
    Ok(archive)
}
