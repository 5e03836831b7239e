//! Question-side guidance: a deterministic toy text embedder (or a file
//! import for externally computed embeddings), projection into the vision
//! feature space, and per-layer query construction.

use std::path::Path;

use crate::archive::{SplitMix64, TensorArchive};
use crate::error::{Error, Result};
use crate::tensor::{gelu, matmul, Matrix};

/// Default text-embedding width. The synthetic `guide.mlp.w1` is generated
/// with this many input rows.
pub const D_TEXT: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Toy,
    Imported,
}

/// L2-normalized text embedding of the user's question.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub values: Vec<f32>,
    pub source: EmbeddingSource,
}

/// A question query in the query space of one encoder layer (`values` has
/// the encoder width; each compression stage carries its own).
#[derive(Debug, Clone)]
pub struct GuidanceVector {
    pub values: Vec<f32>,
    pub layer: usize,
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn l2_normalize(values: &[f64]) -> Result<Vec<f32>> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Validation("cannot normalize a zero embedding".into()));
    }
    Ok(values.iter().map(|v| (v / norm) as f32).collect())
}

/// Deterministic stand-in for a real text encoder. The question is
/// lowercased and split on whitespace; each token's FNV-1a 64-bit hash
/// (mixed with `seed`) seeds a splitmix64 stream that emits a `d_text`
/// vector in [-1, 1); token vectors are averaged and L2-normalized.
pub fn toy_text_embed(question: &str, d_text: usize, seed: u64) -> Result<TextEmbedding> {
    let trimmed = question.trim();
    if trimmed.is_empty() {
        return Err(Error::Validation("question is empty".into()));
    }
    if d_text == 0 {
        return Err(Error::Validation("d_text must be positive".into()));
    }
    let lowered = trimmed.to_lowercase();
    let tokens: Vec<&str> = lowered.split_whitespace().collect();
    let mut sum = vec![0.0f64; d_text];
    for token in &tokens {
        let mut rng = SplitMix64::new(fnv1a64(token) ^ seed);
        for s in sum.iter_mut() {
            *s += rng.next_range_f32(-1.0, 1.0) as f64;
        }
    }
    let count = tokens.len() as f64;
    for s in sum.iter_mut() {
        *s /= count;
    }
    Ok(TextEmbedding {
        values: l2_normalize(&sum)?,
        source: EmbeddingSource::Toy,
    })
}

/// Import a precomputed text-CLS embedding from a QGVT archive holding a
/// `text.cls` tensor of shape 1×d_text. The vector is L2-normalized.
pub fn load_text_embedding(path: impl AsRef<Path>) -> Result<TextEmbedding> {
    let archive = TensorArchive::load(path)?;
    text_embedding_from_archive(&archive)
}

pub fn text_embedding_from_archive(archive: &TensorArchive) -> Result<TextEmbedding> {
    let t = archive.require("text.cls")?;
    if t.rows() != 1 || t.cols() == 0 {
        return Err(Error::Validation(format!(
            "tensor 'text.cls' must be a 1×d_text row, got {}x{}",
            t.rows(),
            t.cols()
        )));
    }
    let as_f64: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    Ok(TextEmbedding {
        values: l2_normalize(&as_f64)?,
        source: EmbeddingSource::Imported,
    })
}

/// Align a text embedding to the vision feature space through the guidance
/// MLP: `v = gelu(t·W1)·W2` with `guide.mlp.w1` (d_text×d) and
/// `guide.mlp.w2` (d×d).
pub fn project_to_vision(t: &TextEmbedding, weights: &TensorArchive) -> Result<Vec<f32>> {
    let w1 = weights.require("guide.mlp.w1")?;
    let w2 = weights.require("guide.mlp.w2")?;
    if w1.rows() != t.values.len() {
        return Err(Error::Shape(format!(
            "text embedding has {} dims but guide.mlp.w1 is {}x{}",
            t.values.len(),
            w1.rows(),
            w1.cols()
        )));
    }
    if w2.rows() != w1.cols() {
        return Err(Error::Shape(format!(
            "guide.mlp.w1 is {}x{} but guide.mlp.w2 is {}x{}",
            w1.rows(),
            w1.cols(),
            w2.rows(),
            w2.cols()
        )));
    }
    let row = Matrix::new(1, t.values.len(), t.values.clone())?;
    let hidden = matmul(&row, w1)?.map(gelu);
    let out = matmul(&hidden, w2)?;
    Ok(out.data().to_vec())
}

/// Project the vision-space guidance vector into the query space of one
/// encoder layer: `query = v · Wq` with that layer's `attn.wq`.
pub fn make_query(v: &[f32], layer: usize, weights: &TensorArchive) -> Result<GuidanceVector> {
    let name = format!("layers.{layer}.attn.wq");
    let wq = weights
        .get(&name)
        .ok_or_else(|| Error::Validation(format!("layer {layer} out of range: missing tensor '{name}'")))?;
    if wq.rows() != v.len() {
        return Err(Error::Shape(format!(
            "guidance vector has {} dims but {name} is {}x{}",
            v.len(),
            wq.rows(),
            wq.cols()
        )));
    }
    let row = Matrix::new(1, v.len(), v.to_vec())?;
    let q = matmul(&row, wq)?;
    Ok(GuidanceVector {
        values: q.data().to_vec(),
        layer,
    })
}
