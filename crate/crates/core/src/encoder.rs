//! ViT-style encoder forward pass: patch embedding and pre-norm transformer
//! layers, exposing per-layer attention scores and key projections so the
//! compression stages can hook any layer's output.

use std::time::Instant;

use serde::Serialize;

use crate::archive::{EncoderConfig, TensorArchive};
use crate::compressor::{
    compress_stage, CompressOptions, CompressionSchedule, GuidanceSource, RetentionRecord,
};
use crate::error::{Error, Result};
use crate::guidance::GuidanceVector;
use crate::ppm::PpmImage;
use crate::tensor::{gelu, layer_norm, matmul, softmax_rows, Matrix};

/// Activation rows for the current token set: CLS at row 0, one row per
/// surviving patch. `origins[i]` is the original patch index of row `i+1`;
/// `layer` counts encoder layers applied so far (0 = embedding output).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Matrix,
    pub origins: Vec<usize>,
    pub layer: usize,
}

impl TokenMatrix {
    /// Patch tokens currently alive (CLS excluded).
    pub fn patch_count(&self) -> usize {
        self.origins.len()
    }
}

/// Per-head Q/K/V projections of one layer, each `(count+1)×head_dim`.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// Per-head attention scores plus their arithmetic mean across heads.
/// Every row of every head is a probability distribution.
#[derive(Debug, Clone)]
pub struct AttentionTensor {
    pub per_head: Vec<Matrix>,
    pub head_mean: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationSummary {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

impl CorrelationSummary {
    pub fn of(scores: &[f32]) -> Self {
        let min = scores.iter().copied().fold(f32::INFINITY, f32::min);
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mean = (scores.iter().map(|&v| v as f64).sum::<f64>() / scores.len() as f64) as f32;
        Self { min, max, mean }
    }
}

#[derive(Debug, Clone)]
pub struct EncodeStats {
    /// Patch tokens output by each layer (CLS excluded).
    pub per_layer_tokens: Vec<usize>,
    /// One `(layer, summary)` entry per compression stage, in stage order.
    pub correlations: Vec<(usize, CorrelationSummary)>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub tokens: TokenMatrix,
    pub records: Vec<RetentionRecord>,
    pub stats: EncodeStats,
}

/// Read-only view over weights + config that runs the forward pass.
pub struct Encoder<'a> {
    weights: &'a TensorArchive,
    config: EncoderConfig,
}

impl<'a> Encoder<'a> {
    pub fn new(weights: &'a TensorArchive, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { weights, config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn tensor(&self, name: &str, rows: usize, cols: usize) -> Result<&Matrix> {
        let m = self.weights.require(name)?;
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::Validation(format!(
                "tensor '{name}' is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }

    /// Embed an image: non-overlapping patches in raster order, flattened
    /// with interleaved RGB and pixel values scaled to [0,1], linearly
    /// mapped to the encoder width; CLS prepended; position embeddings
    /// added. The image must match the configured size exactly.
    pub fn patch_embed(&self, image: &PpmImage) -> Result<TokenMatrix> {
        let s = self.config.image_size;
        if image.width != s || image.height != s {
            return Err(Error::Validation(format!(
                "image must be exactly {s}x{s}, got {}x{} (no implicit resize)",
                image.width, image.height
            )));
        }
        let p = self.config.patch_size;
        let grid = self.config.grid();
        let n = self.config.token_count();
        let d = self.config.dim;
        let flat = 3 * p * p;
        let weight = self.tensor("patch.weight", flat, d)?;
        let pos = self.tensor("patch.pos", n + 1, d)?;
        let cls = self.tensor("patch.cls", 1, d)?;

        let mut patches = Vec::with_capacity(n * flat);
        for idx in 0..n {
            let (pr, pc) = (idx / grid, idx % grid);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..3 {
                        let v = image.channel(pc * p + px, pr * p + py, ch);
                        patches.push(v as f32 / 255.0);
                    }
                }
            }
        }
        let embedded = matmul(&Matrix::new(n, flat, patches)?, weight)?;

        let mut tokens = Matrix::zeros(n + 1, d);
        for (t, (&c, &p0)) in tokens.row_mut(0).iter_mut().zip(cls.row(0).iter().zip(pos.row(0))) {
            *t = c + p0;
        }
        for i in 0..n {
            let row = embedded.row(i);
            let pos_row = pos.row(i + 1);
            for (c, t) in tokens.row_mut(i + 1).iter_mut().enumerate() {
                *t = row[c] + pos_row[c];
            }
        }
        Ok(TokenMatrix {
            tokens,
            origins: (0..n).collect(),
            layer: 0,
        })
    }

    /// Multi-head self-attention over (already normalized) token rows:
    /// per-head scaled-dot-product scores, per-head mixing, concatenation,
    /// output projection. Returns the projections, the score tensor, and
    /// the projected output.
    pub fn attention_forward(
        &self,
        tokens: &Matrix,
        layer: usize,
    ) -> Result<(AttentionProjections, AttentionTensor, Matrix)> {
        let d = self.config.dim;
        if tokens.cols() != d {
            return Err(Error::Shape(format!(
                "tokens are {}x{}, encoder width is {d}",
                tokens.rows(),
                tokens.cols()
            )));
        }
        let wq = self.tensor(&format!("layers.{layer}.attn.wq"), d, d)?;
        let wk = self.tensor(&format!("layers.{layer}.attn.wk"), d, d)?;
        let wv = self.tensor(&format!("layers.{layer}.attn.wv"), d, d)?;
        let wo = self.tensor(&format!("layers.{layer}.attn.wo"), d, d)?;

        let q = matmul(tokens, wq)?;
        let k = matmul(tokens, wk)?;
        let v = matmul(tokens, wv)?;

        let heads = self.config.heads;
        let head_dim = self.config.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let count = tokens.rows();

        let mut q_heads = Vec::with_capacity(heads);
        let mut k_heads = Vec::with_capacity(heads);
        let mut v_heads = Vec::with_capacity(heads);
        let mut a_heads = Vec::with_capacity(heads);
        let mut mixed = Vec::with_capacity(heads);
        let mut mean_acc = vec![0.0f64; count * count];
        for h in 0..heads {
            let q_h = q.col_block(h * head_dim, head_dim)?;
            let k_h = k.col_block(h * head_dim, head_dim)?;
            let v_h = v.col_block(h * head_dim, head_dim)?;
            let logits = matmul(&q_h, &k_h.transposed())?;
            let a_h = softmax_rows(&logits, scale);
            for (acc, &a) in mean_acc.iter_mut().zip(a_h.data()) {
                *acc += a as f64;
            }
            mixed.push(matmul(&a_h, &v_h)?);
            q_heads.push(q_h);
            k_heads.push(k_h);
            v_heads.push(v_h);
            a_heads.push(a_h);
        }
        let head_mean = Matrix::new(
            count,
            count,
            mean_acc.iter().map(|&v| (v / heads as f64) as f32).collect(),
        )?;
        let post = matmul(&Matrix::hconcat(&mixed)?, wo)?;
        Ok((
            AttentionProjections {
                q: q_heads,
                k: k_heads,
                v: v_heads,
            },
            AttentionTensor {
                per_head: a_heads,
                head_mean,
            },
            post,
        ))
    }

    fn layer_norm_rows(&self, tokens: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<Matrix> {
        let mut data = Vec::with_capacity(tokens.rows() * tokens.cols());
        for r in 0..tokens.rows() {
            data.extend(layer_norm(tokens.row(r), gamma.row(0), beta.row(0), self.config.eps)?);
        }
        Matrix::new(tokens.rows(), tokens.cols(), data)
    }

    /// One pre-norm transformer block:
    /// `x ← x + attn(LN1(x))`, then `x ← x + W2·gelu(W1·LN2(x))`.
    /// The returned K projections come from this layer's normalized input,
    /// which is what correlation scoring consumes.
    pub fn layer_forward(
        &self,
        z: &TokenMatrix,
        layer: usize,
    ) -> Result<(TokenMatrix, AttentionTensor, AttentionProjections)> {
        let d = self.config.dim;
        if layer >= self.config.layers {
            return Err(Error::Validation(format!(
                "layer {layer} out of range for a {}-layer encoder",
                self.config.layers
            )));
        }
        let ln1_g = self.tensor(&format!("layers.{layer}.ln1.gamma"), 1, d)?;
        let ln1_b = self.tensor(&format!("layers.{layer}.ln1.beta"), 1, d)?;
        let normed = self.layer_norm_rows(&z.tokens, ln1_g, ln1_b)?;
        let (projections, attention, post_attn) = self.attention_forward(&normed, layer)?;
        let x1 = z.tokens.add(&post_attn)?;

        let ln2_g = self.tensor(&format!("layers.{layer}.ln2.gamma"), 1, d)?;
        let ln2_b = self.tensor(&format!("layers.{layer}.ln2.beta"), 1, d)?;
        let w1 = self.tensor(&format!("layers.{layer}.ffn.w1"), d, self.config.ffn_dim)?;
        let w2 = self.tensor(&format!("layers.{layer}.ffn.w2"), self.config.ffn_dim, d)?;
        let normed2 = self.layer_norm_rows(&x1, ln2_g, ln2_b)?;
        let hidden = matmul(&normed2, w1)?.map(gelu);
        let out = x1.add(&matmul(&hidden, w2)?)?;

        Ok((
            TokenMatrix {
                tokens: out,
                origins: z.origins.clone(),
                layer: layer + 1,
            },
            attention,
            projections,
        ))
    }

    /// Run all layers in order, compressing at each scheduled layer's output.
    /// `guidance` carries one query per stage (question mode) and must be
    /// absent in image-CLS mode; inconsistencies fail before any compute.
    pub fn encode(
        &self,
        z0: &TokenMatrix,
        guidance: Option<&[GuidanceVector]>,
        schedule: &CompressionSchedule,
        options: &CompressOptions,
    ) -> Result<EncodeOutput> {
        schedule.validate_for(&self.config)?;
        if z0.patch_count() != schedule.initial {
            return Err(Error::Validation(format!(
                "input has {} patch tokens but the schedule starts at {}",
                z0.patch_count(),
                schedule.initial
            )));
        }
        match options.source {
            GuidanceSource::Question => {
                let vectors = if schedule.stages.is_empty() {
                    guidance.unwrap_or(&[])
                } else {
                    guidance.ok_or_else(|| {
                        Error::Validation("question-guided schedule needs guidance vectors".into())
                    })?
                };
                if vectors.len() != schedule.stages.len() {
                    return Err(Error::Validation(format!(
                        "{} guidance vectors for {} stages",
                        vectors.len(),
                        schedule.stages.len()
                    )));
                }
                for (g, stage) in vectors.iter().zip(&schedule.stages) {
                    if g.layer != stage.layer {
                        return Err(Error::Validation(format!(
                            "guidance vector for layer {} paired with stage at layer {}",
                            g.layer, stage.layer
                        )));
                    }
                    if g.values.len() != self.config.dim {
                        return Err(Error::Validation(format!(
                            "guidance vector for layer {} has {} dims, encoder width is {}",
                            g.layer,
                            g.values.len(),
                            self.config.dim
                        )));
                    }
                }
            }
            GuidanceSource::ImageCls => {
                if guidance.is_some_and(|g| !g.is_empty()) {
                    return Err(Error::Validation(
                        "guidance vectors are not used with the image-cls source".into(),
                    ));
                }
            }
        }

        let start = Instant::now();
        let mut cur = z0.clone();
        let mut per_layer_tokens = Vec::with_capacity(self.config.layers);
        let mut records = Vec::new();
        let mut correlations = Vec::new();
        let mut stage_idx = 0usize;
        for layer in 0..self.config.layers {
            let (mut out, attention, projections) = self.layer_forward(&cur, layer)?;
            if let Some(keep) = schedule.keep_at(layer) {
                let query = match options.source {
                    GuidanceSource::Question => guidance.map(|g| &g[stage_idx]),
                    GuidanceSource::ImageCls => None,
                };
                let (compressed, record, corr) = compress_stage(
                    &out,
                    &attention,
                    &projections,
                    query,
                    keep,
                    layer,
                    options,
                    &self.config,
                )?;
                out = compressed;
                records.push(record);
                correlations.push((layer, CorrelationSummary::of(&corr.scores)));
                stage_idx += 1;
            }
            per_layer_tokens.push(out.patch_count());
            cur = out;
        }
        Ok(EncodeOutput {
            tokens: cur,
            records,
            stats: EncodeStats {
                per_layer_tokens,
                correlations,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            },
        })
    }
}
