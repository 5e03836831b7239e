//! Token compression stage: correlation scoring of patch tokens against the
//! question query, top-n/bottom-m partition, attention-weighted recycling of
//! the dropped tokens, and schedule construction.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::archive::EncoderConfig;
use crate::encoder::{AttentionProjections, AttentionTensor, TokenMatrix};
use crate::error::{Error, Result};
use crate::guidance::GuidanceVector;
use crate::tensor::{dot_f64, softmax_slice, Matrix};

/// What produces the selection scores at a compression stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceSource {
    /// Projected question embedding scored against the layer's keys.
    Question,
    /// The image's own CLS attention row (no question involved).
    ImageCls,
}

#[derive(Debug, Clone, Copy)]
pub struct CompressOptions {
    pub source: GuidanceSource,
    /// When false, dropped tokens are discarded instead of being folded back
    /// into the retained ones (pure pruning).
    pub recycle: bool,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            source: GuidanceSource::Question,
            recycle: true,
        }
    }
}

/// Softmax-normalized relevance of each patch token (CLS excluded) at one
/// compression layer. Scores are non-negative and sum to 1.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationVector {
    pub scores: Vec<f32>,
    pub layer: usize,
}

/// Which origins survived a compression stage and which were folded away.
/// Both lists are sorted ascending by origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RetentionRecord {
    pub layer: usize,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

impl RetentionRecord {
    pub fn keep_count(&self) -> usize {
        self.kept.len()
    }

    pub fn drop_count(&self) -> usize {
        self.dropped.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub layer: usize,
    pub keep: usize,
}

/// Ordered compression stages: at each listed layer's output, patch tokens
/// are reduced to the stage's keep count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompressionSchedule {
    pub initial: usize,
    #[serde(rename = "final")]
    pub target: usize,
    pub stages: Vec<Stage>,
}

impl CompressionSchedule {
    /// The no-compression schedule.
    pub fn identity(initial: usize) -> Self {
        Self {
            initial,
            target: initial,
            stages: Vec::new(),
        }
    }

    pub fn from_stages(initial: usize, stages: Vec<Stage>) -> Result<Self> {
        let target = stages.last().map_or(initial, |s| s.keep);
        let schedule = Self {
            initial,
            target,
            stages,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial == 0 {
            return Err(Error::Validation("initial token count must be positive".into()));
        }
        if self.stages.is_empty() {
            if self.target != self.initial {
                return Err(Error::Validation(
                    "empty schedule must keep the initial token count".into(),
                ));
            }
            return Ok(());
        }
        let mut prev_keep = self.initial;
        let mut prev_layer: Option<usize> = None;
        for stage in &self.stages {
            if let Some(pl) = prev_layer {
                if stage.layer <= pl {
                    return Err(Error::Validation(format!(
                        "stage layers must be strictly increasing: {pl} then {}",
                        stage.layer
                    )));
                }
            }
            if stage.keep == 0 || stage.keep >= prev_keep {
                return Err(Error::Validation(format!(
                    "keep counts must be strictly decreasing and ≥ 1: {prev_keep} then {}",
                    stage.keep
                )));
            }
            prev_layer = Some(stage.layer);
            prev_keep = stage.keep;
        }
        if self.target != prev_keep {
            return Err(Error::Validation(format!(
                "schedule target {} does not match last keep {prev_keep}",
                self.target
            )));
        }
        Ok(())
    }

    /// Check the schedule against an encoder configuration.
    pub fn validate_for(&self, config: &EncoderConfig) -> Result<()> {
        self.validate()?;
        if self.initial != config.token_count() {
            return Err(Error::Validation(format!(
                "schedule starts at {} tokens but the encoder produces {}",
                self.initial,
                config.token_count()
            )));
        }
        if let Some(stage) = self.stages.iter().find(|s| s.layer >= config.layers) {
            return Err(Error::Validation(format!(
                "stage layer {} out of range for a {}-layer encoder",
                stage.layer, config.layers
            )));
        }
        Ok(())
    }

    pub fn keep_at(&self, layer: usize) -> Option<usize> {
        self.stages.iter().find(|s| s.layer == layer).map(|s| s.keep)
    }
}

/// Build a schedule from `n` down to `m` across the given layers with a
/// uniform step; when `(n-m)` is not divisible by the stage count, each of
/// the first `r` stages absorbs one extra dropped token.
pub fn build_schedule(n: usize, m: usize, layers: &[usize]) -> Result<CompressionSchedule> {
    if layers.is_empty() {
        return Err(Error::Validation("schedule needs at least one layer".into()));
    }
    if m == 0 || m >= n {
        return Err(Error::Validation(format!(
            "target must satisfy 1 ≤ M < N, got M={m}, N={n}"
        )));
    }
    if !layers.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Validation("schedule layers must be strictly increasing".into()));
    }
    let drop_total = n - m;
    if drop_total < layers.len() {
        return Err(Error::Validation(format!(
            "cannot drop {drop_total} tokens over {} stages with strictly decreasing keeps",
            layers.len()
        )));
    }
    let step = drop_total / layers.len();
    let remainder = drop_total % layers.len();
    let mut cur = n;
    let stages = layers
        .iter()
        .enumerate()
        .map(|(i, &layer)| {
            cur -= step + usize::from(i < remainder);
            Stage { layer, keep: cur }
        })
        .collect();
    CompressionSchedule::from_stages(n, stages)
}

/// Correlation scores of the question query against this layer's keys
/// (CLS key excluded): per-head scaled dot products, averaged across heads,
/// then one softmax.
pub fn correlation(
    query: &GuidanceVector,
    projections: &AttentionProjections,
    config: &EncoderConfig,
) -> Result<CorrelationVector> {
    let d = config.dim;
    let head_dim = config.head_dim();
    if query.values.len() != d {
        return Err(Error::Shape(format!(
            "query has {} dims, encoder width is {d}",
            query.values.len()
        )));
    }
    if projections.k.len() != config.heads {
        return Err(Error::Shape(format!(
            "projections carry {} heads, config says {}",
            projections.k.len(),
            config.heads
        )));
    }
    let n = projections.k[0].rows() - 1;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut logits = vec![0.0f64; n];
    for (h, k_h) in projections.k.iter().enumerate() {
        let q_h = &query.values[h * head_dim..(h + 1) * head_dim];
        for (j, logit) in logits.iter_mut().enumerate() {
            *logit += dot_f64(q_h, k_h.row(j + 1)) * scale;
        }
    }
    let heads = config.heads as f64;
    for logit in logits.iter_mut() {
        *logit /= heads;
    }
    let mut scores = vec![0.0f32; n];
    softmax_slice(&logits, &mut scores);
    Ok(CorrelationVector {
        scores,
        layer: query.layer,
    })
}

/// Split the current origins into the `keep` best-scoring ones and the rest.
/// Ties break toward the lower origin index; CLS is never scored and is
/// always retained implicitly.
pub fn partition(c: &CorrelationVector, keep: usize, origins: &[usize]) -> Result<RetentionRecord> {
    if c.scores.len() != origins.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} origins",
            c.scores.len(),
            origins.len()
        )));
    }
    if keep == 0 || keep > origins.len() {
        return Err(Error::Validation(format!(
            "keep must be in 1..={}, got {keep}",
            origins.len()
        )));
    }
    let mut order: Vec<usize> = (0..origins.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        c.scores[b]
            .total_cmp(&c.scores[a])
            .then_with(|| origins[a].cmp(&origins[b]))
    });
    let mut kept: Vec<usize> = order[..keep].iter().map(|&i| origins[i]).collect();
    let mut dropped: Vec<usize> = order[keep..].iter().map(|&i| origins[i]).collect();
    kept.sort_unstable();
    dropped.sort_unstable();
    Ok(RetentionRecord {
        layer: c.layer,
        kept,
        dropped,
    })
}

fn origin_rows(tokens: &TokenMatrix, origins: &[usize]) -> Result<Vec<usize>> {
    let by_origin: BTreeMap<usize, usize> = tokens
        .origins
        .iter()
        .enumerate()
        .map(|(row, &o)| (o, row + 1))
        .collect();
    origins
        .iter()
        .map(|o| {
            by_origin
                .get(o)
                .copied()
                .ok_or_else(|| Error::Validation(format!("origin {o} not present in token matrix")))
        })
        .collect()
}

/// Fold the dropped tokens back into the retained ones (CLS included):
/// `token_i ← token_i + Σ_j A(i,j)·token_j` over the dropped `j`, using the
/// head-mean attention of the stage's layer. Per element the sum accumulates
/// in f64 over dropped rows in ascending row order, starting from `token_i`,
/// and rounds to f32 once. Dropped rows are then removed.
pub fn recycle(tokens: &TokenMatrix, a_mean: &Matrix, rec: &RetentionRecord) -> Result<TokenMatrix> {
    let total = tokens.patch_count() + 1;
    if a_mean.rows() != total || a_mean.cols() != total {
        return Err(Error::Shape(format!(
            "attention is {}x{} for {total} tokens",
            a_mean.rows(),
            a_mean.cols()
        )));
    }
    validate_partition_covers(tokens, rec)?;
    let dropped_rows = origin_rows(tokens, &rec.dropped)?;
    let cols = tokens.tokens.cols();

    let retained_rows = retained_row_indices(tokens, rec)?;
    let mut data = Vec::with_capacity(retained_rows.len() * cols);
    for &i in &retained_rows {
        let base = tokens.tokens.row(i);
        let mut acc: Vec<f64> = base.iter().map(|&v| v as f64).collect();
        for &j in &dropped_rows {
            let w = a_mean.get(i, j) as f64;
            for (a, &t) in acc.iter_mut().zip(tokens.tokens.row(j)) {
                *a += w * t as f64;
            }
        }
        data.extend(acc.iter().map(|&v| v as f32));
    }
    let origins = retained_rows[1..].iter().map(|&r| tokens.origins[r - 1]).collect();
    Ok(TokenMatrix {
        tokens: Matrix::new(retained_rows.len(), cols, data)?,
        origins,
        layer: tokens.layer,
    })
}

/// Row indices to retain: CLS plus the kept patch rows, in current row order.
fn retained_row_indices(tokens: &TokenMatrix, rec: &RetentionRecord) -> Result<Vec<usize>> {
    let kept: std::collections::BTreeSet<usize> = rec.kept.iter().copied().collect();
    let mut rows = Vec::with_capacity(rec.kept.len() + 1);
    rows.push(0);
    for (idx, origin) in tokens.origins.iter().enumerate() {
        if kept.contains(origin) {
            rows.push(idx + 1);
        }
    }
    if rows.len() != rec.kept.len() + 1 {
        return Err(Error::Validation("kept origins missing from token matrix".into()));
    }
    Ok(rows)
}

fn validate_partition_covers(tokens: &TokenMatrix, rec: &RetentionRecord) -> Result<()> {
    let mut combined: Vec<usize> = rec.kept.iter().chain(&rec.dropped).copied().collect();
    combined.sort_unstable();
    let mut current: Vec<usize> = tokens.origins.clone();
    current.sort_unstable();
    if combined != current {
        return Err(Error::Validation(
            "retention record does not partition the current origins".into(),
        ));
    }
    Ok(())
}

/// Keep only CLS and the kept patch rows; pure pruning, no recycling.
fn prune(tokens: &TokenMatrix, rec: &RetentionRecord) -> Result<TokenMatrix> {
    let rows = retained_row_indices(tokens, rec)?;
    let cols = tokens.tokens.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in &rows {
        data.extend_from_slice(tokens.tokens.row(r));
    }
    let origins = rows[1..].iter().map(|&r| tokens.origins[r - 1]).collect();
    Ok(TokenMatrix {
        tokens: Matrix::new(rows.len(), cols, data)?,
        origins,
        layer: tokens.layer,
    })
}

/// One full compression stage at `layer`: score (question query or CLS
/// attention row), partition to `keep` survivors, then recycle or prune.
#[allow(clippy::too_many_arguments)]
pub fn compress_stage(
    tokens: &TokenMatrix,
    attention: &AttentionTensor,
    projections: &AttentionProjections,
    query: Option<&GuidanceVector>,
    keep: usize,
    layer: usize,
    options: &CompressOptions,
    config: &EncoderConfig,
) -> Result<(TokenMatrix, RetentionRecord, CorrelationVector)> {
    let scores = match options.source {
        GuidanceSource::Question => {
            let query = query.ok_or_else(|| {
                Error::Validation("question-guided compression requires a guidance vector".into())
            })?;
            let mut c = correlation(query, projections, config)?;
            c.layer = layer;
            c
        }
        GuidanceSource::ImageCls => cls_attention_scores(attention, layer)?,
    };
    let record = partition(&scores, keep, &tokens.origins)?;
    let compressed = if record.dropped.is_empty() {
        prune(tokens, &record)?
    } else if options.recycle {
        recycle(tokens, &attention.head_mean, &record)?
    } else {
        prune(tokens, &record)?
    };
    Ok((compressed, record, scores))
}

/// Selection scores for the unguided ablation: the head-mean attention row
/// of CLS over the patch columns, renormalized to sum to 1.
fn cls_attention_scores(attention: &AttentionTensor, layer: usize) -> Result<CorrelationVector> {
    let row = attention.head_mean.row(0);
    if row.len() < 2 {
        return Err(Error::Shape("attention has no patch columns".into()));
    }
    let patch = &row[1..];
    let sum: f64 = patch.iter().map(|&v| v as f64).sum();
    if sum <= 0.0 {
        return Err(Error::Validation("CLS attention row sums to zero over patches".into()));
    }
    Ok(CorrelationVector {
        scores: patch.iter().map(|&v| (v as f64 / sum) as f32).collect(),
        layer,
    })
}
