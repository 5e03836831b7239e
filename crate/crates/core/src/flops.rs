//! Analytic compute model for the encoder and the surrounding pipeline.
//!
//! Per-layer cost uses the standard transformer estimate
//! `4nd² + 2n²d + 2nd·ffn` in exact integer arithmetic. A layer is costed at
//! its input token count: a compression layer processes its full input and
//! emits the reduced count, so the reduction shows up from the next layer
//! on. Token counts exclude CLS throughout.

use serde::Serialize;

use crate::archive::EncoderConfig;
use crate::compressor::CompressionSchedule;
use crate::error::{Error, Result};
use crate::guidance::D_TEXT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub tokens: usize,
    pub flops: u64,
}

/// Extra work the question guidance adds, by source: the text-to-vision MLP,
/// one query projection per stage, and the correlation logits per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GuidanceBreakdown {
    pub mlp_projection: u64,
    pub query_projections: u64,
    pub correlation_logits: u64,
}

/// Encoder compute accounting for one schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerCost>,
    pub encoder_total: u64,
    pub baseline_total: u64,
    /// `(encoder_total + guidance_overhead) / baseline_total`.
    pub ratio: f64,
    pub guidance_overhead: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance_breakdown: Option<GuidanceBreakdown>,
}

impl FlopsReport {
    pub fn ratio_percent(&self) -> f64 {
        self.ratio * 100.0
    }
}

/// Language-model side of the pipeline estimate (prefill only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LlmConfig {
    pub layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub text_tokens: usize,
}

impl LlmConfig {
    /// 7B-class decoder defaults with a short question.
    pub fn llama_7b_like() -> Self {
        Self {
            layers: 32,
            dim: 4096,
            ffn_dim: 11008,
            text_tokens: 60,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Validation("llm layers/dim/ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

/// `4nd² + 2n²d + 2nd·ffn`, exact.
pub fn layer_flops(n: usize, d: usize, ffn: usize) -> Result<u64> {
    if n == 0 || d == 0 || ffn == 0 {
        return Err(Error::Validation(format!(
            "layer_flops needs positive counts, got n={n}, d={d}, ffn={ffn}"
        )));
    }
    let (n, d, ffn) = (n as u128, d as u128, ffn as u128);
    let total = 4 * n * d * d + 2 * n * n * d + 2 * n * d * ffn;
    u64::try_from(total).map_err(|_| Error::Validation("flops exceed u64 range".into()))
}

/// Cost every layer at its input token count, walking the schedule, and
/// report the ratio against the uncompressed encoder. When `guided`, the
/// question-guidance overhead (computed from this crate's actual operation
/// shapes) is itemized and added to the ratio's numerator.
pub fn encoder_ratio(
    schedule: &CompressionSchedule,
    config: &EncoderConfig,
    guided: bool,
) -> Result<FlopsReport> {
    config.validate()?;
    schedule.validate_for(config)?;
    let d = config.dim;
    let ffn = config.ffn_dim;
    let n0 = config.token_count();

    let mut per_layer = Vec::with_capacity(config.layers);
    let mut encoder_total = 0u64;
    let mut stage_inputs = Vec::with_capacity(schedule.stages.len());
    let mut current = n0;
    for layer in 0..config.layers {
        let flops = layer_flops(current, d, ffn)?;
        per_layer.push(LayerCost {
            layer,
            tokens: current,
            flops,
        });
        encoder_total = encoder_total
            .checked_add(flops)
            .ok_or_else(|| Error::Validation("flops exceed u64 range".into()))?;
        if let Some(keep) = schedule.keep_at(layer) {
            stage_inputs.push(current);
            current = keep;
        }
    }
    let baseline_total = layer_flops(n0, d, ffn)? * config.layers as u64;

    let (guidance_overhead, guidance_breakdown) = if guided {
        let mlp_projection = 2 * (D_TEXT as u64) * d as u64 + 2 * (d as u64) * d as u64;
        let query_projections = schedule.stages.len() as u64 * 2 * (d as u64) * d as u64;
        let correlation_logits: u64 = stage_inputs.iter().map(|&n| 2 * n as u64 * d as u64).sum();
        let breakdown = GuidanceBreakdown {
            mlp_projection,
            query_projections,
            correlation_logits,
        };
        (
            mlp_projection + query_projections + correlation_logits,
            Some(breakdown),
        )
    } else {
        (0, None)
    };

    Ok(FlopsReport {
        per_layer,
        encoder_total,
        baseline_total,
        ratio: (encoder_total + guidance_overhead) as f64 / baseline_total as f64,
        guidance_overhead,
        guidance_breakdown,
    })
}

/// Whole-pipeline prefill estimate: compressed encoder (guidance overhead
/// included), the vision projector (`2·v·d·dim_llm`), and the LLM prefill
/// over `visual + text` tokens. No decode steps are modeled.
pub fn pipeline_estimate(
    visual_tokens: usize,
    encoder_report: &FlopsReport,
    config: &EncoderConfig,
    llm: &LlmConfig,
) -> Result<u64> {
    llm.validate()?;
    let encoder = encoder_report.encoder_total + encoder_report.guidance_overhead;
    if visual_tokens == 0 && llm.text_tokens == 0 {
        return Ok(encoder);
    }
    let projector = 2 * visual_tokens as u64 * config.dim as u64 * llm.dim as u64;
    let prefill =
        llm.layers as u64 * layer_flops(visual_tokens + llm.text_tokens, llm.dim, llm.ffn_dim)?;
    encoder
        .checked_add(projector)
        .and_then(|v| v.checked_add(prefill))
        .ok_or_else(|| Error::Validation("flops exceed u64 range".into()))
}
