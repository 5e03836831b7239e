//! One-call orchestration of a full compression run: guidance construction,
//! patch embedding, the compressed encode, compute accounting, and mask
//! rendering. The CLI and the Python bindings both drive this.

use std::time::Instant;

use crate::archive::{EncoderConfig, TensorArchive};
use crate::compressor::{CompressOptions, CompressionSchedule, GuidanceSource};
use crate::encoder::{Encoder, TokenMatrix};
use crate::error::{Error, Result};
use crate::flops::encoder_ratio;
use crate::guidance::{make_query, project_to_vision, toy_text_embed, TextEmbedding, D_TEXT};
use crate::ppm::PpmImage;
use crate::viz::{render_mask, MaskImage, RunStats, StageReport, Timings};

/// Everything a run needs beyond weights, config, and the image.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub question: Option<String>,
    /// Overrides the toy embedder when present (question mode only).
    pub imported_embedding: Option<TextEmbedding>,
    pub schedule: CompressionSchedule,
    pub options: CompressOptions,
    /// Seed for the toy text embedder.
    pub embed_seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub stats: RunStats,
    pub masks: Vec<MaskImage>,
    pub tokens: TokenMatrix,
}

pub fn run(
    weights: &TensorArchive,
    config: &EncoderConfig,
    image: &PpmImage,
    run_config: &RunConfig,
) -> Result<RunArtifacts> {
    let total_start = Instant::now();
    run_config.schedule.validate_for(config)?;

    let guidance_start = Instant::now();
    let guidance_vectors = match run_config.options.source {
        GuidanceSource::Question => {
            let embedding = match &run_config.imported_embedding {
                Some(e) => e.clone(),
                None => {
                    let question = run_config.question.as_deref().ok_or_else(|| {
                        Error::Validation(
                            "question mode needs a question or an imported embedding".into(),
                        )
                    })?;
                    toy_text_embed(question, D_TEXT, run_config.embed_seed)?
                }
            };
            let v = project_to_vision(&embedding, weights)?;
            let queries = run_config
                .schedule
                .stages
                .iter()
                .map(|s| make_query(&v, s.layer, weights))
                .collect::<Result<Vec<_>>>()?;
            Some(queries)
        }
        GuidanceSource::ImageCls => None,
    };
    let guidance_ms = guidance_start.elapsed().as_secs_f64() * 1e3;

    let encoder = Encoder::new(weights, config.clone())?;
    let embed_start = Instant::now();
    let z0 = encoder.patch_embed(image)?;
    let embed_ms = embed_start.elapsed().as_secs_f64() * 1e3;

    let out = encoder.encode(
        &z0,
        guidance_vectors.as_deref(),
        &run_config.schedule,
        &run_config.options,
    )?;

    let guided = run_config.options.source == GuidanceSource::Question;
    let flops = encoder_ratio(&run_config.schedule, config, guided)?;

    let render_start = Instant::now();
    let masks = out
        .records
        .iter()
        .map(|rec| render_mask(image, rec, config.grid()))
        .collect::<Result<Vec<_>>>()?;
    let render_ms = render_start.elapsed().as_secs_f64() * 1e3;

    let per_stage: Vec<StageReport> = out
        .records
        .iter()
        .zip(&out.stats.correlations)
        .map(|(rec, (layer, summary))| StageReport {
            layer: *layer,
            kept: rec.kept.clone(),
            correlation: *summary,
        })
        .collect();
    let stats = RunStats {
        question: run_config.question.clone(),
        guidance: match run_config.options.source {
            GuidanceSource::Question => "question".into(),
            GuidanceSource::ImageCls => "image-cls".into(),
        },
        recycle: run_config.options.recycle,
        schedule: run_config.schedule.clone(),
        per_layer_tokens: out.stats.per_layer_tokens.clone(),
        per_stage,
        final_tokens: out.tokens.patch_count(),
        flops,
        timings: Timings {
            guidance_ms,
            embed_ms,
            encode_ms: out.stats.elapsed_ms,
            render_ms,
            total_ms: total_start.elapsed().as_secs_f64() * 1e3,
        },
    };
    Ok(RunArtifacts {
        stats,
        masks,
        tokens: out.tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::gen_synthetic;
    use crate::compressor::build_schedule;
    use crate::SplitMix64;

    fn toy_image() -> PpmImage {
        let mut rng = SplitMix64::new(2);
        let pixels = (0..336 * 336 * 3).map(|_| (rng.next_u64() & 0xFF) as u8).collect();
        PpmImage::new(336, 336, pixels).unwrap()
    }

    #[test]
    fn run_produces_consistent_artifacts() {
        let config = EncoderConfig::toy();
        let weights = gen_synthetic(5, &config).unwrap();
        let schedule = build_schedule(576, 72, &[1, 2, 3]).unwrap();
        let rc = RunConfig {
            question: Some("what is written on the sign".into()),
            imported_embedding: None,
            schedule: schedule.clone(),
            options: CompressOptions::default(),
            embed_seed: 0,
        };
        let image = toy_image();
        let art = run(&weights, &config, &image, &rc).unwrap();
        assert_eq!(art.stats.final_tokens, 72);
        assert_eq!(art.masks.len(), 3);
        assert_eq!(art.stats.per_stage.len(), 3);
        assert_eq!(art.tokens.patch_count(), 72);
        // kept sets nest across stages
        for pair in art.stats.per_stage.windows(2) {
            assert!(pair[1].kept.iter().all(|o| pair[0].kept.contains(o)));
        }
        // reruns are bit-identical
        let again = run(&weights, &config, &image, &rc).unwrap();
        assert_eq!(art.tokens.tokens, again.tokens.tokens);
        assert_eq!(
            crate::viz::stats_json(&art.stats),
            crate::viz::stats_json(&again.stats)
        );
    }

    #[test]
    fn run_requires_question_material_in_question_mode() {
        let config = EncoderConfig::toy();
        let weights = gen_synthetic(6, &config).unwrap();
        let rc = RunConfig {
            question: None,
            imported_embedding: None,
            schedule: build_schedule(576, 72, &[1, 2]).unwrap(),
            options: CompressOptions::default(),
            embed_seed: 0,
        };
        let err = run(&weights, &config, &toy_image(), &rc).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
