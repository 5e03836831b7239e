//! Retention-mask rendering and machine-readable run statistics.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::compressor::{CompressionSchedule, RetentionRecord};
use crate::encoder::CorrelationSummary;
use crate::error::{Error, Result};
use crate::flops::FlopsReport;
use crate::ppm::{write_p6, PpmImage};

/// The source image with every non-retained patch darkened.
#[derive(Debug, Clone)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub stage: usize,
    pub kept_count: usize,
}

impl MaskImage {
    pub fn to_ppm(&self) -> PpmImage {
        PpmImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.clone(),
        }
    }
}

/// Darken every patch not kept at this stage by multiplying each channel by
/// 0.25 (floor); kept patches are untouched. Patch `p` covers the pixel
/// block at grid position `(p / grid, p mod grid)`.
pub fn render_mask(image: &PpmImage, rec: &RetentionRecord, grid: usize) -> Result<MaskImage> {
    if grid == 0 || image.width != image.height || !image.width.is_multiple_of(grid) {
        return Err(Error::Validation(format!(
            "cannot overlay a {grid}x{grid} grid on a {}x{} image",
            image.width, image.height
        )));
    }
    let patch_px = image.width / grid;
    let patch_count = grid * grid;
    if let Some(&bad) = rec.kept.iter().chain(&rec.dropped).find(|&&o| o >= patch_count) {
        return Err(Error::Validation(format!(
            "origin {bad} out of range for {patch_count} patches"
        )));
    }
    let kept: std::collections::BTreeSet<usize> = rec.kept.iter().copied().collect();
    let mut pixels = image.pixels.clone();
    for p in 0..patch_count {
        if kept.contains(&p) {
            continue;
        }
        let (pr, pc) = (p / grid, p % grid);
        for y in pr * patch_px..(pr + 1) * patch_px {
            let row_base = (y * image.width + pc * patch_px) * 3;
            for b in pixels[row_base..row_base + patch_px * 3].iter_mut() {
                *b >>= 2; // floor(0.25 × channel)
            }
        }
    }
    Ok(MaskImage {
        width: image.width,
        height: image.height,
        pixels,
        stage: rec.layer,
        kept_count: rec.kept.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub layer: usize,
    pub kept: Vec<usize>,
    pub correlation: CorrelationSummary,
}

/// Wall-clock phase timings. Reported on stdout only: they are excluded
/// from `stats.json` so identical runs produce byte-identical output files.
#[derive(Debug, Clone, Copy, Default)]
pub struct Timings {
    pub guidance_ms: f64,
    pub embed_ms: f64,
    pub encode_ms: f64,
    pub render_ms: f64,
    pub total_ms: f64,
}

/// The `stats.json` document for one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub question: Option<String>,
    pub guidance: String,
    pub recycle: bool,
    pub schedule: CompressionSchedule,
    pub per_layer_tokens: Vec<usize>,
    pub per_stage: Vec<StageReport>,
    pub final_tokens: usize,
    pub flops: FlopsReport,
    #[serde(skip)]
    pub timings: Timings,
}

pub fn stats_json(stats: &RunStats) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(stats).expect("stats serialize");
    bytes.push(b'\n');
    bytes
}

/// Write `stage_{layer}.ppm` per mask plus `stats.json` into `out_dir`.
/// File contents are a pure function of the inputs.
pub fn write_outputs(stats: &RunStats, masks: &[MaskImage], out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    for mask in masks {
        write_p6(&mask.to_ppm(), dir.join(format!("stage_{}.ppm", mask.stage)))?;
    }
    fs::write(dir.join("stats.json"), stats_json(stats))?;
    Ok(())
}
