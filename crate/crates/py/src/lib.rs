//! Python bindings for the qgvtc token-compression engine.
//!
//! Scalar results come back as plain Python values; structured reports come
//! back as JSON strings so callers can `json.loads` them without this module
//! pinning a schema of its own.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use qgvtc::archive::{gen_synthetic, EncoderConfig, SplitMix64, TensorArchive};
use qgvtc::compressor::{build_schedule, CompressOptions, CompressionSchedule, GuidanceSource, Stage};
use qgvtc::error::Error;
use qgvtc::flops::{encoder_ratio, pipeline_estimate, LlmConfig};
use qgvtc::guidance::{load_text_embedding, toy_text_embed, D_TEXT};
use qgvtc::pipeline::{run, RunConfig};
use qgvtc::ppm::read_p6;
use qgvtc::viz::{stats_json, write_outputs};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn preset_config(name: &str) -> PyResult<EncoderConfig> {
    EncoderConfig::preset(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown preset '{name}'")))
}

fn schedule_for(
    config: &EncoderConfig,
    layers: Option<Vec<usize>>,
    target: usize,
) -> PyResult<CompressionSchedule> {
    let n = config.token_count();
    if target == n && layers.is_none() {
        return Ok(CompressionSchedule::identity(n));
    }
    let layers = layers.unwrap_or_else(|| vec![12, 14, 16, 18, 20, 22]);
    build_schedule(n, target, &layers).map_err(to_py_err)
}

/// Per-stage (layer, keep) pairs from `n` down to `m` over the given layers.
#[pyfunction]
fn schedule(n: usize, m: usize, layers: Vec<usize>) -> PyResult<Vec<(usize, usize)>> {
    let s = build_schedule(n, m, &layers).map_err(to_py_err)?;
    Ok(s.stages.iter().map(|st| (st.layer, st.keep)).collect())
}

/// Analytic transformer-layer cost `4nd² + 2n²d + 2nd·ffn`.
#[pyfunction]
fn layer_flops(n: usize, d: usize, ffn: usize) -> PyResult<u64> {
    qgvtc::flops::layer_flops(n, d, ffn).map_err(to_py_err)
}

/// Encoder compute ratio for a schedule, as a fraction of the uncompressed
/// encoder. `layers=None` with `target` equal to the token count means no
/// compression.
#[pyfunction]
#[pyo3(signature = (target, layers=None, preset="vit-l-14", guided=false))]
fn ratio(target: usize, layers: Option<Vec<usize>>, preset: &str, guided: bool) -> PyResult<f64> {
    let config = preset_config(preset)?;
    let schedule = schedule_for(&config, layers, target)?;
    Ok(encoder_ratio(&schedule, &config, guided).map_err(to_py_err)?.ratio)
}

/// Full FLOPs report (per-layer costs, totals, ratio, guidance overhead)
/// as a JSON string.
#[pyfunction]
#[pyo3(signature = (target, layers=None, preset="vit-l-14", guided=false))]
fn flops_report_json(
    target: usize,
    layers: Option<Vec<usize>>,
    preset: &str,
    guided: bool,
) -> PyResult<String> {
    let config = preset_config(preset)?;
    let schedule = schedule_for(&config, layers, target)?;
    let report = encoder_ratio(&schedule, &config, guided).map_err(to_py_err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Prefill-only whole-pipeline estimate in FLOPs: compressed encoder,
/// projector, and LLM prefill over `target + text_tokens` tokens.
#[pyfunction]
#[pyo3(signature = (target, layers=None, preset="vit-l-14", guided=false,
                    llm_layers=32, llm_dim=4096, llm_ffn=11008, text_tokens=60))]
#[allow(clippy::too_many_arguments)]
fn pipeline_flops(
    target: usize,
    layers: Option<Vec<usize>>,
    preset: &str,
    guided: bool,
    llm_layers: usize,
    llm_dim: usize,
    llm_ffn: usize,
    text_tokens: usize,
) -> PyResult<u64> {
    let config = preset_config(preset)?;
    let schedule = schedule_for(&config, layers, target)?;
    let report = encoder_ratio(&schedule, &config, guided).map_err(to_py_err)?;
    let llm = LlmConfig {
        layers: llm_layers,
        dim: llm_dim,
        ffn_dim: llm_ffn,
        text_tokens,
    };
    pipeline_estimate(target, &report, &config, &llm).map_err(to_py_err)
}

/// First `count` outputs of the splitmix64 stream for `seed`.
#[pyfunction]
fn splitmix64(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = SplitMix64::new(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Deterministic toy text embedding (L2-normalized).
#[pyfunction]
#[pyo3(signature = (question, d_text=D_TEXT, seed=0))]
fn text_embed(question: &str, d_text: usize, seed: u64) -> PyResult<Vec<f32>> {
    Ok(toy_text_embed(question, d_text, seed).map_err(to_py_err)?.values)
}

/// Generate a synthetic weight archive; returns (tensor_count, file_bytes).
#[pyfunction]
#[pyo3(signature = (path, seed=42, preset="vit-l-14"))]
fn gen_weights(path: PathBuf, seed: u64, preset: &str) -> PyResult<(usize, u64)> {
    let config = preset_config(preset)?;
    let mut archive = gen_synthetic(seed, &config).map_err(to_py_err)?;
    archive.metadata_mut().insert("preset".into(), preset.to_string());
    archive.save(&path).map_err(to_py_err)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    Ok((archive.len(), bytes))
}

/// A loaded weight archive plus its encoder configuration; runs compression
/// passes without re-reading the weights each time.
#[pyclass]
struct Engine {
    weights: TensorArchive,
    config: EncoderConfig,
}

#[pymethods]
impl Engine {
    /// Load a QGVT archive whose metadata carries the encoder dims
    /// (archives from `gen_weights` do).
    #[new]
    fn new(weights_path: PathBuf) -> PyResult<Self> {
        let weights = TensorArchive::load(&weights_path).map_err(to_py_err)?;
        let config = EncoderConfig::from_metadata(weights.metadata()).map_err(to_py_err)?;
        Ok(Self { weights, config })
    }

    /// Number of encoder layers.
    fn layers(&self) -> usize {
        self.config.layers
    }

    /// Patch tokens the encoder starts from.
    fn token_count(&self) -> usize {
        self.config.token_count()
    }

    /// Compress an image under a question. Returns the run statistics as a
    /// JSON string; when `out_dir` is given, also writes the stage masks
    /// and `stats.json` there, byte-identically across reruns.
    #[pyo3(signature = (image, target=72, layers=None, stages=None, question=None,
                        guidance="question", recycle=true, seed=0,
                        text_embedding=None, out_dir=None))]
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        image: PathBuf,
        target: usize,
        layers: Option<Vec<usize>>,
        stages: Option<Vec<(usize, usize)>>,
        question: Option<String>,
        guidance: &str,
        recycle: bool,
        seed: u64,
        text_embedding: Option<PathBuf>,
        out_dir: Option<PathBuf>,
    ) -> PyResult<String> {
        let source = match guidance {
            "question" => GuidanceSource::Question,
            "image-cls" => GuidanceSource::ImageCls,
            other => {
                return Err(PyValueError::new_err(format!(
                    "guidance must be 'question' or 'image-cls', got '{other}'"
                )))
            }
        };
        let n = self.config.token_count();
        let schedule = match stages {
            Some(pairs) => {
                let stages = pairs.iter().map(|&(layer, keep)| Stage { layer, keep }).collect();
                CompressionSchedule::from_stages(n, stages).map_err(to_py_err)?
            }
            None if target == n && layers.is_none() => CompressionSchedule::identity(n),
            None => {
                let layers = layers.unwrap_or_else(|| vec![12, 14, 16, 18, 20, 22]);
                build_schedule(n, target, &layers).map_err(to_py_err)?
            }
        };
        let imported_embedding = match text_embedding {
            Some(path) => Some(load_text_embedding(path).map_err(to_py_err)?),
            None => None,
        };
        let image = read_p6(&image).map_err(to_py_err)?;
        let run_config = RunConfig {
            question,
            imported_embedding,
            schedule,
            options: CompressOptions {
                source,
                recycle,
            },
            embed_seed: seed,
        };
        let artifacts = run(&self.weights, &self.config, &image, &run_config).map_err(to_py_err)?;
        if let Some(dir) = out_dir {
            write_outputs(&artifacts.stats, &artifacts.masks, dir).map_err(to_py_err)?;
        }
        String::from_utf8(stats_json(&artifacts.stats))
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Engine(layers={}, dim={}, heads={}, tokens={})",
            self.config.layers,
            self.config.dim,
            self.config.heads,
            self.config.token_count()
        )
    }
}

#[pymodule]
fn qgvtc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("D_TEXT", D_TEXT)?;
    m.add_class::<Engine>()?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(layer_flops, m)?)?;
    m.add_function(wrap_pyfunction!(ratio, m)?)?;
    m.add_function(wrap_pyfunction!(flops_report_json, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline_flops, m)?)?;
    m.add_function(wrap_pyfunction!(splitmix64, m)?)?;
    m.add_function(wrap_pyfunction!(text_embed, m)?)?;
    m.add_function(wrap_pyfunction!(gen_weights, m)?)?;
    Ok(())
}
