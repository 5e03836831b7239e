//! Command-line driver: schedule math, FLOPs tables, weight generation, and
//! end-to-end compression runs.
//!
//! Exit codes: 0 success, 1 runtime/I-O failure, 2 argument error.

use std::path::{Path, PathBuf};
use std::process;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use qgvtc::archive::{gen_synthetic, EncoderConfig, TensorArchive};
use qgvtc::compressor::{build_schedule, CompressOptions, CompressionSchedule, GuidanceSource, Stage};
use qgvtc::flops::{encoder_ratio, pipeline_estimate, LlmConfig};
use qgvtc::guidance::load_text_embedding;
use qgvtc::pipeline::{self, RunConfig};
use qgvtc::ppm::read_p6;
use qgvtc::viz::{write_outputs, RunStats};

#[derive(Parser)]
#[command(
    name = "qgvtc",
    version,
    about = "Question-guided visual token compression: schedules, compute ratios, runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the per-stage keep counts from N down to M
    Schedule(ScheduleArgs),
    /// Analytic encoder compute ratio for a schedule, optionally with a
    /// whole-pipeline prefill estimate
    Flops(FlopsArgs),
    /// Generate a deterministic synthetic weight archive
    GenWeights(GenWeightsArgs),
    /// Compress an image's tokens under a question and write masks + stats
    Run(RunArgs),
}

#[derive(clap::Args)]
struct ScheduleArgs {
    /// Initial patch token count N
    #[arg(long)]
    from: usize,
    /// Final patch token count M
    #[arg(long)]
    to: usize,
    /// Compression layers, comma separated
    #[arg(long, value_delimiter = ',', default_value = "12,14,16,18,20,22")]
    layers: Vec<usize>,
}

#[derive(clap::Args)]
struct FlopsArgs {
    /// Compression layers, comma separated (with --target)
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
    /// Final token count M
    #[arg(long)]
    target: Option<usize>,
    /// Explicit layer:keep pairs for irregular schedules, e.g. 12:492,14:408
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["schedule", "target"])]
    stages: Option<Vec<String>>,
    /// Include the question-guidance overhead in the ratio
    #[arg(long)]
    guided: bool,
    /// Encoder preset (vit-l-14 or toy)
    #[arg(long, default_value = "vit-l-14")]
    preset: String,
    /// Also write the full report as JSON
    #[arg(long)]
    json: Option<PathBuf>,
    /// LLM prefill layers (any --llm-*/--text-tokens flag appends the
    /// pipeline estimate; unset ones use 7B-class defaults)
    #[arg(long)]
    llm_layers: Option<usize>,
    /// LLM hidden size
    #[arg(long)]
    llm_dim: Option<usize>,
    /// LLM FFN intermediate size
    #[arg(long)]
    llm_ffn: Option<usize>,
    /// Text tokens appended to the visual ones at prefill
    #[arg(long)]
    text_tokens: Option<usize>,
}

#[derive(clap::Args)]
struct GenWeightsArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Encoder preset (vit-l-14 or toy)
    #[arg(long, default_value = "vit-l-14")]
    preset: String,
    /// Output archive path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GuidanceArg {
    Question,
    ImageCls,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Input image (binary PPM, P6, exactly the encoder's input size)
    #[arg(long)]
    image: PathBuf,
    /// Question guiding the compression (question mode)
    #[arg(long)]
    question: Option<String>,
    /// QGVT weight archive
    #[arg(long)]
    weights: PathBuf,
    /// Final patch token count M
    #[arg(long, default_value_t = 72)]
    target: usize,
    /// Compression layers, comma separated
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Explicit layer:keep pairs for irregular schedules
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["layers", "target"])]
    stages: Option<Vec<String>>,
    /// Selection score source
    #[arg(long, value_enum, default_value_t = GuidanceArg::Question)]
    guidance: GuidanceArg,
    /// Discard dropped tokens instead of folding them back in
    #[arg(long)]
    no_recycle: bool,
    /// Import a text-CLS embedding (QGVT archive with tensor "text.cls")
    /// instead of the built-in toy embedder
    #[arg(long, conflicts_with = "question")]
    text_embedding: Option<PathBuf>,
    /// Seed for the toy text embedder
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for masks and stats.json
    #[arg(long)]
    out_dir: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Schedule(args) => cmd_schedule(args),
        Cmd::Flops(args) => cmd_flops(args),
        Cmd::GenWeights(args) => cmd_gen_weights(args),
        Cmd::Run(args) => cmd_run(args),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            process::exit(1);
        }
    }
}

fn cmd_schedule(args: ScheduleArgs) -> Result<(), CliError> {
    let schedule = build_schedule(args.from, args.to, &args.layers).map_err(usage)?;
    print_schedule(&schedule);
    Ok(())
}

fn print_schedule(schedule: &CompressionSchedule) {
    println!("stage  layer  keep");
    for (i, stage) in schedule.stages.iter().enumerate() {
        println!("{:>5}  {:>5}  {:>4}", i + 1, stage.layer, stage.keep);
    }
}

fn parse_stage_pairs(pairs: &[String], initial: usize) -> Result<CompressionSchedule, CliError> {
    let mut stages = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (layer, keep) = pair
            .split_once(':')
            .ok_or_else(|| usage(format!("bad stage '{pair}', expected layer:keep")))?;
        let layer = layer
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad layer in stage '{pair}'")))?;
        let keep = keep
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad keep count in stage '{pair}'")))?;
        stages.push(Stage { layer, keep });
    }
    CompressionSchedule::from_stages(initial, stages).map_err(usage)
}

fn schedule_from_flags(
    layers: Option<&[usize]>,
    target: Option<usize>,
    stages: Option<&[String]>,
    initial: usize,
) -> Result<CompressionSchedule, CliError> {
    match (stages, layers) {
        (Some(pairs), _) => parse_stage_pairs(pairs, initial),
        (None, Some(layers)) => {
            let target = target.ok_or_else(|| usage("--schedule requires --target"))?;
            build_schedule(initial, target, layers).map_err(usage)
        }
        (None, None) => match target {
            None => Ok(CompressionSchedule::identity(initial)),
            Some(t) if t == initial => Ok(CompressionSchedule::identity(initial)),
            Some(_) => Err(usage("--target requires --schedule (or use --stages)")),
        },
    }
}

fn cmd_flops(args: FlopsArgs) -> Result<(), CliError> {
    let config = EncoderConfig::preset(&args.preset)
        .ok_or_else(|| usage(format!("unknown preset '{}'", args.preset)))?;
    let schedule = schedule_from_flags(
        args.schedule.as_deref(),
        args.target,
        args.stages.as_deref(),
        config.token_count(),
    )?;
    let report = encoder_ratio(&schedule, &config, args.guided).map_err(usage)?;

    println!("layer  tokens         flops");
    for cost in &report.per_layer {
        println!("{:>5}  {:>6}  {:>12}", cost.layer, cost.tokens, cost.flops);
    }
    println!("encoder total:  {:>14}", report.encoder_total);
    println!("baseline total: {:>14}", report.baseline_total);
    if let Some(b) = &report.guidance_breakdown {
        println!(
            "guidance overhead: {} (mlp {}, queries {}, logits {})",
            report.guidance_overhead, b.mlp_projection, b.query_projections, b.correlation_logits
        );
    }
    println!("R = {:.2}%", report.ratio_percent());

    let llm_requested = args.llm_layers.is_some()
        || args.llm_dim.is_some()
        || args.llm_ffn.is_some()
        || args.text_tokens.is_some();
    if llm_requested {
        let defaults = LlmConfig::llama_7b_like();
        let llm = LlmConfig {
            layers: args.llm_layers.unwrap_or(defaults.layers),
            dim: args.llm_dim.unwrap_or(defaults.dim),
            ffn_dim: args.llm_ffn.unwrap_or(defaults.ffn_dim),
            text_tokens: args.text_tokens.unwrap_or(defaults.text_tokens),
        };
        let estimate =
            pipeline_estimate(schedule.target, &report, &config, &llm).map_err(usage)?;
        println!(
            "pipeline estimate (prefill, {} visual + {} text tokens): {} flops",
            schedule.target, llm.text_tokens, estimate
        );
    }

    if let Some(path) = &args.json {
        let mut bytes = serde_json::to_vec_pretty(&report)
            .map_err(|e| runtime(format!("serializing report: {e}")))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)
            .map_err(|e| runtime(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_gen_weights(args: GenWeightsArgs) -> Result<(), CliError> {
    let config = EncoderConfig::preset(&args.preset)
        .ok_or_else(|| usage(format!("unknown preset '{}'", args.preset)))?;
    let mut archive = gen_synthetic(args.seed, &config).map_err(usage)?;
    archive.metadata_mut().insert("preset".into(), args.preset.clone());
    archive
        .save(&args.out)
        .map_err(|e| runtime(format!("writing {}: {e}", args.out.display())))?;
    let bytes = std::fs::metadata(&args.out).map(|m| m.len()).unwrap_or(0);
    println!("wrote {}: {} tensors, {} bytes", args.out.display(), archive.len(), bytes);
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    // flag consistency first, before touching any file
    match args.guidance {
        GuidanceArg::Question => {
            if args.question.is_none() && args.text_embedding.is_none() {
                return Err(usage("question guidance needs --question or --text-embedding"));
            }
        }
        GuidanceArg::ImageCls => {
            if args.question.is_some() || args.text_embedding.is_some() {
                return Err(usage(
                    "--guidance image-cls does not take --question or --text-embedding",
                ));
            }
        }
    }

    let total_start = Instant::now();
    let weights = TensorArchive::load(&args.weights)
        .map_err(|e| runtime(format!("loading {}: {e}", args.weights.display())))?;
    let config = EncoderConfig::from_metadata(weights.metadata()).map_err(|e| {
        runtime(format!(
            "{e}; the archive must carry the encoder dims in its metadata (see gen-weights)"
        ))
    })?;
    let n = config.token_count();
    let schedule = if let Some(pairs) = &args.stages {
        parse_stage_pairs(pairs, n)?
    } else if args.target == n && args.layers.is_none() {
        CompressionSchedule::identity(n)
    } else {
        let layers = args.layers.clone().unwrap_or_else(|| vec![12, 14, 16, 18, 20, 22]);
        build_schedule(n, args.target, &layers).map_err(usage)?
    };
    schedule.validate_for(&config).map_err(usage)?;

    // an empty question is a flag problem, not a runtime one
    if args.guidance == GuidanceArg::Question {
        if let Some(q) = &args.question {
            if q.trim().is_empty() {
                return Err(usage("question is empty"));
            }
        }
    }

    let image = read_p6(&args.image)
        .map_err(|e| runtime(format!("reading {}: {e}", args.image.display())))?;

    let imported_embedding = match &args.text_embedding {
        Some(path) => Some(
            load_text_embedding(path)
                .map_err(|e| runtime(format!("loading {}: {e}", path.display())))?,
        ),
        None => None,
    };
    let run_config = RunConfig {
        question: args.question.clone(),
        imported_embedding,
        schedule,
        options: CompressOptions {
            source: match args.guidance {
                GuidanceArg::Question => GuidanceSource::Question,
                GuidanceArg::ImageCls => GuidanceSource::ImageCls,
            },
            recycle: !args.no_recycle,
        },
        embed_seed: args.seed,
    };
    let mut artifacts =
        pipeline::run(&weights, &config, &image, &run_config).map_err(runtime)?;
    artifacts.stats.timings.total_ms = total_start.elapsed().as_secs_f64() * 1e3;
    write_outputs(&artifacts.stats, &artifacts.masks, &args.out_dir)
        .map_err(|e| runtime(format!("writing {}: {e}", args.out_dir.display())))?;

    print_run_summary(&artifacts.stats, artifacts.masks.len(), &args.out_dir);
    Ok(())
}

fn print_run_summary(stats: &RunStats, mask_count: usize, out_dir: &Path) {
    println!("final tokens: {}", stats.final_tokens);
    println!("encoder compute ratio R: {:.2}%", stats.flops.ratio_percent());
    let t = &stats.timings;
    println!(
        "elapsed: guidance {:.1} ms, embed {:.1} ms, encode {:.1} ms, render {:.1} ms (total {:.1} ms)",
        t.guidance_ms, t.embed_ms, t.encode_ms, t.render_ms, t.total_ms
    );
    println!("wrote {mask_count} masks + stats.json to {}", out_dir.display());
}
