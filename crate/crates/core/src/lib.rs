//! Question-guided visual token compression for ViT-style encoders.
//!
//! The crate runs a deterministic vision-encoder forward pass that scores
//! patch tokens against a user question, keeps the most relevant ones at a
//! set of scheduled layers, folds the rest back in by attention weight, and
//! accounts for the compute saved with an exact analytic FLOPs model. It
//! also ships a bit-exact tensor archive format, a synthetic-weights
//! generator so everything runs without pretrained checkpoints, and a mask
//! renderer that shows which image regions survived each stage.
//!
//! Everything is reproducible at the byte level: same inputs, same bits,
//! on any platform.

pub mod archive;
pub mod compressor;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod guidance;
pub mod pipeline;
pub mod ppm;
pub mod tensor;
pub mod viz;

pub use archive::{gen_synthetic, EncoderConfig, SplitMix64, TensorArchive};
pub use compressor::{build_schedule, CompressOptions, CompressionSchedule, GuidanceSource};
pub use encoder::Encoder;
pub use error::{Error, Result};
pub use flops::{encoder_ratio, layer_flops, pipeline_estimate, FlopsReport, LlmConfig};
