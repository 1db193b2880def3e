//! Neural web content extraction.
//!
//! This crate converts raw HTML into a depth-first-ordered sequence of DOM
//! text nodes, classifies each node with a hierarchical neural model into six
//! content labels (primary content, heading, title, paragraph, table, list),
//! and extracts the primary content of the page. It ships everything needed
//! to go from HTML to a trained extractor on one machine:
//!
//! - [`dom`] — error-tolerant HTML parsing, DFS node sequencing, chunking
//! - [`tokenizer`] — deterministic hash tokenizer over UTF-8 text
//! - [`encoder`] — per-node transformer encoder producing node vectors
//! - [`model`] — sequence transformer, label heads, multi-label loss
//! - [`checkpoint`] — self-describing named-tensor checkpoint files
//! - [`quant`] — 8-bit post-training quantization and integer inference
//! - [`train`] — AdamW + cosine-decay training loop
//! - [`synth`] — seeded synthetic labeled-page generator
//! - [`eval`] — extraction, node-level metrics, containment scoring, baselines
//!
//! All numeric code is generic over the scalar type via [`scalar::Scalar`]
//! (`f32` or `f64`); checkpoints are always stored as 32-bit floats.

pub mod checkpoint;
pub mod corpus;
pub mod dom;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod quant;
pub mod scalar;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use corpus::{CorpusRecord, LabeledDocument};
pub use dom::{DomNode, DomTree, NodeKind, NodeSequence};
pub use error::{Error, Result};
pub use eval::{EvalReport, Extraction};
pub use model::{LabelSet, ModelConfig, NodePredictor, Probabilities, ScraperModel};
pub use quant::{QuantMode, QuantizedModel};
pub use scalar::Scalar;
pub use synth::SyntheticSpec;
pub use tokenizer::{TokenIds, TokenizerConfig};
pub use train::TrainConfig;

/// Scalar type used by the shipped tooling (training, CLI, checkpoints).
pub type DefaultScalar = f32;

/// Full model at the default precision.
pub type ScraperModelF32 = model::ScraperModel<f32>;
/// Full model at double precision (used for tight numeric verification).
pub type ScraperModelF64 = model::ScraperModel<f64>;
