//! Instruction-guided fusion of hierarchical vision-transformer features.
//!
//! An instruction embedding and the per-layer `<cls>` summaries of a vision
//! encoder drive a small cross-attention network that emits a weight per
//! layer group. The pooled patch features of each group are mixed by those
//! weights, joined with the penultimate layer and mapped through a GELU
//! adapter. Everything runs on a small reverse-mode tape in `f64`, so every
//! gradient can be checked against finite differences.

pub mod allocator;
mod attention;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod hierarchy;
pub mod io;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use allocator::{AllocatorConfig, AllocatorParams, WeightVector};
pub use embedding::{embed_instruction, EmbeddingProvider, SentenceEmbedding};
pub use error::{Error, FormatErrorKind, Result};
pub use graph::{AttentionVars, Graph, OpKind, Var};
pub use tensor::Tensor;
