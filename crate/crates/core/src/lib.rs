//! Importance-weighted dynamic-rank LoRA on a small glyph transformer.

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod glyphgen;
pub mod metrics;
pub mod model;
pub mod real;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::{global_grad_clip, Gradients, Graph, Tensor, Var};
pub use adapter::{AdapterVars, DynLoraAdapter, PruneReport};
pub use model::{AdapterTargets, GlyphTransformer, GlyphTransformerConfig, ParamKey, Slot};
