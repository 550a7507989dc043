//! Object-level image retrieval: panoptic crops, class-gated cosine search,
//! and an evaluation harness for comparing retrieval methods.

pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
#[cfg(feature = "images")]
pub mod pipeline;
pub mod preprocess;
pub mod retrieval;
pub mod scoring;
pub mod synth;

pub use embedding::{ClassLabel, EmbeddingVector};
pub use error::{Error, Result};
pub use index::Index;
pub use retrieval::{run_query, QueryOutcome, SearchMode};
pub use scoring::{ImageId, Query, RankedResult};
