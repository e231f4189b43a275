//! Masked discrete diffusion over semantic-ID sequences for next-item
//! recommendation.
//!
//! The pipeline: items get semantic-ID tuples from residual k-means over
//! their embeddings ([`tokenizer`]); user histories become flat token
//! sequences that a bidirectional transformer ([`denoiser`]) learns to
//! unmask under the masked-diffusion objective ([`diffusion`]); inference
//! unmasks the next item's slots in parallel with beam search
//! ([`inference`]), optionally re-ranked by a dense-retrieval head
//! ([`dense`]); [`evaluation`] scores rankings with Recall@K and NDCG@K.
//!
//! Numeric code is generic over [`Scalar`] (f32 or f64). The aliases below
//! fix the precision for the common cases: f32 for training and inference,
//! f64 for gradient checks.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dense;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod matrix;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Denoiser32 = denoiser::Denoiser<f32>;
pub type Denoiser64 = denoiser::Denoiser<f64>;
pub type EmbeddingTable32 = data::EmbeddingTable<f32>;
pub type EmbeddingTable64 = data::EmbeddingTable<f64>;
pub type CodebookStack32 = tokenizer::CodebookStack<f32>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
