//! Open-vocabulary detection with early dense alignment.
//!
//! Detector features are aligned to text embeddings at every spatial location;
//! class-agnostic proposals are then scored by pooling the dense map, fused
//! with a frozen vision-language model's own dense scores.

pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod datasets;
pub mod dense;
pub mod encoders;
pub mod error;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod proposals;
pub mod raster;
pub mod shapes;
pub mod tensor;
pub mod viz;
pub mod vocab;

pub use boxes::{BoxCxcywh, BoxXyxy};
pub use checkpoint::ParamSet;
pub use dense::{DenseScoreMap, EdaConfig, ProposalScores, TopKMask};
pub use encoders::{FrozenImageEncoder, PatchGrid, TextEncoder};
pub use error::{Error, Result};
pub use proposals::{DecoderConfig, MatchResult, Proposal};
pub use raster::Image;
pub use tensor::Mat;
pub use vocab::{CategoryVocabulary, EmbeddingMatrix, Split, SplitFilter};
