//! Layer relevance laboratory for small decoder-only transformers.
//!
//! The crate measures how much each transformer block matters, both by the
//! popular input/output cosine-similarity score and by the accuracy lost when
//! the block is removed. It also builds models where the two disagree as badly
//! as possible, prunes models under several relevance metrics, and provides
//! the statistics used to compare metrics across tasks.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix `f64`,
//! which every experiment driver uses.

pub mod adversarial;
pub mod analysis;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pruning;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Scalar;

pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type Model = model::TransformerModel<f64>;
