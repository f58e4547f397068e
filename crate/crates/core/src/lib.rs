//! Sequential recommendation over frozen text-derived item embeddings.
//!
//! Items enter the model through a two-layer adapter over their text vectors
//! rather than through learned ID embeddings. A self-attention backbone is
//! pre-trained with next-, masked- and permuted-item prediction and then
//! fine-tuned with or without an additional ID table.

pub mod adam;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
