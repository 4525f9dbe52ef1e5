//! Semantic-unit machine translation toolkit.
//!
//! The pipeline has three stages:
//!
//! 1. **Segmentation** — [`bpe`] learns and applies byte pair encoding with
//!    `@@` continuation marks; [`wpe`] learns word pair encoding on top of it
//!    and emits semantic-unit spans over the subword stream without changing
//!    the text.
//! 2. **Model** — [`model`] implements a dual-stream transformer encoder whose
//!    input concatenates the token-level sentence with one fused vector per
//!    semantic unit (the attentive fusion layer), plus a standard decoder.
//! 3. **Training and evaluation** — [`training`] runs Adam with an
//!    inverse-square-root schedule, checkpointing and checkpoint averaging;
//!    [`eval`] provides corpus BLEU, chrF, span-count bucketing and an
//!    alignment-based semantic-unit recall.
//!
//! Everything is deterministic given a seed: same inputs, same bytes out.

pub mod autograd;
pub mod bpe;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod wpe;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
