//! Frequency-aware cross-entropy training for small sequence-to-sequence
//! dialogue models.
//!
//! The crate is layered bottom-up: [`numkernel`] (matrices, autodiff tape,
//! Adam), [`corpus`] (tokens, pairs, batches), [`frequency`] (token counts and
//! weights), [`loss`], [`seq2seq`] (the GRU encoder-decoder), [`metrics`] and
//! [`harness`] (training, refinement, evaluation).

pub mod corpus;
pub mod error;
pub mod frequency;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod numkernel;
pub mod seq2seq;

pub use error::{Error, Result};
