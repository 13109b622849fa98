//! Slot-level plan-and-infill text generation at desk scale.
//!
//! A small causal transformer that takes explicit position IDs is trained on
//! slot-corrupted sequences (clean slots permuted in front, masked slots
//! behind) with a hybrid autoregressive + denoising objective. Decoding plans
//! which masked slots to fill using the denoising head, then verifies and
//! completes the drafts autoregressively, reusing the KV cache throughout.

pub mod atomic;
pub mod backbone;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod objective;
pub mod probe;
pub mod scalar;
pub mod slotting;

pub use backbone::{KvCache, Logits, Model, ModelConfig, Parameters, TokenBuffer, TokenId};
pub use decoder::{decode, CacheMode, DecodeConfig, DecodeOutput, DecodeTrace, DraftMode};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
