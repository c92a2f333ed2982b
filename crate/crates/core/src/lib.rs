//! Desk-scale audio-visual speech recognition with a frozen decoder-only
//! language model, modality projectors and low-rank adapters.

pub mod assembly;
pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod nn;
pub mod projector;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
