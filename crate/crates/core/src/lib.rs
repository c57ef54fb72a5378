//! Face-conditioned zero-shot text-to-speech.

pub mod align;
pub mod audio;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod face;
pub mod nn;
pub mod phoneme;
pub mod pipeline;
pub mod plm;
pub mod prosody;
pub mod tts;

pub use candle_core::DType;
pub use error::{Error, Result};
