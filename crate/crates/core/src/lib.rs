//! Inner-thinking transformer at desk scale: a small reverse-mode tensor
//! engine, a LLaMA-style decoder with vanilla, loop and inner-thinking
//! layers, a byte-level training pipeline, and analysis probes.

pub mod error;
pub mod model;
pub mod probes;
pub mod tensor;
pub mod thinking;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
