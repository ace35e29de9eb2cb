//! Sequence-to-sequence transformer with two self-attention variants:
//! conventional projection-based attention (SAN) and simplified attention
//! (SSAN) whose queries and keys come from FSMN memory blocks while the
//! values are the layer input itself.

pub mod attention;
pub mod config;
pub mod error;
pub mod eval;
pub mod fsmn;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
