//! DiffLoRA at desk scale: differential attention realized through
//! low-rank adapters on a frozen toy transformer, with hand-written reverse
//! mode gradients, synthetic retrieval tasks and attention-mass analysis.

pub mod adapters;
pub mod analysis;
pub mod attention;
pub mod error;
pub mod linalg;
pub mod model;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
