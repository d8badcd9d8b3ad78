//! Knowledge-distillation laboratory for neural machine translation.
//!
//! Teacher and student transformers are trained on toy or file-backed
//! parallel corpora; students learn either from the real targets or from the
//! teacher's beam-search translations, and the [`eval`] module compares them.

pub mod data;
pub mod decode;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod tokenizer;
pub mod train;
pub(crate) mod util;

pub use error::{KdError, Result};
