//! Sequential recommendation with intent prototypes, cluster-level
//! self-distillation and a head/tail adversary, on a small CPU tensor engine.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod intent;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
