//! Coarse-to-fine token generation over clustered VQ codebooks.

pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod sweep;
pub mod tokenizer;

pub use error::{CtfError, Result};
