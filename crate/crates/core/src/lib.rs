//! Speech-aware tri-branch video representation over precomputed
//! embeddings.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod nn;
pub mod similarity;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
