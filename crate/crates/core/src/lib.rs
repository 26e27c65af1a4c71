//! Transformer encoder over functional-connectivity tokens with a mixture of
//! sparse top-k pooling-classifier experts, for binary connectome
//! classification.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
