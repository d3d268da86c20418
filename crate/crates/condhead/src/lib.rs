//! Semantic-embedding-conditioned dynamic prediction heads for box
//! regression and mask segmentation, with a synthetic open-vocabulary
//! benchmark, training, evaluation, and gradient-verification tooling.

pub mod autodiff;
pub mod condhead;
pub mod error;
pub mod geometry;
pub mod seeds;

pub use error::{Error, Result};
