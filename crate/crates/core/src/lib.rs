//! Automatic evaluation of open-domain dialogue responses with relevance
//! and predicted-engagement scores.

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod embedding;
pub mod engagement;
pub mod error;
pub mod nn;
pub mod relevance;
pub mod stats;
pub mod text;

pub use error::{Error, Result};
