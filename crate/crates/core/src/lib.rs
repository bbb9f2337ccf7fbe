//! Category-prior-guided Perceiver classifier for anxiety and depression
//! screening from interview audio features and transcript embeddings.

pub mod attention;
pub mod config;
pub mod corpus;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod priors;
pub mod trainer;

pub use error::{Error, Result};
