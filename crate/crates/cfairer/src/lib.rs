//! Attribute-level counterfactual explanations for item-exposure fairness
//! in recommendation: a matrix-factorization recommender, heterogeneous
//! graph embeddings, an off-policy reinforcement-learning explanation
//! policy, and an erasure-based evaluation harness.

pub mod cfe;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fairness;
pub mod graphrep;
pub mod harness;
pub mod hin;
pub mod linalg;
pub mod pipeline;
pub mod recsys;

pub use error::{Error, Result};
