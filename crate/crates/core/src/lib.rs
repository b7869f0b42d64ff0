//! Segmental contrastive predictive coding (SCPC): joint frame- and
//! segment-level contrastive learning from raw audio with a differentiable
//! boundary detector, plus inference, evaluation and a synthetic corpus.

pub mod audio;
pub mod boundary;
pub mod corpus;
pub mod diffcore;
mod error;
pub mod infer;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
