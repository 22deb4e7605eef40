//! Outlier-class learning for out-of-distribution detection on long-tailed
//! data: a small MLP with an extra outlier logit and a projection head,
//! prototype and margin losses on the embeddings, prior-aware calibration at
//! inference, and a deterministic synthetic benchmark around them.

pub mod calibration;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod trainer;

pub use error::{CoclError, Result};
