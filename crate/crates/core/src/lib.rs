//! Contrastive instance discrimination combined with online momentum
//! clustering, implemented end to end on dense vectors.

pub mod ablation;
pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod queue;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;
