//! Deep clustering with an adversarial clustering loss, plus Euclidean and
//! KL-divergence clustering-loss baselines.

pub mod cli;
pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod par;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
