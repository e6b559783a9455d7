//! Unbiased watermark embedding, randomization-test detection and
//! change-point segmentation of partially watermarked token sequences.

pub mod cpd;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod keygen;
pub mod lm;
pub mod rtest;
mod scalar;
pub mod seeding;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the harness and the CLI.
pub type ProbVector = lm::ProbVector<f64>;
pub type MarkovLm = lm::MarkovLm<f64>;
pub type KeySeq = keygen::KeySeq<f64>;
pub type Detector = stats::Detector<f64>;
pub type TextEvidence = stats::TextEvidence<f64>;
pub type StatParams = stats::StatParams<f64>;
