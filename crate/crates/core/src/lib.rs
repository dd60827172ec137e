//! Continual learning on small feedforward networks: orthogonal and adaptive
//! weight modification, distillation regularization, baselines, synthetic
//! task streams and an experiment harness.

pub mod distill;
pub mod error;
pub mod harness;
pub mod matcore;
pub mod metrics;
pub mod netcore;
pub mod projector;
pub mod selfcheck;
pub mod strategies;
pub mod taskgen;

pub use error::{Error, Result};
