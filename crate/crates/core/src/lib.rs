//! Adaptive multimodal fusion with reinforcement-learned, patient-specific
//! modality selection, plus the fixed-fusion and adaptive baselines, a
//! synthetic multimodal cohort generator, and the statistical evaluation
//! suite (bootstrap CIs, DeLong's test, FLOPs accounting).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod modality;
pub mod models;
pub mod numerics;
pub mod policy;
pub mod rl;
pub mod rng;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
