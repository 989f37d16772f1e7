//! Variational entity resolution under a microclustering partition prior.
//!
//! Records are categorical rows generated from latent entities through a
//! hit-miss distortion model. The record-to-entity partition follows an
//! Ewens-Pitman law whose strength grows linearly with the number of
//! records, so clusters stay small. Inference is mean-field variational:
//! a full engine, a collapsed engine over soft counts, and a stochastic
//! mini-batch variant of the collapsed engine.

pub mod error;
pub mod eval;
pub mod likelihood;
pub mod partition_law;
pub mod records;
pub mod rng;
pub mod special_math;
pub mod summary;
pub mod svi;
pub mod vi;

pub use error::{Error, Result};
