//! Scene graph generation with knowledge-routed graph networks.
//!
//! Objects and relationships are classified by two gated graph networks whose
//! message weights come from label statistics counted on the training set:
//! category co-occurrence for objects and per-pair predicate frequencies for
//! relationships.

pub mod autodiff;
mod codec;
pub mod gradcheck;
pub mod dataset;
pub mod error;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod object_router;
pub mod relation_router;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
