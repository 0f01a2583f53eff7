//! Concept-level analysis of catastrophic forgetting.
//!
//! Task-anchored sparse autoencoders turn backbone features into concept
//! proxies. Their activations are compared across continual-training
//! checkpoints, before and after an affine recovery map, and every concept is
//! assigned to one of five outcomes: retained, seemingly deleted, recovered,
//! decodable or lost.

pub mod adam;
pub mod blob;
pub mod checkpoint;
pub mod concept_space;
pub mod error;
pub mod feature_store;
pub mod lbfgs;
pub mod metrics;
pub mod monosemanticity;
pub mod pipeline;
pub mod probe;
pub mod sae;
pub mod synth;
pub mod translator;

pub use error::{Error, Result};
