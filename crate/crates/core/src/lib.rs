//! Act-aware dialogue state tracking.
//!
//! The crate is organized as a pipeline: `ontology` and `corpus` turn files
//! into training instances, `encoder` embeds them, `attention` and `heads`
//! implement the model math on the autodiff `tape`, and `training` /
//! `evaluation` drive optimization and scoring.

pub mod attention;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod model;
pub mod ontology;
pub mod params;
pub mod tape;
pub mod text;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{DstError, Result};
pub use ontology::{Ontology, OptionSet, SlotKey, SlotKind, SlotPolicy};
