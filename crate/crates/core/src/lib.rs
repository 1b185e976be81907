//! Class-incremental sequence labeling with entity-aware contrastive
//! learning, distance-based relabeling of unlabeled entities, exemplar
//! rehearsal and nearest-class-mean classification.

pub mod classifier;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod memory;
pub mod metrics;
pub mod protocol;
pub mod relabel;

pub use error::{Error, Result};
