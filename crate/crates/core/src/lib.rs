//! Self-supervised entity linking.
//!
//! Mention examples are harvested from unlabeled text by exact matching of
//! unambiguous ontology surface forms, a contextual mention encoder is
//! trained with in-batch contrastive losses, and test mentions are linked to
//! the entity owning the most similar stored prototype.

pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod jsonl;
pub mod mention_gen;
pub mod ontology;
pub mod pipeline;
pub mod prototype_index;
pub mod reranker;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
