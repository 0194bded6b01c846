//! Entity-bias auditing engine.
//!
//! Templates with an entity placeholder are filled with every audited entity,
//! sent to a logprob-capable backend, and the label posteriors are reduced to
//! normalized bias scores, statistical comparisons, similarity structure and
//! synthetic-vs-real alignment.

pub mod alignment;
pub mod digest;
pub mod error;
pub mod exec;
pub mod fixture;
pub mod gateway;
pub mod registry;
pub mod runner;
pub mod scoring;
pub mod similarity;
pub mod stats;
pub mod synthgen;

pub use error::{AuditError, Result};
pub use exec::Exec;
