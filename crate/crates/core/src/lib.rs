//! Micro-expression recognition from facial-landmark graphs.
//!
//! The pipeline turns onset/apex/offset landmark triplets into a 31-node
//! spatial-temporal graph, extracts node features with a GCN+TCN backbone,
//! decomposes them into per-component action features, and reweights those
//! actions into a single expression feature for classification.

pub mod diff;
pub mod error;
pub mod harness;
pub mod landmark_data;
pub mod losses;
pub mod model;
pub mod st_graph;

pub use error::{Error, Result};
