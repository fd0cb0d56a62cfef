//! Learning compact discrete node identifiers.
//!
//! A message-passing encoder produces one embedding per node and per layer.
//! Each embedding is quantized by `M` residual codebooks, and the resulting
//! `L × M` small integers form the node's ID. IDs are then consumed directly
//! by lightweight heads for node, link and graph tasks, by k-means for
//! clustering, and by Hamming search for retrieval.

pub mod autodiff;
pub mod datasets;
pub mod downstream;
pub mod error;
pub mod graph;
pub mod io;
pub mod kmeans;
pub mod metrics;
pub mod mpnn;
pub mod nn;
pub mod rng;
pub mod sparse;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
