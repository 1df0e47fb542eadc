//! Counterfactual-evidence rumor classification over post-propagation graphs.
//!
//! The pipeline for one event is: [`encoder`] (post text → node features),
//! [`gnn`] (attention layers), [`sampler`] (m connected evidence subgraphs
//! and their complements), [`diversity`] (spectral loss over subgraph
//! kernels), [`aggregator`] (weighted evidence pooling, classifier, losses).
//! [`model`] wires these together on an [`autodiff`] tape; [`trainer`] and
//! [`eval`] run experiments.

pub mod aggregator;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diversity;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod suite;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
