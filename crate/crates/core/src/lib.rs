//! Dual-graph POI click-through-rate model: check-in ingestion, geographical
//! and sequential graphs, the network, training and evaluation.

pub mod bundle;
pub mod evaluator;
pub mod graphs;
pub mod ingest;
pub mod model;
pub mod seed;
pub mod trainer;

pub use disenpoi_autodiff as autodiff;
