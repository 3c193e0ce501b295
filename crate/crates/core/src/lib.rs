//! Fault location for partially observable distribution feeders with
//! spatio-temporal graph neural networks.
//!
//! The crate covers the full experimental pipeline: feeder topology
//! modeling, sensor-graph construction (measured-only and full-topology
//! strategies), a surrogate fault-signature generator, GRU + GNN models
//! trained from scratch, and the evaluation/benchmark harness.

pub mod cli;
pub mod datagen;
pub mod feeder;
pub mod graph;
pub mod gnn;
pub mod nn;
pub mod stgnn;
pub mod trainer;

pub use feeder::{parse_feeder, parse_placement, FeederTopology, SensorPlacement};
