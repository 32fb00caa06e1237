//! Graphical normalizing flows: density estimation with flows whose
//! conditioners are masked by a Bayesian-network adjacency matrix.
//!
//! The adjacency can be prescribed (including the classical autoregressive
//! and coupling patterns as special cases) or learned from data with a
//! continuous acyclicity penalty optimized by an augmented-Lagrangian loop.
//! Exact sampling inverts the flow dimension-by-dimension with a fixed-point
//! sweep bounded by the depth of the graph.

pub mod autodiff;
pub mod conditioners;
pub mod data;
pub mod error;
pub mod flow;
pub mod graph;
pub mod nn;
pub mod normalizers;
pub mod trainer;

pub use autodiff::{NodeId, Tape, Tensor};
pub use conditioners::{ConditionerKind, ConditionerSpec};
pub use data::DatasetBundle;
pub use error::{Error, Result};
pub use flow::{FlowModel, FlowStep, MaskState};
pub use graph::{AdjacencyParam, BinaryDag};
pub use nn::{AdamState, MlpParams};
pub use normalizers::{AffineNormalizer, MonotonicNormalizer, NormalizerKind};
pub use trainer::{TrainConfig, TrainRun, TrainState};
