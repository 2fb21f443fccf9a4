//! Dense-matrix toolkit for studying how readout pooling shapes the
//! adversarial robustness of graph classifiers: a tape-based autodiff
//! core, GCN/GIN forward passes and training, flat and spectral pooling
//! operators, closed-form expected-risk bounds with their factor
//! decompositions, and evasion-attack search over structure and
//! features.

pub mod attacks;
pub mod autodiff;
pub mod bounds;
pub mod gnn;
pub mod graph;
pub mod matrix;
pub mod pooling;
pub mod sampling;

pub use autodiff::{grad_check, Tape, Tensor, TensorError};
pub use graph::{Dataset, Graph, SplitSpec};
pub use matrix::Matrix;
pub use pooling::{FlatPooling, PoolingKind, RsPoolConfig, RsOutput, TauMode};
