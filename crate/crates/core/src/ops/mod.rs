//! Layer operations with forward kernels and backward rules.
//!
//! Each operation is available as a method on [`Graph`](crate::tensor::Graph),
//! which records it for the reverse sweep.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod elementwise;
pub mod pool;
pub mod structure;
pub mod warp;

pub use batchnorm::{BatchNormState, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use conv::{conv2d, ConvGeometry, ConvSpec, Padding};

/// Whether batch normalization uses batch statistics and dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
