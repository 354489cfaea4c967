//! Fast depth estimation for view synthesis.
//!
//! A shallow stereo network (dilated correspondence trunk, one-layer dense
//! blocks, a stepwise decoder with left-image skips and a sigmoid head) trained
//! on an exponentially adjusted depth target with a combined prediction and
//! projection loss. Everything runs on a small reverse-mode autodiff engine
//! over NCHW tensors.

pub mod data;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Shape, Tensor, Var};
