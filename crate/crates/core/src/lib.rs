//! Hierarchical contrastive dehazing.
//!
//! A hierarchical dehazing network with three-scale outputs, a hierarchical
//! contrastive loss over cross-scale positive/negative pairs, an atmospheric
//! scattering haze synthesizer, and the training/evaluation harness around
//! them. Everything runs on the CPU in double precision on a small built-in
//! reverse-mode autodiff engine.

pub mod autograd;
pub mod error;
pub mod kernels;
pub mod tensor;

pub use error::{CheckpointFault, Error, Result};
pub use tensor::{ImageTensor, Shape, Tensor};
pub mod network;
pub mod gradcheck;
pub mod data;
pub mod haze;
pub mod losses;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod train;
