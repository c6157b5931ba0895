//! Merge-and-run networks on a small CPU autodiff core.
//!
//! The crate provides tensors with reverse-mode differentiation, the residual,
//! inception-like and merge-and-run blocks, network construction for ResNet / DILNet /
//! DMRNet, exact path-length analysis, equivalence-preserving block rewrites, and a
//! training harness (SGD with Nesterov momentum, step schedule, CIFAR-10 pipeline).

pub mod blocks;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod netbuilder;
pub mod paths;
pub mod tensor;
pub mod train;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{DType, Scalar, Tensor};
