//! Central-language-aware layers for multilingual zero-shot translation.
//!
//! The crate is `no_std` + `alloc`; the `std` feature (on by default) only
//! enables runtime CPU feature detection in the matrix kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attribution;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{finite_difference_grad, Graph, NodeId, PrimitiveKind};
pub use tensor::{Real, Tensor};
