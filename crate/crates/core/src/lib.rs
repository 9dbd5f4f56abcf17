//! Spatiotemporal focus network for skeleton-based action recognition.
//!
//! The crate is `no_std` (with `alloc`): skeleton topology, a small
//! reverse-mode autodiff engine, the network layers and model assembly,
//! modality streams, optimizer math and metrics. File formats and the
//! command-line harness live in the `stf` crate.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod real;
pub mod streams;
pub mod tensor;
pub mod topology;
pub mod train;

pub use autodiff::{ConvSpec, Kernel, NodeId, Tape};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
