//! Core of the TCLeaf lesion detector.
//!
//! Everything in this crate is pure computation over in-memory buffers: a
//! small dense-tensor engine with reverse-mode differentiation, the network
//! blocks (patch-embedding stem, dual-path downsampling, transformer-convolution
//! layers with random-feature attention, deformable alignment neck, decoupled
//! heads), the detection losses, label assignment, NMS, metrics and a
//! synthetic scene generator. File formats, the training driver and the CLI
//! live in the `tcleaf` crate.
//!
//! The crate is `no_std` and only needs `alloc`. Enable the `std` feature to
//! let the GEMM kernels pick SIMD paths at runtime.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assign;
pub mod attention;
pub mod augment;
pub mod backbone;
pub mod boxes;
pub mod config;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nms;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod reference;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
