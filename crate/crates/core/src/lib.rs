//! Adaptive multimodal fusion for object detection.
//!
//! The crate builds small convolutional experts per sensor modality,
//! combines their class posteriors through a learned gating network (or
//! one of the baseline fusion schemes), and wires the result into a
//! sliding-window person detector with precision-recall evaluation.
//!
//! Numeric kernels are generic over [`scalar::Scalar`]; the pipeline uses
//! the `f64` aliases defined below.

pub mod checkpoint;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod expert;
pub mod fusion;
pub mod img;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Default scalar type of the shipped pipeline.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tape::Tape<Real>;
pub type Params = optim::Params<Real>;
