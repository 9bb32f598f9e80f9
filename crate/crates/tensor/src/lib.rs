//! Minimal dense-tensor engine: eager graph recording, reverse-mode
//! differentiation, finite-difference gradient checks and AdamW.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Training uses
//! `f32`; gradient checks run in `f64`.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod suite;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{gelu, silu, Op};
pub use optim::{AdamW, AdamWConfig, Moments};
pub use params::{Param, ParamStore};
pub use scalar::{DType, Scalar};
pub use suite::{kernel_suite, KernelReport, KERNELS};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
