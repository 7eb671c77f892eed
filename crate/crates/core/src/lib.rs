//! A compact CIFAR-scale deep-learning stack built around residual networks
//! with additive channel widening and stochastic-depth gating, including the
//! variant that gates the widened and base channel parts independently.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`] / [`tape`]: dense 4-D `f32` tensors with reverse-mode
//!   automatic differentiation on a linear tape;
//! - [`layers`]: convolution (lowered to matrix products), batch
//!   normalization, the classifier head, and weight initialization;
//! - [`schedule`] / [`blocks`]: channel-width and survival-probability
//!   schedules plus the five residual block variants;
//! - [`model`] / [`checkpoint`]: network assembly, the parameter registry,
//!   and a versioned binary checkpoint container;
//! - [`optim`] / [`train`]: SGD with Nesterov momentum, the step learning
//!   rate schedule, the epoch loop, and evaluation;
//! - [`parallel`]: replicated training that splits each mini-batch across
//!   model replicas and keeps their parameters synchronized;
//! - [`data`]: CIFAR binary ingestion, synthetic datasets, augmentation,
//!   and normalization;
//! - [`gradcheck`]: the finite-difference verification harness.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
