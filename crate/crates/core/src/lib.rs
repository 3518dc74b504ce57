//! RNN-regulated residual networks on a small CPU tensor/autodiff core.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`conv`], [`tape`], [`nn`] – dense NCHW tensors, grouped
//!   convolution kernels, define-by-run reverse-mode autodiff and layers.
//! * [`convrnn`] – factorized grouped convolution and the vanilla / GRU / LSTM
//!   convolutional cells used as regulators.
//! * [`blocks`] – ResNet basic and bottleneck blocks, their regulated
//!   counterparts and the squeeze-and-excitation gate.
//! * [`arch`] – declarative architecture specs, network construction and
//!   parameter / MAC accounting.
//! * [`pipeline`] – CIFAR binary ingestion, augmentation and batching.
//! * [`trainer`] – SGD, training loop, checkpoints, block probes and feature
//!   export.

pub mod arch;
pub mod blocks;
pub mod conv;
pub mod convrnn;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape, Tensor};
