//! Training, weight-trajectory statistics and resampling for small
//! convolutional classifiers.
//!
//! The crate implements the full experiment pipeline:
//!
//! * [`nn`]: tensors into networks; conv/pool/dense layers with exact
//!   backward passes and a softmax cross-entropy head.
//! * [`optim`]: plain SGD and Adam.
//! * [`stats`]: streaming per-parameter mean/variance over a fine-tuning
//!   trajectory (Welford updates, f64 accumulators).
//! * [`resample`]: turn trajectory statistics back into weights, either the
//!   running mean or Gaussian draws, plus probability-averaging ensembles.
//! * [`data`]: IDX-format MNIST parsing, deterministic shuffled batching
//!   and a checksum-verified fetch helper.
//! * [`checkpoint`]: a small binary container for named tensors.
//! * [`harness`]: train/fine-tune/evaluate orchestration and the
//!   learning-rate grid runner with CSV reporting.
//!
//! Everything random is driven by explicitly derived seeds
//! (see [`rng::derive_seed`]); two runs with the same configuration and
//! base seed produce identical results, including CSV bytes in smoke mode.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Param, ParamStore, Tensor};
