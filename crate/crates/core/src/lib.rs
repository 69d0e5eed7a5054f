//! A fully state-driven sequence model.
//!
//! Each layer pairs an RWKV-style time-mixing block with a meta-state layer
//! in place of the feed-forward network. The meta-state layer encodes its
//! input through the current WKV state (`z = ReLU(x · wkv)`), accumulates
//! `zᵀz` under the same decaying, key-removing transition as the WKV state,
//! and projects `z · msᵀ` back to the model width. Inference carries a
//! fixed-size state, so cost grows linearly with sequence length.
//!
//! The crate also provides function-preserving growth of the head width,
//! training and evaluation, a binary checkpoint format, a softmax-attention
//! baseline and a sequence-length benchmark.

pub mod autodiff;
pub mod baseline;
pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod meta_state;
pub mod model;
pub mod norm;
pub mod optim;
pub mod params;
pub mod scaling;
pub mod tensor;
pub mod time_mix;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{InferenceState, Model, Sampling};
pub use params::ParamStore;
pub use tensor::{DType, Real, Tensor};
