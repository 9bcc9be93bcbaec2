//! Decoupled-attention ranking at desk scale.
//!
//! The crate provides:
//! - a minimal dense tensor kernel with tape-based reverse-mode
//!   differentiation ([`tensor`], [`tape`], [`ops`]);
//! - masked multi-head attention and its factored cross-attention form
//!   ([`attention`]);
//! - five ranking architectures behind one scoring interface ([`model`]);
//! - the three-stage cached inference pipeline ([`pipeline`]);
//! - synthetic data, training, and ranking metrics ([`data`], [`train`],
//!   [`metrics`]);
//! - latency/FLOP sweep harness with SVG plots ([`bench`], [`svg`]);
//! - SVD-based spectral analysis of trained attention ([`spectral`]).

pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod scalar;
pub mod spectral;
pub mod svg;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::Ctx;
pub use tensor::Tensor;
