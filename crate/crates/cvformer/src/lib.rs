//! Dual-view transformer for functional brain-network classification.
//!
//! A subject's RoI time series becomes a functional connectivity matrix; the
//! model reads it twice, correlation rows as node tokens and a thresholded
//! adjacency as patch tokens, fuses the two branches through CLS-query
//! cross-attention, and classifies from the fused scores. Everything runs on
//! a self-contained reverse-mode autodiff tape; no external numerical
//! libraries are involved.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod gradcheck;
pub mod ingest;
pub mod kernels;
pub mod macs;
pub mod model;
pub mod params;
pub mod runconfig;
pub mod scalar;
pub mod tape;
pub mod tokens;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
