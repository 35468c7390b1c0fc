//! On-demand test-time adaptation for batch-normalised classifiers.
//!
//! The runtime watches per-sample prediction entropy, and only when its
//! moving average rises past a baseline does it adapt: it restores the BN
//! snapshot whose stored domain feature is closest to the incoming data,
//! refreshes BN statistics with forward passes, then tunes BN affine
//! parameters on confident samples.

pub mod adapter;
pub mod batchnorm;
pub mod config;
pub mod detector;
pub mod error;
pub mod harness;
pub mod io;
pub mod kmeans;
pub mod meter;
pub mod nn;
pub mod oracle;
pub mod pool;
pub mod stream;
pub mod tensor;

pub use error::{Result, TtaError};
