//! Forecasting with learnable multi-scale Daubechies-2 wavelet mixing.
//!
//! The crate is organised bottom-up:
//!
//! * [`dwt`] – the classical periodized DB2 transform, used as an oracle.
//! * [`wavelet`] – learnable multi-head, multi-level filter banks.
//! * [`nn`] / [`model`] – the forecaster and its exact reverse pass.
//! * [`checkpoint`] – portable parameter files.
//! * [`train`] – AdamW, learning-rate decay, early stopping, metrics.
//! * [`data`] – CSV ingestion, splits, scaling, windowing, synthetic series.

pub mod checkpoint;
pub mod data;
pub mod dwt;
pub mod error;
pub mod model;
pub mod nn;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
