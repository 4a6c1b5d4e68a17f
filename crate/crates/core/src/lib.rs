//! Video movement recognition from sampled frames.
//!
//! The pipeline is: uniform frame sampling and normalization ([`videoio`]),
//! a per-frame feature extractor applied over time ([`extractors`]), an LSTM
//! over the frame features followed by temporal attention pooling and a
//! softmax classifier ([`model`]), all trained with Adam ([`training`]) and
//! scored with the usual classification metrics ([`metrics`]).
//!
//! Every layer in [`nn`] carries a hand-written backward pass. The
//! [`gradcheck`] module compares those against central finite differences.

pub mod config;
pub mod dataset;
pub mod error;
pub mod extractors;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod videoio;

mod binio;

pub use binio::write_atomic;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
