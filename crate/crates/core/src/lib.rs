//! Online ensembles of distance-aware regressors for drifting shot streams.
//!
//! Each ensemble member is a convolutional feature network topped with a
//! random-Fourier-feature Gaussian-process head that returns a mean and a
//! calibrated standard deviation in a single pass. Members fine-tune on
//! rolling buffers of different lengths, and their predictions are fused by
//! inverse-variance weighting.

pub mod calibration;
pub mod dgpa;
pub mod diffnet;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod runner;
pub mod seed;
pub mod stream;

pub use error::{Error, Result};
