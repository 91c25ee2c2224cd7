//! Frequency-split residual adapters on a frozen four-stage segmentation
//! backbone, trained with an uncertainty-weighted mean teacher.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod semisup;
pub mod spectral;

pub use error::{Error, FormatError, Result};
