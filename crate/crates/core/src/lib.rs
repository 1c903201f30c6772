//! Hybrid analog/digital beamforming for multi-user MISO downlinks.
//!
//! The crate couples a small reverse-mode autodiff engine with a convolutional
//! network that maps noisy channel estimates to a hybrid precoder (fully connected,
//! fixed-subarray or dynamic-subarray), plus classical baselines, a synthetic
//! clustered channel generator and the training/evaluation pipeline.

pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod net;
pub mod persist;
pub mod precoding;
pub mod trainer;

pub use error::{Error, Result};
