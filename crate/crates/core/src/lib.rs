//! Wavelet-residual detection of adversarial patch attacks, end to end:
//! data handling, a critically sampled wavelet denoiser, small convolutional
//! networks with exact manual gradients, a joint classifier–detector decision
//! rule, a suite of patch attacks (white-box, black-box, and adaptive), and
//! the evaluation harnesses that tie them together.
//!
//! Everything is deterministic given a seed, runs on a single CPU core, and
//! uses `f64` throughout so gradient checks against finite differences are
//! meaningful.

pub mod attacks;
pub mod cifar;
pub mod csvgrid;
pub mod data;
pub mod denoise;
pub mod detection;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod rng;
pub mod wavelet;

pub use error::{Error, Result};
