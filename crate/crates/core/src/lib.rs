//! Pulse-wave recovery from multi-channel noisy time series.
//!
//! A window `Z` (`S x K`) is modelled as `Re(F^-1 X) + E`: band-limited
//! Fourier coefficients `X` plus a non-pulsatile residual `E`. Recovery runs
//! proximal-gradient iterations in which learned denoisers replace the
//! proximal operators, either unrolled for a fixed number of steps or solved
//! to a fixed point.

pub mod algorithms;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod fixed_point;
pub mod selftest;
pub mod signal_model;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
