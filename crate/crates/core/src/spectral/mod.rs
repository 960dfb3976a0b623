//! Frequency grid, Fourier synthesis operator, signal conditioning and pulse
//! rate estimation.

pub mod conditioning;
pub mod filter;
pub mod grid;
pub mod operator;
pub mod rate;

pub use conditioning::{ac_dc_normalize, window_stream, Conditioning, WindowPlan, WindowedSignal};
pub use filter::{bandpass_filter, Bandpass};
pub use grid::{FrequencyGrid, DEFAULT_F_HI, DEFAULT_F_LO, DEFAULT_N_BINS};
pub use operator::{SynthesisOperator, SynthesisScaling};
pub use rate::{
    estimate_pulse_rate_spectral, estimate_pulse_rate_timedomain, PulseRateEstimate, SpectralCoefficients,
    TimeDomainEstimator, DEFAULT_OVERSAMPLE,
};
