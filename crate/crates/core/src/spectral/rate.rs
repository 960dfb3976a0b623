use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::grid::FrequencyGrid;
use crate::error::{Error, Result};

pub const DEFAULT_OVERSAMPLE: usize = 100;

/// Pulse-band coefficients `X` (`N x K`, complex) on a frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoefficients {
    pub data: Array2<Complex64>,
    pub grid: FrequencyGrid,
}

impl SpectralCoefficients {
    pub fn new(data: Array2<Complex64>, grid: FrequencyGrid) -> Result<Self> {
        if data.nrows() != grid.n_bins {
            return Err(Error::dims("spectral coefficients", grid.n_bins, data.nrows()));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Numeric("spectral coefficients".into()));
        }
        Ok(Self { data, grid })
    }

    /// From stacked real storage (`2N x K`: real parts over imaginary parts).
    pub fn from_stacked(stacked: ArrayView2<'_, f64>, grid: FrequencyGrid) -> Result<Self> {
        let n = grid.n_bins;
        if stacked.nrows() != 2 * n {
            return Err(Error::dims("stacked coefficients", 2 * n, stacked.nrows()));
        }
        let data = Array2::from_shape_fn((n, stacked.ncols()), |(i, k)| {
            Complex64::new(stacked[[i, k]], stacked[[n + i, k]])
        });
        Self::new(data, grid)
    }

    pub fn to_stacked(&self) -> Array2<f64> {
        let n = self.data.nrows();
        Array2::from_shape_fn((2 * n, self.data.ncols()), |(i, k)| {
            if i < n {
                self.data[[i, k]].re
            } else {
                self.data[[i - n, k]].im
            }
        })
    }
}

/// Dominant pulse rate with the power spectrum it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseRateEstimate {
    pub bpm: f64,
    pub peak_bin: usize,
    pub spectrum: Vec<f64>,
}

/// Index of the first maximum (lowest index wins exact ties).
fn first_argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Peak of `r_n = sum_k |X_{n,k}|^2` over the coefficient grid.
pub fn estimate_pulse_rate_spectral(x: &SpectralCoefficients) -> Result<PulseRateEstimate> {
    let spectrum: Vec<f64> = x
        .data
        .axis_iter(Axis(0))
        .map(|row| row.iter().map(|c| c.norm_sqr()).sum())
        .collect();
    let (peak_bin, peak) = first_argmax(spectrum.iter().copied()).ok_or(Error::NoSignal)?;
    if peak <= 0.0 {
        return Err(Error::NoSignal);
    }
    Ok(PulseRateEstimate {
        bpm: 60.0 * x.grid.frequency(peak_bin),
        peak_bin,
        spectrum,
    })
}

/// Hann-windowed, zero-padded periodogram peak search inside a band.
/// Holds an FFT plan so repeated calls on equal-length windows are cheap.
pub struct TimeDomainEstimator {
    samples: usize,
    fft_len: usize,
    sample_rate: f64,
    f_lo: f64,
    f_hi: f64,
    hann: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for TimeDomainEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TimeDomainEstimator")
            .field("samples", &self.samples)
            .field("fft_len", &self.fft_len)
            .field("band", &(self.f_lo, self.f_hi))
            .finish()
    }
}

impl TimeDomainEstimator {
    pub fn new(samples: usize, fft_len: usize, sample_rate: f64, f_lo: f64, f_hi: f64) -> Result<Self> {
        if fft_len < samples || samples < 2 {
            return Err(Error::Config(format!(
                "FFT length {fft_len} must be at least the signal length {samples} (>= 2)"
            )));
        }
        if !(f_lo >= 0.0 && f_lo < f_hi && f_hi <= sample_rate / 2.0) {
            return Err(Error::Config(format!(
                "search band [{f_lo}, {f_hi}] Hz is invalid at {sample_rate} Hz"
            )));
        }
        // symmetric Hann
        let hann = (0..samples)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (samples - 1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(fft_len);
        Ok(Self {
            samples,
            fft_len,
            sample_rate,
            f_lo,
            f_hi,
            hann,
            fft,
        })
    }

    pub fn with_oversample(samples: usize, oversample: usize, sample_rate: f64, f_lo: f64, f_hi: f64) -> Result<Self> {
        Self::new(samples, samples * oversample, sample_rate, f_lo, f_hi)
    }

    pub fn bin_width(&self) -> f64 {
        self.sample_rate / self.fft_len as f64
    }

    pub fn estimate(&self, z: ArrayView2<'_, f64>) -> Result<PulseRateEstimate> {
        if z.nrows() != self.samples {
            return Err(Error::dims("time-domain estimator", self.samples, z.nrows()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("recovered signal".into()));
        }
        let half = self.fft_len / 2 + 1;
        let mut spectrum = vec![0.0; half];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        let mut energy = 0.0;
        for col in z.axis_iter(Axis(1)) {
            let mean = col.sum() / self.samples as f64;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, v) in col.iter().enumerate() {
                energy += v * v;
                buf[i] = Complex64::new((v - mean) * self.hann[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (s, c) in spectrum.iter_mut().zip(&buf) {
                *s += c.norm_sqr();
            }
        }
        let lo = (self.f_lo / self.bin_width()).ceil() as usize;
        let hi = ((self.f_hi / self.bin_width()).floor() as usize).min(half - 1);
        if lo > hi {
            return Err(Error::Config("search band holds no FFT bin".into()));
        }
        let (offset, peak) = first_argmax(spectrum[lo..=hi].iter().copied()).ok_or(Error::NoSignal)?;
        if !(peak > 1e-20 * energy * self.samples as f64) {
            return Err(Error::NoSignal);
        }
        let peak_bin = lo + offset;
        Ok(PulseRateEstimate {
            bpm: 60.0 * peak_bin as f64 * self.bin_width(),
            peak_bin,
            spectrum,
        })
    }
}

/// One-shot convenience around [`TimeDomainEstimator`] with `L = oversample * S`.
pub fn estimate_pulse_rate_timedomain(
    z: ArrayView2<'_, f64>,
    sample_rate: f64,
    oversample: usize,
    f_lo: f64,
    f_hi: f64,
) -> Result<PulseRateEstimate> {
    TimeDomainEstimator::with_oversample(z.nrows(), oversample, sample_rate, f_lo, f_hi)?.estimate(z)
}
