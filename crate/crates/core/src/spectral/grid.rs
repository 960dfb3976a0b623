use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_F_LO: f64 = 0.7;
pub const DEFAULT_F_HI: f64 = 2.5;
pub const DEFAULT_N_BINS: usize = 512;

/// Uniform frequency grid over the pulse band.
///
/// Bin `n` sits at `f_lo + n * (f_hi - f_lo) / (n_bins - 1)`; a single-bin grid
/// sits at `f_lo`. The grid must be at least as fine as the natural resolution
/// `sample_rate / window_len` of a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub f_lo: f64,
    pub f_hi: f64,
    pub n_bins: usize,
    pub sample_rate: f64,
    pub window_len: usize,
}

impl FrequencyGrid {
    pub fn new(f_lo: f64, f_hi: f64, n_bins: usize, sample_rate: f64, window_len: usize) -> Result<Self> {
        let grid = Self {
            f_lo,
            f_hi,
            n_bins,
            sample_rate,
            window_len,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Default pulse-band grid (0.7-2.5 Hz, 512 bins).
    pub fn pulse_band(sample_rate: f64, window_len: usize) -> Result<Self> {
        Self::new(DEFAULT_F_LO, DEFAULT_F_HI, DEFAULT_N_BINS, sample_rate, window_len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("invalid frequency grid: {msg}")));
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad(format!("sample rate {} must be positive", self.sample_rate));
        }
        if !(self.f_lo > 0.0 && self.f_lo < self.f_hi) {
            return bad(format!("need 0 < f_lo < f_hi, got [{}, {}]", self.f_lo, self.f_hi));
        }
        if self.f_hi >= self.sample_rate / 2.0 {
            return bad(format!(
                "f_hi {} must lie below Nyquist {}",
                self.f_hi,
                self.sample_rate / 2.0
            ));
        }
        if self.window_len == 0 || self.n_bins == 0 {
            return bad("window_len and n_bins must be positive".into());
        }
        let natural = ((self.f_hi - self.f_lo) * self.window_len as f64 / self.sample_rate).ceil();
        if (self.n_bins as f64) < natural {
            return bad(format!(
                "{} bins undersample the band (need at least {natural})",
                self.n_bins
            ));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        if self.n_bins > 1 {
            (self.f_hi - self.f_lo) / (self.n_bins - 1) as f64
        } else {
            0.0
        }
    }

    pub fn frequency(&self, bin: usize) -> f64 {
        self.f_lo + bin as f64 * self.spacing()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_bins).map(|n| self.frequency(n)).collect()
    }

    /// Number of real rows used to store one complex coefficient column.
    pub fn coefficient_rows(&self) -> usize {
        2 * self.n_bins
    }
}
