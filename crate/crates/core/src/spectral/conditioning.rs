use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::filter::Bandpass;
use crate::error::{Error, Result};

/// Conditioned window of region time series (`S x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSignal {
    pub data: Array2<f64>,
    pub sample_rate: f64,
    pub start_time: f64,
}

impl WindowedSignal {
    pub fn new(data: Array2<f64>, sample_rate: f64, start_time: f64) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("windowed signal".into()));
        }
        Ok(Self {
            data,
            sample_rate,
            start_time,
        })
    }

    pub fn samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn channel_count(&self) -> usize {
        self.data.ncols()
    }
}

/// Per-channel `(z - mean) / mean`.
pub fn ac_dc_normalize(series: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = series.to_owned();
    for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let mean = col.sum() / col.len().max(1) as f64;
        if mean.abs() < 1e-12 || !mean.is_finite() {
            return Err(Error::DegenerateChannel { channel: k, mean });
        }
        col.mapv_inplace(|v| (v - mean) / mean);
    }
    Ok(out)
}

/// Window geometry in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub window: usize,
    pub stride: usize,
}

impl WindowPlan {
    pub fn from_seconds(window_s: f64, stride_s: f64, sample_rate: f64) -> Result<Self> {
        let window = (window_s * sample_rate).round() as usize;
        let stride = (stride_s * sample_rate).round() as usize;
        if window == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "window {window_s} s / stride {stride_s} s round to zero frames at {sample_rate} Hz"
            )));
        }
        Ok(Self { window, stride })
    }

    pub fn count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.stride + 1
        }
    }

    pub fn starts(&self, len: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.count(len)).map(move |i| i * self.stride)
    }
}

/// Cuts a conditioned `T x K` series into windows starting at `0, stride,
/// 2*stride, ...`; the trailing partial window is dropped.
pub fn window_stream(
    series: ArrayView2<'_, f64>,
    sample_rate: f64,
    window_s: f64,
    stride_s: f64,
) -> Result<Vec<WindowedSignal>> {
    let plan = WindowPlan::from_seconds(window_s, stride_s, sample_rate)?;
    if plan.count(series.nrows()) == 0 {
        log::warn!(
            "series of {} frames is shorter than one {window_s} s window",
            series.nrows()
        );
    }
    plan.starts(series.nrows())
        .map(|start| {
            WindowedSignal::new(
                series.slice(s![start..start + plan.window, ..]).to_owned(),
                sample_rate,
                start as f64 / sample_rate,
            )
        })
        .collect()
}

/// Parameters of the conditioning chain applied to whole recordings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub order: usize,
    pub f_lo: f64,
    pub f_hi: f64,
    /// Seconds dropped from each end after filtering.
    pub edge_trim_s: f64,
}

impl Default for Conditioning {
    fn default() -> Self {
        Self {
            order: super::filter::DEFAULT_ORDER,
            f_lo: super::grid::DEFAULT_F_LO,
            f_hi: super::grid::DEFAULT_F_HI,
            edge_trim_s: 0.0,
        }
    }
}

impl Conditioning {
    /// AC/DC normalization on the raw intensities, then zero-phase bandpass,
    /// then edge trimming.
    pub fn apply(&self, raw: ArrayView2<'_, f64>, sample_rate: f64) -> Result<Array2<f64>> {
        let normalized = ac_dc_normalize(raw)?;
        let filter = Bandpass::butterworth(self.order, self.f_lo, self.f_hi, sample_rate)?;
        let filtered = filter.filtfilt_columns(normalized.view())?;
        let trim = (self.edge_trim_s * sample_rate).round() as usize;
        if 2 * trim >= filtered.nrows() {
            return Err(Error::Config(format!(
                "edge trim of {} s leaves nothing of a {} frame series",
                self.edge_trim_s,
                filtered.nrows()
            )));
        }
        Ok(filtered.slice(s![trim..filtered.nrows() - trim, ..]).to_owned())
    }
}
