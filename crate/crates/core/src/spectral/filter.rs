use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 5;

/// One second-order section, direct form II transposed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    /// `a[0]` is implicitly one.
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Steady-state delay values for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let r1 = b1 - a1 * b0;
        let r2 = b2 - a2 * b0;
        let z1 = (r1 + r2) / (1.0 + a1 + a2);
        [z1, r2 - a2 * z1]
    }
}

/// Digital Butterworth bandpass as a cascade of biquads.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandpass {
    pub sections: Vec<Biquad>,
    pub sample_rate: f64,
}

impl Bandpass {
    /// Bilinear-transform design with prewarped band edges. `order` is the
    /// order of the lowpass prototype, so the digital filter has `2*order`
    /// poles and `order` sections.
    pub fn butterworth(order: usize, f_lo: f64, f_hi: f64, sample_rate: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("bandpass order must be positive".into()));
        }
        if !(sample_rate > 0.0 && f_lo > 0.0 && f_lo < f_hi && f_hi < sample_rate / 2.0) {
            return Err(Error::Config(format!(
                "bandpass [{f_lo}, {f_hi}] Hz must satisfy 0 < f_lo < f_hi < Nyquist ({})",
                sample_rate / 2.0
            )));
        }
        let fs2 = 2.0 * sample_rate;
        let w1 = fs2 * (PI * f_lo / sample_rate).tan();
        let w2 = fs2 * (PI * f_hi / sample_rate).tan();
        let bw = w2 - w1;
        let w0_sq = w1 * w2;

        let mut analog = Vec::with_capacity(2 * order);
        for k in 0..order {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta) * (bw / 2.0);
            let root = (p * p - w0_sq).sqrt();
            analog.push(p + root);
            analog.push(p - root);
        }
        // analog zeros: `order` of them at the origin
        let mut gain = Complex64::new((bw * fs2).powi(order as i32), 0.0);
        let mut digital = Vec::with_capacity(analog.len());
        for p in analog {
            let d = (fs2 + p) / (fs2 - p);
            gain /= fs2 - p;
            digital.push(d);
        }

        let mut upper: Vec<Complex64> = digital.iter().copied().filter(|p| p.im > 1e-12).collect();
        let mut real: Vec<f64> = digital.iter().filter(|p| p.im.abs() <= 1e-12).map(|p| p.re).collect();
        upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        real.sort_by(f64::total_cmp);
        if real.len() % 2 != 0 {
            return Err(Error::Numeric("unpaired real pole in bandpass design".into()));
        }
        let mut sections: Vec<Biquad> = upper
            .iter()
            .map(|p| Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-2.0 * p.re, p.norm_sqr()],
            })
            .collect();
        for pair in real.chunks(2) {
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-(pair[0] + pair[1]), pair[0] * pair[1]],
            });
        }
        let k = gain.re;
        for c in sections[0].b.iter_mut() {
            *c *= k;
        }
        Ok(Self { sections, sample_rate })
    }

    /// Magnitude response at `freq` Hz.
    pub fn magnitude(&self, freq: f64) -> f64 {
        let z = Complex64::from_polar(1.0, -2.0 * PI * freq / self.sample_rate);
        self.sections
            .iter()
            .map(|s| {
                let num = s.b[0] + s.b[1] * z + s.b[2] * z * z;
                let den = 1.0 + s.a[0] * z + s.a[1] * z * z;
                (num / den).norm()
            })
            .product()
    }

    /// Edge padding used by [`filtfilt`](Self::filtfilt).
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    fn run(&self, x: &mut [f64]) {
        let mut scale = x[0];
        let mut states: Vec<[f64; 2]> = Vec::with_capacity(self.sections.len());
        for s in &self.sections {
            let zi = s.step_state();
            states.push([zi[0] * scale, zi[1] * scale]);
            scale *= s.dc_gain();
        }
        for v in x.iter_mut() {
            let mut u = *v;
            for (s, z) in self.sections.iter().zip(states.iter_mut()) {
                let y = s.b[0] * u + z[0];
                z[0] = s.b[1] * u - s.a[0] * y + z[1];
                z[1] = s.b[2] * u - s.a[1] * y;
                u = y;
            }
            *v = u;
        }
    }

    /// Zero-phase forward-backward filtering of one channel with odd
    /// reflection at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = self.pad_len();
        if x.len() <= pad {
            return Err(Error::Config(format!(
                "series of {} samples is too short for zero-phase filtering (need more than {pad})",
                x.len()
            )));
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }

    /// Column-wise [`filtfilt`](Self::filtfilt) over a `T x K` series.
    pub fn filtfilt_columns(&self, series: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(series.raw_dim());
        for (src, mut dst) in series.axis_iter(Axis(1)).zip(out.axis_iter_mut(Axis(1))) {
            let col: Vec<f64> = src.iter().copied().collect();
            let filtered = self.filtfilt(&col)?;
            dst.iter_mut().zip(filtered).for_each(|(d, v)| *d = v);
        }
        Ok(out)
    }
}

/// Butterworth bandpass applied forward-backward to every channel.
pub fn bandpass_filter(
    raw: ArrayView2<'_, f64>,
    order: usize,
    f_lo: f64,
    f_hi: f64,
    sample_rate: f64,
) -> Result<Array2<f64>> {
    Bandpass::butterworth(order, f_lo, f_hi, sample_rate)?.filtfilt_columns(raw)
}
