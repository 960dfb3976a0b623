//! Synthetic multi-region recordings with a known pulse.
//!
//! Each subject gets a heart-rate trajectory (a smooth random walk kept inside
//! the configured range), a pulse waveform built from harmonics of the
//! integrated phase, and `K` channels of `gain * pulse + 1/f noise + motion
//! bursts + DC`. The noise is scaled per channel to the configured SNR against
//! that channel's pulse component; bursts come on top.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{DEFAULT_F_HI, DEFAULT_F_LO};

use super::records::LabeledRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub duration_s: f64,
    pub fs: f64,
    pub k_channels: usize,
    pub hr_range_bpm: [f64; 2],
    /// Number of cosine components, the fundamental included.
    pub n_harmonics: usize,
    pub harmonic_decay: f64,
    /// Standard deviation of the per-second heart-rate increment.
    pub hr_drift_bpm_per_s: f64,
    pub noise_snr_db: f64,
    pub motion_burst_rate_per_min: f64,
    /// Burst peak amplitude relative to the pulse RMS of the channel.
    pub motion_amplitude: f64,
    /// Fraction of noise power shared by all channels.
    pub noise_shared_fraction: f64,
    /// Lower corner of the `1/f` noise spectrum; flat below it.
    pub noise_corner_hz: f64,
    pub dc_level: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            duration_s: 120.0,
            fs: 25.0,
            k_channels: 5,
            hr_range_bpm: [50.0, 130.0],
            n_harmonics: 2,
            harmonic_decay: 0.5,
            hr_drift_bpm_per_s: 0.5,
            noise_snr_db: -5.0,
            motion_burst_rate_per_min: 6.0,
            motion_amplitude: 100.0,
            noise_shared_fraction: 0.5,
            noise_corner_hz: 0.5,
            dc_level: 1000.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.hr_range_bpm;
        if !(lo < hi) || lo < 60.0 * DEFAULT_F_LO - 1e-9 || hi > 60.0 * DEFAULT_F_HI + 1e-9 {
            return Err(Error::Config(format!(
                "heart-rate range [{lo}, {hi}] bpm must lie inside [{}, {}]",
                60.0 * DEFAULT_F_LO,
                60.0 * DEFAULT_F_HI
            )));
        }
        if !(self.fs > 2.0 * DEFAULT_F_HI) {
            return Err(Error::Config(format!(
                "fs {} Hz must exceed {} Hz",
                self.fs,
                2.0 * DEFAULT_F_HI
            )));
        }
        if self.n_subjects == 0 || self.k_channels == 0 || self.n_harmonics == 0 {
            return Err(Error::Config(
                "subjects, channels and harmonics must be at least 1".into(),
            ));
        }
        if !(self.duration_s > 0.0) || !self.noise_snr_db.is_finite() {
            return Err(Error::Config("duration must be positive and the SNR finite".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_shared_fraction) {
            return Err(Error::Config("noise_shared_fraction must lie in [0, 1]".into()));
        }
        if !(self.dc_level > 0.0) || !(self.motion_burst_rate_per_min >= 0.0) || !(self.motion_amplitude >= 0.0) {
            return Err(Error::Config(
                "dc_level must be positive; burst rate and amplitude nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }
}

/// Generated record plus its noise-free parts, for calibration checks.
#[derive(Debug, Clone)]
pub struct SyntheticParts {
    pub record: LabeledRecord,
    /// `gain_k * pulse` per channel (`T x K`).
    pub pulse_components: Array2<f64>,
    /// Colored noise per channel, bursts excluded.
    pub noise: Array2<f64>,
    pub bursts: Array2<f64>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<LabeledRecord>> {
    Ok(generate_synthetic_parts(cfg)?.into_iter().map(|p| p.record).collect())
}

pub fn generate_synthetic_parts(cfg: &SyntheticConfig) -> Result<Vec<SyntheticParts>> {
    cfg.validate()?;
    (0..cfg.n_subjects)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            subject(cfg, i, &mut rng)
        })
        .collect()
}

fn rms(x: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = x.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (s / n.max(1) as f64).sqrt()
}

/// Heart rate per frame: a random walk on a one-second lattice, reflected at
/// the range ends and linearly interpolated.
fn heart_rate(cfg: &SyntheticConfig, t: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let [lo, hi] = cfg.hr_range_bpm;
    let knots = (t as f64 / cfg.fs).ceil() as usize + 2;
    let margin = 0.1 * (hi - lo);
    let mut hr = Vec::with_capacity(knots);
    let mut h = rng.random_range(lo + margin..hi - margin);
    for _ in 0..knots {
        hr.push(h);
        h += cfg.hr_drift_bpm_per_s * rng.sample::<f64, _>(StandardNormal);
        if h < lo {
            h = 2.0 * lo - h;
        }
        if h > hi {
            h = 2.0 * hi - h;
        }
        h = h.clamp(lo, hi);
    }
    Array1::from_shape_fn(t, |i| {
        let s = i as f64 / cfg.fs;
        let k = s.floor() as usize;
        let w = s - k as f64;
        (1.0 - w) * hr[k] + w * hr[k + 1]
    })
}

/// Unit-RMS noise with power spectrum `1 / max(f, corner)`.
fn pink_noise(t: usize, fs: f64, corner: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = (0..t)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    planner.plan_fft_forward(t).process(&mut buf);
    for (i, c) in buf.iter_mut().enumerate() {
        let k = i.min(t - i);
        if k == 0 {
            *c = Complex64::new(0.0, 0.0);
            continue;
        }
        let f = k as f64 * fs / t as f64;
        *c /= f.max(corner).sqrt();
    }
    planner.plan_fft_inverse(t).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let r = rms(out.iter().copied());
    out.into_iter().map(|v| v / r.max(1e-300)).collect()
}

/// Sum of Hann-enveloped random-walk transients at Poisson times.
fn motion_bursts(cfg: &SyntheticConfig, t: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; t];
    if cfg.motion_burst_rate_per_min == 0.0 || cfg.motion_amplitude == 0.0 {
        return out;
    }
    let gap = Exp::new(cfg.motion_burst_rate_per_min / 60.0).expect("positive rate");
    let mut at = gap.sample(rng);
    let duration = t as f64 / cfg.fs;
    while at < duration {
        let len_s: f64 = rng.random_range(1.0..4.0);
        let len = ((len_s * cfg.fs) as usize).max(2);
        let start = (at * cfg.fs) as usize;
        let mut walk = Vec::with_capacity(len);
        let mut w = 0.0;
        for _ in 0..len {
            w += rng.sample::<f64, _>(StandardNormal);
            walk.push(w);
        }
        let peak = walk.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let amp: f64 = rng.random_range(0.5..1.0) * cfg.motion_amplitude;
        for (j, v) in walk.iter().enumerate() {
            let i = start + j;
            if i >= t {
                break;
            }
            let env = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / (len - 1) as f64).cos();
            out[i] += amp * env * v / peak;
        }
        at += len_s + gap.sample(rng);
    }
    out
}

fn subject(cfg: &SyntheticConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<SyntheticParts> {
    let t = cfg.frames();
    let k = cfg.k_channels;
    let hr = heart_rate(cfg, t, rng);
    let phases: Vec<f64> = (0..cfg.n_harmonics)
        .map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI))
        .collect();
    let mut phase = 0.0;
    let pulse = Array1::from_shape_fn(t, |i| {
        let p = phase;
        phase += 2.0 * std::f64::consts::PI * hr[i] / 60.0 / cfg.fs;
        phases
            .iter()
            .enumerate()
            .map(|(h, ph)| cfg.harmonic_decay.powi(h as i32) * ((h + 1) as f64 * p + ph).cos())
            .sum::<f64>()
    });
    let pulse_rms = rms(pulse.iter().copied());

    let shared = pink_noise(t, cfg.fs, cfg.noise_corner_hz, rng);
    let burst_shape = motion_bursts(cfg, t, rng);
    let rho = cfg.noise_shared_fraction;
    let snr = 10f64.powf(cfg.noise_snr_db / 10.0);

    let mut pulse_components = Array2::zeros((t, k));
    let mut noise = Array2::zeros((t, k));
    let mut bursts = Array2::zeros((t, k));
    let mut regions = Array2::zeros((t, k));
    for c in 0..k {
        let gain: f64 = rng.random_range(0.5..1.5);
        let burst_gain: f64 = rng.random_range(0.5..1.5);
        let own = pink_noise(t, cfg.fs, cfg.noise_corner_hz, rng);
        let mixed: Vec<f64> = shared
            .iter()
            .zip(&own)
            .map(|(s, o)| rho.sqrt() * s + (1.0 - rho).sqrt() * o)
            .collect();
        let signal_power = (gain * pulse_rms).powi(2);
        let noise_scale = (signal_power / snr).sqrt() / rms(mixed.iter().copied()).max(1e-300);
        let dc = cfg.dc_level * rng.random_range(0.8..1.2);
        for i in 0..t {
            let p = gain * pulse[i];
            let n = noise_scale * mixed[i];
            let b = burst_gain * gain * pulse_rms * burst_shape[i];
            pulse_components[[i, c]] = p;
            noise[[i, c]] = n;
            bursts[[i, c]] = b;
            regions[[i, c]] = dc + p + n + b;
        }
    }
    let record = LabeledRecord {
        regions,
        ppg: pulse,
        hr_series: Some(hr),
        fs: cfg.fs,
        subject_id: format!("subject_{index:03}"),
    };
    record.validate()?;
    Ok(SyntheticParts {
        record,
        pulse_components,
        noise,
        bursts,
    })
}
