//! Heart-rate metrics, Bland-Altman statistics and the evaluation runner.

use std::fmt::Write as _;

use ndarray::{concatenate, Array2, Axis};
use serde::Serialize;

use crate::algorithms::{recover, AlgorithmConfig, Denoisers, RecoveryResult};
use crate::data::{eval_segments, raw_segment_bpm, segment_bpm, ConditionedRecord, Protocol, WindowConfig};
use crate::error::{Error, Result};
use crate::signal_model::SignalModel;

/// Absolute error bound of the PTE6 score (strict).
pub const PTE_BOUND_BPM: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mae_bpm: f64,
    pub rmse_bpm: f64,
    pub pte6_pct: f64,
    /// `None` when either side has zero variance or fewer than two pairs.
    pub pearson_rho: Option<f64>,
    pub n_windows: usize,
    /// `(gt_bpm, pred_bpm)`.
    pub per_window: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn rho_text(&self) -> String {
        match self.pearson_rho {
            Some(r) => format!("{r:.4}"),
            None => "undefined".into(),
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "MAE {:.3} bpm, RMSE {:.3} bpm, PTE6 {:.2}%, rho {}, n = {}",
            self.mae_bpm,
            self.rmse_bpm,
            self.pte6_pct,
            self.rho_text(),
            self.n_windows
        )
    }
}

pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len();
    if n < 2 {
        return None;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn compute_metrics(pairs: &[(f64, f64)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Config("metrics need at least one window".into()));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::Numeric("heart-rate pairs".into()));
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(g, p)| (p - g).abs()).sum::<f64>() / n;
    let rmse = (pairs.iter().map(|(g, p)| (p - g) * (p - g)).sum::<f64>() / n).sqrt();
    let within = pairs.iter().filter(|(g, p)| (p - g).abs() < PTE_BOUND_BPM).count();
    Ok(MetricsReport {
        mae_bpm: mae,
        rmse_bpm: rmse,
        pte6_pct: 100.0 * within as f64 / n,
        pearson_rho: pearson(pairs),
        n_windows: pairs.len(),
        per_window: pairs.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlandAltmanStats {
    pub mean_diff_bpm: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Differences `pred - gt`; limits at the mean plus or minus 1.96 sample
/// standard deviations (zero spread for a single pair).
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltmanStats> {
    if pairs.is_empty() {
        return Err(Error::Config("Bland-Altman needs at least one pair".into()));
    }
    let n = pairs.len() as f64;
    let diffs: Vec<f64> = pairs.iter().map(|(g, p)| p - g).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = if pairs.len() > 1 {
        (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(BlandAltmanStats {
        mean_diff_bpm: mean,
        loa_low: mean - 1.96 * sd,
        loa_high: mean + 1.96 * sd,
    })
}

pub fn bland_altman_csv(pairs: &[(f64, f64)]) -> String {
    let mut out = String::from("gt_bpm,diff_bpm\n");
    for (g, p) in pairs {
        let _ = writeln!(out, "{g},{}", p - g);
    }
    out
}

/// One scored segment of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentScore {
    pub subject_id: String,
    pub start_s: f64,
    pub gt_bpm: f64,
    pub pred_bpm: f64,
}

/// Recovered waveforms of one record at non-overlapping windows.
#[derive(Debug, Clone)]
pub struct RecoveredRecord {
    pub subject_id: String,
    pub fs: f64,
    /// One `S x K` reconstruction per window, standardized per column.
    pub windows: Vec<Array2<f64>>,
    /// `|X|` per window (`N x K`).
    pub spectra: Vec<Array2<f64>>,
    /// Conditioned reference over the same span.
    pub ppg: ndarray::Array1<f64>,
}

impl RecoveredRecord {
    /// The reconstructions laid end to end (`(W * S) x K`).
    pub fn waveform(&self) -> Array2<f64> {
        let views: Vec<_> = self.windows.iter().map(|w| w.view()).collect();
        concatenate(Axis(0), &views).expect("windows share their channel count")
    }
}

fn recover_windows(
    model: &SignalModel,
    algo: &AlgorithmConfig,
    nets: &Denoisers,
    inputs: &[&Array2<f64>],
) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let k = inputs[0].ncols();
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let z = concatenate(Axis(1), &views).map_err(|e| Error::dims("window channels", k, e.to_string()))?;
    let RecoveryResult { x, reconstructed, .. } = recover(model, algo, nets, z.view())?;
    let n = x.nrows() / 2;
    Ok((0..inputs.len())
        .map(|w| {
            let cols = w * k..(w + 1) * k;
            let rec = reconstructed.slice(ndarray::s![.., cols.clone()]);
            let xs = x.slice(ndarray::s![.., cols]);
            let mag = Array2::from_shape_fn((n, k), |(i, c)| xs[[i, c]].hypot(xs[[n + i, c]]));
            (crate::training::standardize_columns(rec).0, mag)
        })
        .collect())
}

/// Runs recovery on every non-overlapping window of a record.
pub fn recover_record(
    model: &SignalModel,
    algo: &AlgorithmConfig,
    nets: &Denoisers,
    rec: &ConditionedRecord,
    cfg: &WindowConfig,
    batch: usize,
) -> Result<RecoveredRecord> {
    let segs = eval_segments(rec, Protocol::Plain, cfg)?;
    let inputs: Vec<&Array2<f64>> = segs.iter().map(|s| &s.inputs[0]).collect();
    let mut windows = Vec::with_capacity(inputs.len());
    let mut spectra = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        for (w, s) in recover_windows(model, algo, nets, chunk)? {
            windows.push(w);
            spectra.push(s);
        }
    }
    let len = windows.iter().map(|w| w.nrows()).sum::<usize>();
    Ok(RecoveredRecord {
        subject_id: rec.subject_id.clone(),
        fs: rec.fs,
        windows,
        spectra,
        ppg: rec.ppg.slice(ndarray::s![..len]).to_owned(),
    })
}

/// Scores recovered windows under a protocol. The reference rate of each
/// segment comes from the conditioned reference over the same span.
pub fn score_recovered(rec: &RecoveredRecord, protocol: Protocol, cfg: &WindowConfig) -> Result<Vec<SegmentScore>> {
    let per = protocol.windows_per_segment();
    let n_seg = rec.windows.len() / per;
    let mut out = Vec::with_capacity(n_seg);
    let mut offset = 0usize;
    for s in 0..n_seg {
        let group = &rec.windows[s * per..(s + 1) * per];
        let len: usize = group.iter().map(|w| w.nrows()).sum();
        let ppg = rec.ppg.slice(ndarray::s![offset..offset + len]);
        out.push(SegmentScore {
            subject_id: rec.subject_id.clone(),
            start_s: offset as f64 / rec.fs,
            gt_bpm: crate::data::reference_bpm(ppg, rec.fs, cfg)?,
            pred_bpm: segment_bpm(group, rec.fs, cfg)?,
        });
        offset += len;
    }
    Ok(out)
}

/// Turns segment scores into `(gt, pred)` pairs; the UBFC protocol averages
/// both sides per record.
pub fn protocol_pairs(scores: &[SegmentScore], protocol: Protocol) -> Vec<(f64, f64)> {
    match protocol {
        Protocol::Plain | Protocol::Mmse => scores.iter().map(|s| (s.gt_bpm, s.pred_bpm)).collect(),
        Protocol::Ubfc => {
            let mut out: Vec<(String, f64, f64, usize)> = Vec::new();
            for s in scores {
                match out.iter_mut().find(|e| e.0 == s.subject_id) {
                    Some(e) => {
                        e.1 += s.gt_bpm;
                        e.2 += s.pred_bpm;
                        e.3 += 1;
                    }
                    None => out.push((s.subject_id.clone(), s.gt_bpm, s.pred_bpm, 1)),
                }
            }
            out.into_iter()
                .map(|(_, g, p, n)| (g / n as f64, p / n as f64))
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub recovered: Vec<RecoveredRecord>,
    pub scores: Vec<SegmentScore>,
    pub report: MetricsReport,
    pub bland_altman: BlandAltmanStats,
}

pub fn evaluate(
    model: &SignalModel,
    algo: &AlgorithmConfig,
    nets: &Denoisers,
    records: &[ConditionedRecord],
    protocol: Protocol,
    cfg: &WindowConfig,
    batch: usize,
) -> Result<Evaluation> {
    let mut recovered = Vec::with_capacity(records.len());
    let mut scores = Vec::new();
    for r in records {
        let rec = recover_record(model, algo, nets, r, cfg, batch)?;
        scores.extend(score_recovered(&rec, protocol, cfg)?);
        recovered.push(rec);
    }
    let pairs = protocol_pairs(&scores, protocol);
    Ok(Evaluation {
        recovered,
        scores,
        report: compute_metrics(&pairs)?,
        bland_altman: bland_altman(&pairs)?,
    })
}

/// The same scoring without any recovery: spectral peak of the conditioned
/// regions.
pub fn evaluate_raw(records: &[ConditionedRecord], protocol: Protocol, cfg: &WindowConfig) -> Result<MetricsReport> {
    let mut scores = Vec::new();
    for r in records {
        for seg in eval_segments(r, protocol, cfg)? {
            scores.push(SegmentScore {
                subject_id: r.subject_id.clone(),
                start_s: seg.start_s,
                gt_bpm: seg.gt_bpm,
                pred_bpm: raw_segment_bpm(&seg, r.fs, cfg)?,
            });
        }
    }
    compute_metrics(&protocol_pairs(&scores, protocol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_formulas() {
        let pairs = [(60.0, 62.0), (70.0, 77.0), (80.0, 75.0)];
        let m = compute_metrics(&pairs).unwrap();
        assert!((m.mae_bpm - 14.0 / 3.0).abs() < 1e-12);
        assert!((m.rmse_bpm - 26f64.sqrt()).abs() < 1e-12);
        assert!((m.pte6_pct - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let pairs = [(60.0, 60.0), (75.0, 75.0), (90.0, 90.0)];
        let m = compute_metrics(&pairs).unwrap();
        assert_eq!((m.mae_bpm, m.rmse_bpm, m.pte6_pct), (0.0, 0.0, 100.0));
        assert!((m.pearson_rho.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn six_is_not_within() {
        let m = compute_metrics(&[(60.0, 66.0)]).unwrap();
        assert_eq!(m.pte6_pct, 0.0);
        assert_eq!(m.pearson_rho, None);
    }

    #[test]
    fn zero_variance_rho_is_undefined() {
        let m = compute_metrics(&[(60.0, 61.0), (60.0, 65.0)]).unwrap();
        assert_eq!(m.pearson_rho, None);
        assert_eq!(m.rho_text(), "undefined");
    }

    #[test]
    fn bland_altman_examples() {
        let z = bland_altman(&[(60.0, 60.0), (70.0, 70.0)]).unwrap();
        assert_eq!((z.mean_diff_bpm, z.loa_low, z.loa_high), (0.0, 0.0, 0.0));
        let b = bland_altman(&[(60.0, 59.0), (70.0, 71.0)]).unwrap();
        assert_eq!(b.mean_diff_bpm, 0.0);
        assert!((b.loa_high - 1.96 * 2f64.sqrt()).abs() < 1e-12);
        assert!((b.loa_low + 2.772).abs() < 1e-3);
    }

    #[test]
    fn ubfc_averages_per_record() {
        let s = |id: &str, g, p| SegmentScore {
            subject_id: id.into(),
            start_s: 0.0,
            gt_bpm: g,
            pred_bpm: p,
        };
        let pairs = protocol_pairs(
            &[s("a", 60.0, 62.0), s("a", 70.0, 70.0), s("b", 80.0, 90.0)],
            Protocol::Ubfc,
        );
        assert_eq!(pairs, vec![(65.0, 66.0), (80.0, 90.0)]);
    }
}
