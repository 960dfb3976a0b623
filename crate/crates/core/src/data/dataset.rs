//! Conditioning, windowing, subject-disjoint splits and evaluation segments.

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{Bandpass, Conditioning, TimeDomainEstimator, WindowPlan, DEFAULT_OVERSAMPLE};
use crate::training::{standardize_columns, TrainPair};

use super::records::{LabeledRecord, SplitTag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_s: f64,
    pub stride_s: f64,
    pub conditioning: Conditioning,
    /// Zero-padding factor of the heart-rate estimator.
    pub oversample: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_s: 10.0,
            stride_s: 2.4,
            conditioning: Conditioning::default(),
            oversample: DEFAULT_OVERSAMPLE,
        }
    }
}

/// A record after AC/DC normalization and bandpass (regions) or bandpass
/// alone (reference; its scale is removed later by standardization).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedRecord {
    pub subject_id: String,
    pub fs: f64,
    pub regions: Array2<f64>,
    pub ppg: Array1<f64>,
}

pub fn condition_record(rec: &LabeledRecord, cond: &Conditioning) -> Result<ConditionedRecord> {
    rec.validate()?;
    let regions = cond.apply(rec.regions.view(), rec.fs)?;
    let filter = Bandpass::butterworth(cond.order, cond.f_lo, cond.f_hi, rec.fs)?;
    let ppg = Array1::from(filter.filtfilt(rec.ppg.as_slice().expect("contiguous"))?);
    let trim = (cond.edge_trim_s * rec.fs).round() as usize;
    let ppg = ppg.slice(s![trim..ppg.len() - trim]).to_owned();
    Ok(ConditionedRecord {
        subject_id: rec.subject_id.clone(),
        fs: rec.fs,
        regions,
        ppg,
    })
}

/// Scales a conditioned `S x K` window by one factor to unit RMS, keeping the
/// relative amplitude of the channels.
pub fn model_input(window: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = window.len().max(1) as f64;
    let r = (window.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if r > 0.0 {
        window.mapv(|v| v / r)
    } else {
        window.to_owned()
    }
}

/// Reference window standardized to zero mean and unit RMS.
pub fn standardized_target(ppg: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    standardize_columns(ppg.insert_axis(Axis(1))).0.column(0).to_owned()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub subject_id: String,
    pub start_s: f64,
    /// Model input (`S x K`).
    pub input: Array2<f64>,
    /// Standardized reference waveform.
    pub target: Array1<f64>,
    /// Heart rate of the reference window.
    pub gt_bpm: f64,
}

impl Window {
    pub fn pair(&self) -> TrainPair {
        TrainPair {
            input: self.input.clone(),
            target: self.target.clone(),
        }
    }
}

fn estimator(samples: usize, fs: f64, cfg: &WindowConfig) -> Result<TimeDomainEstimator> {
    TimeDomainEstimator::with_oversample(
        samples,
        cfg.oversample,
        fs,
        cfg.conditioning.f_lo,
        cfg.conditioning.f_hi,
    )
}

/// Heart rate of a reference waveform.
pub fn reference_bpm(ppg: ndarray::ArrayView1<'_, f64>, fs: f64, cfg: &WindowConfig) -> Result<f64> {
    Ok(estimator(ppg.len(), fs, cfg)?.estimate(ppg.insert_axis(Axis(1)))?.bpm)
}

/// Windows at the configured stride.
pub fn training_windows(rec: &ConditionedRecord, cfg: &WindowConfig) -> Result<Vec<Window>> {
    let plan = WindowPlan::from_seconds(cfg.window_s, cfg.stride_s, rec.fs)?;
    windows_with(rec, plan, cfg)
}

fn windows_with(rec: &ConditionedRecord, plan: WindowPlan, cfg: &WindowConfig) -> Result<Vec<Window>> {
    let est = estimator(plan.window, rec.fs, cfg)?;
    plan.starts(rec.regions.nrows())
        .map(|start| {
            let end = start + plan.window;
            let ppg = rec.ppg.slice(s![start..end]);
            Ok(Window {
                subject_id: rec.subject_id.clone(),
                start_s: start as f64 / rec.fs,
                input: model_input(rec.regions.slice(s![start..end, ..])),
                target: standardized_target(ppg),
                gt_bpm: est.estimate(ppg.insert_axis(Axis(1)))?.bpm,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Every non-overlapping window scored on its own.
    Plain,
    /// Non-overlapping segments of three consecutive windows, scored on the
    /// concatenated reconstruction.
    Mmse,
    /// Non-overlapping windows, estimates averaged per record.
    Ubfc,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Mmse => "mmse",
            Self::Ubfc => "ubfc",
        }
    }

    pub fn windows_per_segment(&self) -> usize {
        match self {
            Self::Mmse => 3,
            Self::Plain | Self::Ubfc => 1,
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "mmse" => Ok(Self::Mmse),
            "ubfc" => Ok(Self::Ubfc),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// One scored unit: consecutive non-overlapping windows of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSegment {
    pub subject_id: String,
    pub start_s: f64,
    /// Model inputs of the constituent windows, in time order.
    pub inputs: Vec<Array2<f64>>,
    /// Conditioned regions over the whole segment (for raw baselines).
    pub raw: Array2<f64>,
    pub gt_bpm: f64,
}

pub fn eval_segments(rec: &ConditionedRecord, protocol: Protocol, cfg: &WindowConfig) -> Result<Vec<EvalSegment>> {
    let win = WindowPlan::from_seconds(cfg.window_s, cfg.window_s, rec.fs)?.window;
    let per = protocol.windows_per_segment();
    let plan = WindowPlan {
        window: win * per,
        stride: win * per,
    };
    let est = estimator(plan.window, rec.fs, cfg)?;
    plan.starts(rec.regions.nrows())
        .map(|start| {
            let end = start + plan.window;
            let ppg = rec.ppg.slice(s![start..end]);
            Ok(EvalSegment {
                subject_id: rec.subject_id.clone(),
                start_s: start as f64 / rec.fs,
                inputs: (0..per)
                    .map(|j| model_input(rec.regions.slice(s![start + j * win..start + (j + 1) * win, ..])))
                    .collect(),
                raw: rec.regions.slice(s![start..end, ..]).to_owned(),
                gt_bpm: est.estimate(ppg.insert_axis(Axis(1)))?.bpm,
            })
        })
        .collect()
}

/// Stacks per-window reconstructions (`S x K` each) along time and estimates
/// the heart rate of the result. Windows are used as given; callers
/// standardize them first so that no window dominates by scale.
pub fn segment_bpm(reconstructions: &[Array2<f64>], fs: f64, cfg: &WindowConfig) -> Result<f64> {
    if reconstructions.is_empty() {
        return Err(Error::Config("segment has no windows".into()));
    }
    let views: Vec<_> = reconstructions.iter().map(|p| p.view()).collect();
    let joined = concatenate(Axis(0), &views)
        .map_err(|e| Error::dims("segment channels", reconstructions[0].ncols(), e.to_string()))?;
    Ok(estimator(joined.nrows(), fs, cfg)?.estimate(joined.view())?.bpm)
}

/// Baseline without recovery: spectral peak of the conditioned regions.
pub fn raw_segment_bpm(seg: &EvalSegment, fs: f64, cfg: &WindowConfig) -> Result<f64> {
    Ok(estimator(seg.raw.nrows(), fs, cfg)?.estimate(seg.raw.view())?.bpm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitSpec {
    /// Subject fractions; the test share is what remains.
    Fractions {
        train: f64,
        val: f64,
    },
    LeaveOneSubjectOut,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::Fractions { train: 0.7, val: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub train: Vec<ConditionedRecord>,
    pub val: Vec<ConditionedRecord>,
    pub test: Vec<ConditionedRecord>,
}

impl Fold {
    pub fn train_windows(&self, cfg: &WindowConfig) -> Result<Vec<Window>> {
        collect_windows(&self.train, cfg)
    }

    pub fn val_windows(&self, cfg: &WindowConfig) -> Result<Vec<Window>> {
        collect_windows(&self.val, cfg)
    }

    pub fn subjects(&self, tag: SplitTag) -> BTreeSet<&str> {
        let part = match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        };
        part.iter().map(|r| r.subject_id.as_str()).collect()
    }
}

fn collect_windows(recs: &[ConditionedRecord], cfg: &WindowConfig) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for r in recs {
        out.extend(training_windows(r, cfg)?);
    }
    Ok(out)
}

/// Conditions records, drops those shorter than one window (with a warning)
/// and returns them in input order.
pub fn condition_all(records: &[LabeledRecord], cfg: &WindowConfig) -> Result<Vec<ConditionedRecord>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let c = condition_record(r, &cfg.conditioning)?;
        let need = (cfg.window_s * r.fs).round() as usize;
        if c.regions.nrows() < need {
            log::warn!(
                "subject {} has {:.1} s after conditioning, shorter than one {} s window; excluded",
                r.subject_id,
                c.regions.nrows() as f64 / r.fs,
                cfg.window_s
            );
            continue;
        }
        out.push(c);
    }
    Ok(out)
}

/// Subject-disjoint folds. Records sharing a subject id stay together.
pub fn make_dataset(records: &[LabeledRecord], cfg: &WindowConfig, split: &SplitSpec, seed: u64) -> Result<Vec<Fold>> {
    let conditioned = condition_all(records, cfg)?;
    let subjects: Vec<String> = conditioned
        .iter()
        .map(|r| r.subject_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if subjects.is_empty() {
        return Err(Error::Config("no usable records".into()));
    }
    let pick = |names: &[String]| -> Vec<ConditionedRecord> {
        conditioned
            .iter()
            .filter(|r| names.contains(&r.subject_id))
            .cloned()
            .collect()
    };
    match split {
        SplitSpec::LeaveOneSubjectOut => {
            if subjects.len() < 2 {
                return Err(Error::Config(
                    "leave-one-subject-out needs at least two subjects".into(),
                ));
            }
            Ok(subjects
                .iter()
                .map(|held| {
                    let rest: Vec<String> = subjects.iter().filter(|s| *s != held).cloned().collect();
                    Fold {
                        train: pick(&rest),
                        val: Vec::new(),
                        test: pick(std::slice::from_ref(held)),
                    }
                })
                .collect())
        }
        SplitSpec::Fractions { train, val } => {
            if !(*train > 0.0) || !(*val >= 0.0) || train + val > 1.0 + 1e-12 {
                return Err(Error::Config(format!(
                    "invalid split fractions train {train}, val {val}"
                )));
            }
            let mut order = subjects.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = order.len();
            let n_train = ((train * n as f64).round() as usize).clamp(1, n);
            let n_val = ((val * n as f64).round() as usize).min(n - n_train);
            Ok(vec![Fold {
                train: pick(&order[..n_train]),
                val: pick(&order[n_train..n_train + n_val]),
                test: pick(&order[n_train + n_val..]),
            }])
        }
    }
}

/// A fold taken from manifest split tags.
pub fn fold_from_tags(tagged: &[(SplitTag, LabeledRecord)], cfg: &WindowConfig) -> Result<Fold> {
    let mut fold = Fold {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (tag, rec) in tagged {
        let mut c = condition_all(std::slice::from_ref(rec), cfg)?;
        let Some(c) = c.pop() else { continue };
        match tag {
            SplitTag::Train => fold.train.push(c),
            SplitTag::Val => fold.val.push(c),
            SplitTag::Test => fold.test.push(c),
        }
    }
    let tr = fold.subjects(SplitTag::Train);
    for other in [SplitTag::Val, SplitTag::Test] {
        if let Some(s) = fold.subjects(other).intersection(&tr).next() {
            return Err(Error::Config(format!(
                "subject {s} appears in train and {}",
                other.name()
            )));
        }
    }
    Ok(fold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};

    fn records(n: usize, duration_s: f64) -> Vec<LabeledRecord> {
        generate_synthetic(&SyntheticConfig {
            n_subjects: n,
            duration_s,
            noise_snr_db: 10.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn sixty_seconds_gives_expected_window_counts() {
        let cfg = WindowConfig::default();
        let c = condition_all(&records(1, 60.0), &cfg).unwrap();
        assert_eq!(training_windows(&c[0], &cfg).unwrap().len(), 21);
        assert_eq!(eval_segments(&c[0], Protocol::Mmse, &cfg).unwrap().len(), 2);
        assert_eq!(eval_segments(&c[0], Protocol::Plain, &cfg).unwrap().len(), 6);
    }

    #[test]
    fn leave_one_out_folds() {
        let folds = make_dataset(
            &records(10, 20.0),
            &WindowConfig::default(),
            &SplitSpec::LeaveOneSubjectOut,
            0,
        )
        .unwrap();
        assert_eq!(folds.len(), 10);
        for f in &folds {
            assert_eq!(f.subjects(SplitTag::Train).len(), 9);
            assert_eq!(f.subjects(SplitTag::Test).len(), 1);
            assert!(f.subjects(SplitTag::Train).is_disjoint(&f.subjects(SplitTag::Test)));
        }
    }

    #[test]
    fn fraction_split_is_disjoint_and_seeded() {
        let recs = records(10, 20.0);
        let cfg = WindowConfig::default();
        let a = make_dataset(&recs, &cfg, &SplitSpec::default(), 3).unwrap();
        let b = make_dataset(&recs, &cfg, &SplitSpec::default(), 3).unwrap();
        assert_eq!(a, b);
        let f = &a[0];
        assert_eq!(f.subjects(SplitTag::Train).len(), 7);
        assert_eq!(f.subjects(SplitTag::Val).len(), 1);
        assert_eq!(f.subjects(SplitTag::Test).len(), 2);
        assert!(f.subjects(SplitTag::Train).is_disjoint(&f.subjects(SplitTag::Test)));
        assert!(f.subjects(SplitTag::Val).is_disjoint(&f.subjects(SplitTag::Test)));
    }

    #[test]
    fn short_records_are_dropped() {
        let mut recs = records(2, 20.0);
        recs[1] = records(1, 5.0).remove(0);
        recs[1].subject_id = "short".into();
        let c = condition_all(&recs, &WindowConfig::default()).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn labels_match_reference_estimator() {
        let cfg = WindowConfig::default();
        let c = condition_all(&records(1, 30.0), &cfg).unwrap();
        for w in training_windows(&c[0], &cfg).unwrap() {
            let start = (w.start_s * c[0].fs).round() as usize;
            let direct = reference_bpm(c[0].ppg.slice(s![start..start + 250]), 25.0, &cfg).unwrap();
            assert!((direct - w.gt_bpm).abs() < 1.0);
            assert!((w.input.iter().map(|v| v * v).sum::<f64>() / w.input.len() as f64 - 1.0).abs() < 1e-12);
        }
    }
}
