//! Record files and dataset manifests.
//!
//! A record file is UTF-8 CSV:
//!
//! ```text
//! # fs=25
//! t,region_1,region_2,ppg
//! 0,101.2,98.7,0.31
//! ...
//! ```
//!
//! The subject id is the file stem. Values are written with Rust's shortest
//! round-trip formatting, so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    /// Raw region intensities, `T x K`.
    pub regions: Array2<f64>,
    /// Reference pulse waveform, length `T`.
    pub ppg: Array1<f64>,
    /// Instantaneous heart rate in bpm when known (synthetic data).
    pub hr_series: Option<Array1<f64>>,
    pub fs: f64,
    pub subject_id: String,
}

impl LabeledRecord {
    pub fn len(&self) -> usize {
        self.ppg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ppg.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.regions.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.fs
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) || !self.fs.is_finite() {
            return Err(Error::Format(format!("sample rate {} must be positive", self.fs)));
        }
        if self.regions.nrows() != self.ppg.len() {
            return Err(Error::dims("record length", self.ppg.len(), self.regions.nrows()));
        }
        if let Some(hr) = &self.hr_series {
            if hr.len() != self.ppg.len() {
                return Err(Error::dims("heart-rate series length", self.ppg.len(), hr.len()));
            }
        }
        if self.regions.ncols() == 0 {
            return Err(Error::Format("record has no region columns".into()));
        }
        if self.regions.iter().chain(self.ppg.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("record {}", self.subject_id)));
        }
        Ok(())
    }
}

pub fn record_to_csv(rec: &LabeledRecord) -> String {
    let k = rec.channels();
    let mut out = String::with_capacity(rec.len() * (k + 2) * 20);
    let _ = writeln!(out, "# fs={}", rec.fs);
    out.push('t');
    for c in 1..=k {
        let _ = write!(out, ",region_{c}");
    }
    out.push_str(",ppg\n");
    for i in 0..rec.len() {
        let _ = write!(out, "{}", i as f64 / rec.fs);
        for c in 0..k {
            let _ = write!(out, ",{}", rec.regions[[i, c]]);
        }
        let _ = writeln!(out, ",{}", rec.ppg[i]);
    }
    out
}

pub fn save_record(rec: &LabeledRecord, path: &Path) -> Result<()> {
    fs::write(path, record_to_csv(rec))?;
    Ok(())
}

fn parse_value(field: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("{:?} is not a number", field.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value {:?}", field.trim()),
        });
    }
    Ok(v)
}

/// Parses one record. Data rows are numbered from 1 in error messages.
pub fn parse_record(text: &str, subject_id: &str) -> Result<LabeledRecord> {
    let mut fs_decl = None;
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("fs=") {
                let fs: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("unreadable sample rate {:?}", v.trim())))?;
                fs_decl = Some(fs);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let Some(cols) = &header else {
            let names: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            check_header(&names)?;
            header = Some(names);
            continue;
        };
        let row = rows.len() + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                row,
                column: cols.get(fields.len().min(cols.len() - 1)).cloned().unwrap_or_default(),
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        rows.push(
            fields
                .iter()
                .zip(cols)
                .map(|(f, c)| parse_value(f, row, c))
                .collect::<Result<_>>()?,
        );
    }
    let fs = fs_decl.ok_or_else(|| Error::Format("missing \"# fs=<hz>\" line".into()))?;
    let cols = header.ok_or_else(|| Error::Format("missing header line".into()))?;
    let k = cols.len() - 2;
    let t = rows.len();
    let mut regions = Array2::zeros((t, k));
    let mut ppg = Array1::zeros(t);
    for (i, r) in rows.iter().enumerate() {
        for c in 0..k {
            regions[[i, c]] = r[1 + c];
        }
        ppg[i] = r[k + 1];
    }
    let rec = LabeledRecord {
        regions,
        ppg,
        hr_series: None,
        fs,
        subject_id: subject_id.to_string(),
    };
    rec.validate()?;
    Ok(rec)
}

fn check_header(names: &[String]) -> Result<()> {
    if names.len() < 3 {
        return Err(Error::Format(format!(
            "header needs t, at least one region and ppg, found {names:?}"
        )));
    }
    if names[0] != "t" {
        return Err(Error::Format(format!(
            "first column must be \"t\", found {:?}",
            names[0]
        )));
    }
    if names.last().map(String::as_str) != Some("ppg") {
        return Err(Error::Format("missing column ppg".into()));
    }
    for (i, n) in names[1..names.len() - 1].iter().enumerate() {
        if *n != format!("region_{}", i + 1) {
            return Err(Error::Format(format!("expected column region_{}, found {n:?}", i + 1)));
        }
    }
    Ok(())
}

fn subject_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "record".into())
}

pub fn load_record(path: &Path) -> Result<LabeledRecord> {
    let text = fs::read_to_string(path)?;
    parse_record(&text, &subject_of(path)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// A single record file, every `*.csv` in a directory (sorted by name), or
/// the records listed in a manifest (any other file extension).
pub fn load_records(path: &Path) -> Result<Vec<LabeledRecord>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        return files.iter().map(|p| load_record(p)).collect();
    }
    if path.extension().is_some_and(|x| x == "csv") {
        return Ok(vec![load_record(path)?]);
    }
    read_manifest(path)?.iter().map(|e| load_record(&e.path)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Format(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: SplitTag,
}

/// Reads `path split` lines; relative paths resolve against the manifest's
/// directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, tag) = line.rsplit_once(char::is_whitespace).ok_or_else(|| {
            Error::Format(format!(
                "{} line {}: expected \"<path> <split>\"",
                path.display(),
                i + 1
            ))
        })?;
        let file = PathBuf::from(file.trim());
        out.push(ManifestEntry {
            path: if file.is_absolute() { file } else { base.join(file) },
            split: tag.parse()?,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(String, SplitTag)]) -> Result<()> {
    let mut text = String::new();
    for (file, tag) in entries {
        let _ = writeln!(text, "{file} {}", tag.name());
    }
    fs::write(path, text)?;
    Ok(())
}

/// Loads the records of a manifest grouped by split tag.
pub fn load_manifest_splits(path: &Path) -> Result<Vec<(SplitTag, LabeledRecord)>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| Ok((e.split, load_record(&e.path)?)))
        .collect()
}
