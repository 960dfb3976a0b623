#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use pulsekit::spectral::{FrequencyGrid, SynthesisScaling};

pub fn randn<R: Rng>(rng: &mut R, dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal))
}

pub fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &Array2<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// `S x N` complex exponentials `exp(i 2 pi f_n s / Fs)` on the grid; with
/// unit scaling divided by the largest singular value of the real-part map.
pub fn complex_synthesis(grid: &FrequencyGrid, scaling: SynthesisScaling) -> DMatrix<Complex64> {
    let (s, n) = (grid.window_len, grid.n_bins);
    let step = if n > 1 {
        (grid.f_hi - grid.f_lo) / (n - 1) as f64
    } else {
        0.0
    };
    let raw = DMatrix::from_fn(s, n, |i, k| {
        let f = grid.f_lo + k as f64 * step;
        Complex64::from_polar(1.0, 2.0 * PI * f * i as f64 / grid.sample_rate)
    });
    match scaling {
        SynthesisScaling::Unnormalized => raw,
        SynthesisScaling::Unit => {
            // X -> Re(F X) acts on (Re X, Im X) as [Re F | -Im F]
            let real = DMatrix::from_fn(
                s,
                2 * n,
                |i, k| if k < n { raw[(i, k)].re } else { -raw[(i, k - n)].im },
            );
            let sigma = real.singular_values().max();
            raw.map(|v| v / sigma)
        }
    }
}

/// `Re(F X)` for stacked real coefficient columns.
pub fn real_part_synthesis(f: &DMatrix<Complex64>, x: &Array2<f64>) -> Array2<f64> {
    let n = f.ncols();
    let xc = DMatrix::from_fn(n, x.ncols(), |k, j| Complex64::new(x[[k, j]], x[[n + k, j]]));
    let y = f * xc;
    Array2::from_shape_fn((f.nrows(), x.ncols()), |(i, j)| y[(i, j)].re)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pulsekit")
}

pub fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str], cwd: &Path) -> Output {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "pulsekit {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A small but complete configuration: six subjects, 40 s records, one epoch.
pub const TINY_CONFIG: &str = "n_subjects = 6\nduration_s = 40.0\nepochs = 1\nbatch_size = 20\n";

fn collect(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, root, out);
        } else {
            let key = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            out.insert(key, fs::read(&p).unwrap());
        }
    }
}

/// Runs generate, train, eval and denoise in a fresh directory and returns
/// every file written, keyed by relative path.
pub fn cli_pipeline_outputs() -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY_CONFIG).unwrap();
    run_ok(&["generate", "--config", "tiny.toml", "--out", "data"], d);
    run_ok(
        &[
            "train",
            "--config",
            "tiny.toml",
            "--data",
            "data/manifest.txt",
            "--out",
            "train",
        ],
        d,
    );
    run_ok(
        &[
            "eval",
            "--checkpoint",
            "train/model.ckpt",
            "--data",
            "data/manifest.txt",
            "--out",
            "eval",
        ],
        d,
    );
    run_ok(
        &[
            "denoise",
            "--checkpoint",
            "train/model.ckpt",
            "--data",
            "data/manifest.txt",
            "--out",
            "denoise",
        ],
        d,
    );
    let mut out = BTreeMap::new();
    collect(d, d, &mut out);
    out
}
