use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;

use super::grid::FrequencyGrid;
use crate::error::{Error, Result};

/// Column scaling of the synthesis matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisScaling {
    /// Scaled so the real-part synthesis map has unit spectral norm. Keeps the
    /// spectral block and the identity noise block of the stacked operator on
    /// the same footing.
    #[default]
    Unit,
    /// Raw complex exponentials, `exp(i 2 pi f_n s / Fs)`.
    Unnormalized,
}

/// Oversampled inverse Fourier synthesis restricted to the pulse band.
///
/// Coefficients are carried as stacked real columns of height `2N` (real parts
/// then imaginary parts); the forward map returns the real part of the complex
/// synthesis, so every operation here is plain real-linear algebra and the
/// adjoint is the Hermitian adjoint composed with the real-part map.
#[derive(Debug, Clone)]
pub struct SynthesisOperator {
    grid: FrequencyGrid,
    scale: f64,
    scaling: SynthesisScaling,
    /// `S x 2N`: `[scale*cos(theta) | -scale*sin(theta)]`.
    basis: Array2<f64>,
}

impl SynthesisOperator {
    pub fn new(grid: FrequencyGrid, scaling: SynthesisScaling) -> Result<Self> {
        grid.validate()?;
        let (s_len, n_bins) = (grid.window_len, grid.n_bins);
        let mut basis = Array2::<f64>::zeros((s_len, 2 * n_bins));
        for n in 0..n_bins {
            let w = 2.0 * PI * grid.frequency(n) / grid.sample_rate;
            for s in 0..s_len {
                let theta = w * s as f64;
                basis[[s, n]] = theta.cos();
                basis[[s, n_bins + n]] = -theta.sin();
            }
        }
        let scale = match scaling {
            SynthesisScaling::Unnormalized => 1.0,
            SynthesisScaling::Unit => 1.0 / top_singular_value(&basis),
        };
        if scale != 1.0 {
            basis.mapv_inplace(|v| v * scale);
        }
        Ok(Self {
            grid,
            scale,
            scaling,
            basis,
        })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn scaling(&self) -> SynthesisScaling {
        self.scaling
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn samples(&self) -> usize {
        self.grid.window_len
    }

    pub fn coefficient_rows(&self) -> usize {
        2 * self.grid.n_bins
    }

    /// Dense real-part synthesis matrix (`S x 2N`).
    pub fn basis(&self) -> ArrayView2<'_, f64> {
        self.basis.view()
    }

    /// Entry `(s, n)` of the complex synthesis matrix.
    pub fn complex_entry(&self, s: usize, n: usize) -> Complex64 {
        let w = 2.0 * PI * self.grid.frequency(n) * s as f64 / self.grid.sample_rate;
        Complex64::from_polar(self.scale, w)
    }

    /// `Re(F^-1 X)` for stacked coefficient columns (`2N x C` to `S x C`).
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.coefficient_rows() {
            return Err(Error::dims("synthesis forward", self.coefficient_rows(), x.nrows()));
        }
        Ok(self.basis.dot(&x))
    }

    /// Adjoint of [`forward`](Self::forward) (`S x C` to `2N x C`).
    pub fn adjoint(&self, r: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if r.nrows() != self.samples() {
            return Err(Error::dims("synthesis adjoint", self.samples(), r.nrows()));
        }
        Ok(self.basis.t().dot(&r))
    }
}

/// Largest singular value from the symmetric eigendecomposition of the
/// smaller Gram matrix. The top of the spectrum of these band-limited bases is
/// tightly clustered, so power iteration converges too slowly to be exact.
pub(crate) fn top_singular_value(m: &Array2<f64>) -> f64 {
    let gram = if m.nrows() <= m.ncols() {
        m.dot(&m.t())
    } else {
        m.t().dot(m)
    };
    let n = gram.nrows();
    if n == 0 {
        return 0.0;
    }
    let g = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (gram[[i, j]] + gram[[j, i]]));
    let top = nalgebra::SymmetricEigen::new(g)
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &b| a.max(b));
    top.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn single_bin_column_is_a_unit_phasor() {
        let grid = FrequencyGrid::new(1.0, 1.5, 1, 25.0, 25).unwrap();
        let op = SynthesisOperator::new(grid, SynthesisScaling::Unnormalized).unwrap();
        for s in 0..25 {
            let expect = Complex64::from_polar(1.0, 2.0 * PI * s as f64 / 25.0);
            let got = op.complex_entry(s, 0);
            assert!((got - expect).norm() < 1e-14);
            assert!((op.basis()[[s, 0]] - expect.re).abs() < 1e-14);
            assert!((op.basis()[[s, 1]] + expect.im).abs() < 1e-14);
        }
    }

    #[test]
    fn one_hot_coefficient_synthesizes_a_cosine() {
        let grid = FrequencyGrid::pulse_band(25.0, 250).unwrap();
        let op = SynthesisOperator::new(grid, SynthesisScaling::Unnormalized).unwrap();
        let bin = 137;
        let mut x = Array2::zeros((1024, 1));
        x[[bin, 0]] = 1.0;
        let z = op.forward(x.view()).unwrap();
        let f = grid.frequency(bin);
        let err = (0..250)
            .map(|s| (z[[s, 0]] - (2.0 * PI * f * s as f64 / 25.0).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "max error {err}");
    }

    #[test]
    fn unit_scaling_has_unit_norm() {
        let grid = FrequencyGrid::pulse_band(25.0, 250).unwrap();
        let op = SynthesisOperator::new(grid, SynthesisScaling::Unit).unwrap();
        let sigma = top_singular_value(&op.basis().to_owned());
        assert!((sigma - 1.0).abs() < 1e-9, "sigma {sigma}");
    }

    #[test]
    fn rejects_wrong_shapes() {
        let grid = FrequencyGrid::pulse_band(25.0, 250).unwrap();
        let op = SynthesisOperator::new(grid, SynthesisScaling::Unit).unwrap();
        assert!(op.forward(Array2::zeros((10, 1)).view()).is_err());
        assert!(op.adjoint(Array2::zeros((10, 1)).view()).is_err());
    }
}
