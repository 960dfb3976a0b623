//! Data fidelity `1/2 ||Z - A[X; E]||^2` with `A = [Re F^-1, I]` and its
//! gradient step.
//!
//! All maps act column-wise, so a batch of windows is handled by placing their
//! columns side by side.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{FrequencyGrid, SpectralCoefficients, SynthesisOperator, SynthesisScaling};

pub const POWER_MAX_ITERS: usize = 100;
pub const POWER_REL_TOL: f64 = 1e-6;

/// Stacked unknowns: coefficients `X` (stacked real, `2N x C`) and noise `E`
/// (`S x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct StackedVariable {
    pub x: Array2<f64>,
    pub e: Array2<f64>,
}

impl StackedVariable {
    pub fn zeros(coefficient_rows: usize, samples: usize, columns: usize) -> Self {
        Self {
            x: Array2::zeros((coefficient_rows, columns)),
            e: Array2::zeros((samples, columns)),
        }
    }

    pub fn columns(&self) -> usize {
        self.x.ncols()
    }

    pub fn coefficients(&self, grid: FrequencyGrid) -> Result<SpectralCoefficients> {
        SpectralCoefficients::from_stacked(self.x.view(), grid)
    }

    /// `x` entries then `e` entries, each in row-major order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.x.iter().chain(self.e.iter()).copied().collect()
    }

    pub fn from_flat(flat: &[f64], coefficient_rows: usize, samples: usize, columns: usize) -> Result<Self> {
        let nx = coefficient_rows * columns;
        let ne = samples * columns;
        if flat.len() != nx + ne {
            return Err(Error::dims("stacked variable", nx + ne, flat.len()));
        }
        Ok(Self {
            x: Array2::from_shape_vec((coefficient_rows, columns), flat[..nx].to_vec()).expect("length checked"),
            e: Array2::from_shape_vec((samples, columns), flat[nx..].to_vec()).expect("length checked"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSize {
    pub alpha: f64,
    /// Estimate of `sigma_max(A)^2`.
    pub lipschitz_estimate: f64,
}

impl StepSize {
    pub fn from_lipschitz(lipschitz_estimate: f64) -> Result<Self> {
        if !(lipschitz_estimate.is_finite() && lipschitz_estimate > 0.0) {
            return Err(Error::Numeric("Lipschitz estimate".into()));
        }
        Ok(Self {
            alpha: 1.0 / lipschitz_estimate,
            lipschitz_estimate,
        })
    }
}

/// Fixed pseudo-random unit vector. Structured starts such as all-ones can be
/// orthogonal to the top eigenvector of these symmetric time-frequency Gram
/// matrices.
fn power_start(n: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let v = Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal));
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Largest eigenvalue of a symmetric positive semidefinite operator by power
/// iteration from a fixed pseudo-random direction. Returns the estimate and
/// whether the relative change fell below `rel_tol`.
pub fn power_iteration<F>(mut apply: F, dim: usize, max_iters: usize, rel_tol: f64) -> (f64, bool)
where
    F: FnMut(&Array1<f64>) -> Array1<f64>,
{
    let mut v = power_start(dim);
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let w = apply(&v);
        let next = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return (0.0, true);
        }
        v = w / norm;
        if (next - lambda).abs() <= rel_tol * next.abs() {
            return (next, true);
        }
        lambda = next;
    }
    (lambda, false)
}

/// The linear measurement model for one frequency grid.
#[derive(Debug, Clone)]
pub struct SignalModel {
    op: SynthesisOperator,
    step: StepSize,
    noise_term: bool,
}

impl SignalModel {
    /// Builds the operator and fixes `alpha = 1 / sigma_max(A)^2`. With the
    /// noise term disabled `A` reduces to the synthesis block alone.
    pub fn new(grid: FrequencyGrid, scaling: SynthesisScaling, noise_term: bool) -> Result<Self> {
        let op = SynthesisOperator::new(grid, scaling)?;
        let step = estimate_step_size(&op, noise_term)?;
        Ok(Self { op, step, noise_term })
    }

    pub fn operator(&self) -> &SynthesisOperator {
        &self.op
    }

    pub fn grid(&self) -> &FrequencyGrid {
        self.op.grid()
    }

    pub fn step(&self) -> StepSize {
        self.step
    }

    pub fn with_step(mut self, step: StepSize) -> Self {
        self.step = step;
        self
    }

    pub fn noise_term(&self) -> bool {
        self.noise_term
    }

    pub fn samples(&self) -> usize {
        self.op.samples()
    }

    pub fn coefficient_rows(&self) -> usize {
        self.op.coefficient_rows()
    }

    fn check(&self, v: &StackedVariable, z: Option<ArrayView2<'_, f64>>) -> Result<()> {
        if v.x.nrows() != self.coefficient_rows() {
            return Err(Error::dims("coefficients", self.coefficient_rows(), v.x.nrows()));
        }
        if v.e.dim() != (self.samples(), v.x.ncols()) {
            return Err(Error::dims("noise", (self.samples(), v.x.ncols()), v.e.dim()));
        }
        if let Some(z) = z {
            if z.dim() != v.e.dim() {
                return Err(Error::dims("measurement", v.e.dim(), z.dim()));
            }
        }
        Ok(())
    }

    /// `Re(F^-1 X) + E` (the noise block is skipped when disabled).
    pub fn apply_forward(&self, v: &StackedVariable) -> Result<Array2<f64>> {
        self.check(v, None)?;
        let mut out = self.op.forward(v.x.view())?;
        if self.noise_term {
            out += &v.e;
        }
        Ok(out)
    }

    /// Residual `Z - A v`.
    pub fn residual(&self, v: &StackedVariable, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(v, Some(z))?;
        Ok(&z - &self.apply_forward(v)?)
    }

    pub fn data_fidelity(&self, v: &StackedVariable, z: ArrayView2<'_, f64>) -> Result<f64> {
        let r = self.residual(v, z)?;
        Ok(0.5 * r.iter().map(|a| a * a).sum::<f64>())
    }

    /// `A^*` applied to a residual, split into its `X` and `E` blocks.
    pub fn adjoint(&self, r: ArrayView2<'_, f64>) -> Result<StackedVariable> {
        let x = self.op.adjoint(r)?;
        let e = if self.noise_term {
            r.to_owned()
        } else {
            Array2::zeros(r.raw_dim())
        };
        Ok(StackedVariable { x, e })
    }

    /// Gradient of the data fidelity.
    pub fn gradient(&self, v: &StackedVariable, z: ArrayView2<'_, f64>) -> Result<StackedVariable> {
        let r = self.residual(v, z)?;
        let mut g = self.adjoint(r.view())?;
        g.x.mapv_inplace(|a| -a);
        g.e.mapv_inplace(|a| -a);
        Ok(g)
    }

    /// `v + alpha A^*(Z - A v)`, equal to `alpha A^* Z + (I - alpha A^* A) v`.
    pub fn gradient_step(&self, v: &StackedVariable, z: ArrayView2<'_, f64>) -> Result<StackedVariable> {
        self.gradient_step_with(v, z, self.step.alpha)
    }

    pub fn gradient_step_with(
        &self,
        v: &StackedVariable,
        z: ArrayView2<'_, f64>,
        alpha: f64,
    ) -> Result<StackedVariable> {
        let r = self.residual(v, z)?;
        let mut x = self.op.adjoint(r.view())?;
        Zip::from(&mut x).and(&v.x).for_each(|g, xv| *g = xv + alpha * *g);
        let e = if self.noise_term {
            let mut e = r;
            Zip::from(&mut e).and(&v.e).for_each(|g, ev| *g = ev + alpha * *g);
            e
        } else {
            v.e.clone()
        };
        Ok(StackedVariable { x, e })
    }

    /// Transpose of the linear part `I - alpha A^* A` of the gradient step,
    /// which is symmetric: maps output cotangents to input cotangents.
    pub fn gradient_step_transpose(&self, g: &StackedVariable) -> Result<StackedVariable> {
        self.check(g, None)?;
        let alpha = self.step.alpha;
        let q = self.apply_forward(g)?;
        let back = self.adjoint(q.view())?;
        let mut x = g.x.clone();
        Zip::from(&mut x).and(&back.x).for_each(|a, b| *a -= alpha * b);
        let mut e = g.e.clone();
        if self.noise_term {
            Zip::from(&mut e).and(&back.e).for_each(|a, b| *a -= alpha * b);
        }
        Ok(StackedVariable { x, e })
    }
}

/// Power iteration on `A^* A` for the stacked operator (or the synthesis
/// block alone when the noise term is disabled).
pub fn estimate_step_size(op: &SynthesisOperator, noise_term: bool) -> Result<StepSize> {
    let n2 = op.coefficient_rows();
    let s = op.samples();
    let basis = op.basis();
    let dim = if noise_term { n2 + s } else { n2 };
    let (lambda, converged) = power_iteration(
        |v| {
            let vx = v.slice(ndarray::s![..n2]);
            let mut av = basis.dot(&vx);
            if noise_term {
                av += &v.slice(ndarray::s![n2..]);
            }
            let mut out = Array1::zeros(dim);
            out.slice_mut(ndarray::s![..n2]).assign(&basis.t().dot(&av));
            if noise_term {
                out.slice_mut(ndarray::s![n2..]).assign(&av);
            }
            out
        },
        dim,
        POWER_MAX_ITERS,
        POWER_REL_TOL,
    );
    if !converged {
        log::info!("step-size power iteration stopped at {POWER_MAX_ITERS} iterations; using last estimate {lambda}");
    }
    StepSize::from_lipschitz(lambda)
}
