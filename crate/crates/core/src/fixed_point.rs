//! Fixed-point solvers for `z = f(z)` on flat real vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;
const ANDERSON_DROP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Naive,
    Anderson,
    Broyden,
}

impl std::str::FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "anderson" => Ok(Self::Anderson),
            "broyden" => Ok(Self::Broyden),
            other => Err(Error::Config(format!("unknown solver method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub anderson_memory: usize,
    pub anderson_beta: f64,
    /// Recorded with the run; every method here is deterministic.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Anderson,
            max_iters: 50,
            rel_tol: 1e-4,
            anderson_memory: 5,
            anderson_beta: 1.0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    /// Defaults for the adjoint linear solve of implicit differentiation.
    pub fn backward() -> Self {
        Self {
            rel_tol: 1e-6,
            ..Self::default()
        }
    }

    pub fn with_method(self, method: SolverMethod) -> Self {
        Self { method, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("solver max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config("solver rel_tol must be positive".into()));
        }
        if self.anderson_memory == 0 {
            return Err(Error::Config("anderson_memory must be at least 1".into()));
        }
        if !(self.anderson_beta > 0.0 && self.anderson_beta <= 1.0) {
            return Err(Error::Config("anderson_beta must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Residual history of one solve. Entry `k` is measured at the `k`-th
/// evaluated iterate: `||f(z_k) - z_k|| / max(||z_k||, 1e-12)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub residual_norms: Vec<f64>,
    pub abs_residuals: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

impl SolverTrace {
    fn record(&mut self, abs: f64, z_norm: f64) -> f64 {
        let rel = abs / z_norm.max(NORM_FLOOR);
        self.residual_norms.push(rel);
        self.abs_residuals.push(abs);
        self.iterations_used += 1;
        rel
    }

    pub fn last_residual(&self) -> Option<f64> {
        self.residual_norms.last().copied()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Solves `z = f(z)` from `z0`.
///
/// Each iteration evaluates `f` once at the current iterate and records its
/// residual. The solve stops when that residual drops below `rel_tol` or after
/// `max_iters` evaluations; in both cases the method's next iterate (computed
/// from the final evaluation) is returned. Non-finite values abort with
/// [`Error::SolverDiverged`].
pub fn solve_fixed_point<F>(mut f: F, z0: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, SolverTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolverDiverged {
            iteration: 0,
            trace: SolverTrace::default(),
        });
    }
    let mut state = match cfg.method {
        SolverMethod::Naive => Stepper::Naive,
        SolverMethod::Anderson => Stepper::Anderson(Anderson::new(cfg.anderson_memory, cfg.anderson_beta)),
        SolverMethod::Broyden => Stepper::Broyden(Broyden::default()),
    };
    let mut trace = SolverTrace::default();
    let mut z = z0.to_vec();
    loop {
        let fz = f(&z)?;
        if fz.len() != z.len() {
            return Err(Error::dims("fixed-point map output", z.len(), fz.len()));
        }
        let g = sub(&fz, &z);
        let rel = trace.record(norm(&g), norm(&z));
        if !rel.is_finite() || fz.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverDiverged {
                iteration: trace.iterations_used,
                trace,
            });
        }
        let done = rel < cfg.rel_tol;
        let next = state.step(&z, fz, g);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverDiverged {
                iteration: trace.iterations_used,
                trace,
            });
        }
        if done || trace.iterations_used >= cfg.max_iters {
            trace.converged = done;
            return Ok((next, trace));
        }
        z = next;
    }
}

enum Stepper {
    Naive,
    Anderson(Anderson),
    Broyden(Broyden),
}

impl Stepper {
    fn step(&mut self, z: &[f64], fz: Vec<f64>, g: Vec<f64>) -> Vec<f64> {
        match self {
            Stepper::Naive => fz,
            Stepper::Anderson(a) => a.step(z, fz, g),
            Stepper::Broyden(b) => b.step(z, g),
        }
    }
}

/// Type-II Anderson mixing in difference form: with `dG`, `dF` the last
/// `memory` differences of residuals and map values, pick
/// `gamma = argmin ||g_k - dG gamma||` and step to
/// `beta (f_k - dF gamma) + (1 - beta) (z_k - dZ gamma)`.
///
/// The least-squares problem is solved by modified Gram-Schmidt with
/// re-orthogonalization; a difference column whose component outside the span
/// of the earlier ones is below `DROP_TOL` of its norm is left out.
struct Anderson {
    memory: usize,
    beta: f64,
    prev: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    dz: Vec<Vec<f64>>,
    df: Vec<Vec<f64>>,
    dg: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(memory: usize, beta: f64) -> Self {
        Self {
            memory,
            beta,
            prev: None,
            dz: Vec::new(),
            df: Vec::new(),
            dg: Vec::new(),
        }
    }

    fn step(&mut self, z: &[f64], fz: Vec<f64>, g: Vec<f64>) -> Vec<f64> {
        if let Some((zp, fp, gp)) = self.prev.take() {
            if self.dg.len() == self.memory {
                self.dz.remove(0);
                self.df.remove(0);
                self.dg.remove(0);
            }
            self.dz.push(sub(z, &zp));
            self.df.push(sub(&fz, &fp));
            self.dg.push(sub(&g, &gp));
        }
        let gamma = least_squares(&self.dg, &g);
        let mut next: Vec<f64> = z
            .iter()
            .zip(&fz)
            .map(|(zi, fi)| self.beta * fi + (1.0 - self.beta) * zi)
            .collect();
        for (j, c) in gamma.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let (dfj, dzj) = (&self.df[j], &self.dz[j]);
            for d in 0..next.len() {
                next[d] -= c * (self.beta * dfj[d] + (1.0 - self.beta) * dzj[d]);
            }
        }
        self.prev = Some((z.to_vec(), fz, g));
        next
    }
}

/// `argmin ||b - sum_j gamma_j cols_j||` with dependent columns given zero
/// weight.
fn least_squares(cols: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let m = cols.len();
    let mut gamma = vec![0.0; m];
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut kept: Vec<usize> = Vec::with_capacity(m);
    // r[i][j]: coefficient of q_i in column kept[j]
    let mut r: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (j, c) in cols.iter().enumerate() {
        let c_norm = norm(c);
        if !(c_norm > 0.0) || !c_norm.is_finite() {
            continue;
        }
        let mut v = c.clone();
        let mut coeffs = vec![0.0; q.len()];
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let h = dot(qi, &v);
                coeffs[i] += h;
                v.iter_mut().zip(qi).for_each(|(a, b)| *a -= h * b);
            }
        }
        let v_norm = norm(&v);
        if v_norm <= ANDERSON_DROP_TOL * c_norm {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= v_norm);
        q.push(v);
        coeffs.push(v_norm);
        r.push(coeffs);
        kept.push(j);
    }
    let n = kept.len();
    let qtb: Vec<f64> = q.iter().map(|qi| dot(qi, b)).collect();
    let mut sol = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| r[j][i] * sol[j]).sum();
        sol[i] = (qtb[i] - s) / r[i][i];
    }
    for (i, j) in kept.into_iter().enumerate() {
        gamma[j] = sol[i];
    }
    gamma
}

/// Good Broyden on `g(z) = f(z) - z` with the inverse Jacobian kept as
/// `H = -I + sum u_i v_i^T`.
#[derive(Default)]
struct Broyden {
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

impl Broyden {
    fn apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = y.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = dot(v, y);
            out.iter_mut().zip(u).for_each(|(o, ui)| *o += c * ui);
        }
        out
    }

    fn apply_transpose(&self, s: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = s.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = dot(u, s);
            out.iter_mut().zip(v).for_each(|(o, vi)| *o += c * vi);
        }
        out
    }

    fn step(&mut self, z: &[f64], g: Vec<f64>) -> Vec<f64> {
        if let Some((z_prev, g_prev)) = self.prev.take() {
            let s = sub(z, &z_prev);
            let y = sub(&g, &g_prev);
            let hy = self.apply(&y);
            let denom = dot(&s, &hy);
            if denom.abs() > 1e-300 && denom.is_finite() {
                let u: Vec<f64> = s.iter().zip(&hy).map(|(a, b)| (a - b) / denom).collect();
                let v = self.apply_transpose(&s);
                self.us.push(u);
                self.vs.push(v);
            }
        }
        let step = self.apply(&g);
        let next = z.iter().zip(&step).map(|(a, b)| a - b).collect();
        self.prev = Some((z.to_vec(), g));
        next
    }
}
