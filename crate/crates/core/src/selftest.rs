//! Checks run by the `selftest` command: operator adjointness, fixed-point
//! solvers against closed-form solutions, and the gradient gate.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::Config;
use crate::error::Result;
use crate::fixed_point::{solve_fixed_point, SolverConfig, SolverMethod};
use crate::spectral::SynthesisOperator;
use crate::training::{gradient_check, GateReport};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Solves `m y = b` by Gaussian elimination with partial pivoting.
pub fn dense_solve(mut m: Array2<f64>, mut b: Array1<f64>) -> Option<Array1<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))?;
        if m[[piv, col]].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap([piv, k], [col, k]);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            if f != 0.0 {
                for k in col..n {
                    m[[row, k]] -= f * m[[col, k]];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut y = Array1::zeros(n);
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[[row, k]] * y[k]).sum();
        y[row] = (b[row] - s) / m[[row, row]];
    }
    Some(y)
}

/// Random `d x d` matrix scaled to spectral norm `rho`.
pub fn random_contraction(d: usize, rho: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = Array2::from_shape_simple_fn((d, d), || rng.sample::<f64, _>(StandardNormal));
    let s = crate::spectral::operator::top_singular_value(&a);
    a * (rho / s)
}

fn solver_suite(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..10 {
        let d = rng.random_range(2..=64);
        let a = random_contraction(d, 0.9, &mut rng);
        let b = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
        let exact = dense_solve(Array2::eye(d) - &a, b.clone()).expect("I - A is invertible");
        for method in [SolverMethod::Naive, SolverMethod::Anderson, SolverMethod::Broyden] {
            let cfg = SolverConfig {
                method,
                max_iters: 2000,
                rel_tol: 1e-11,
                ..SolverConfig::default()
            };
            let run = solve_fixed_point(
                |z| Ok((a.dot(&Array1::from(z.to_vec())) + &b).to_vec()),
                &vec![0.0; d],
                &cfg,
            );
            match run {
                Ok((z, _)) => {
                    let err = z.iter().zip(&exact).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
                        / exact.iter().map(|v| v.abs()).fold(1e-300, f64::max);
                    worst = worst.max(err);
                    if err > 1e-8 {
                        failures.push(format!("case {case} {method:?}: {err:.2e}"));
                    }
                }
                Err(e) => failures.push(format!("case {case} {method:?}: {e}")),
            }
        }
    }
    CheckResult {
        name: "fixed-point solvers vs closed form".into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("worst relative error {worst:.2e}")
        } else {
            failures.join("; ")
        },
    }
}

fn adjoint_suite(cfg: &Config, seed: u64) -> Result<CheckResult> {
    let op = SynthesisOperator::new(cfg.grid(cfg.fs)?, cfg.synthesis_scaling)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = Array2::from_shape_simple_fn((op.coefficient_rows(), 2), || rng.sample::<f64, _>(StandardNormal));
        let r = Array2::from_shape_simple_fn((op.samples(), 2), || rng.sample::<f64, _>(StandardNormal));
        let lhs = (op.forward(x.view())? * &r).sum();
        let rhs = (&x * &op.adjoint(r.view())?).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    Ok(CheckResult {
        name: "synthesis forward/adjoint".into(),
        passed: worst < 1e-10,
        detail: format!("worst relative mismatch {worst:.2e}"),
    })
}

fn gate(cfg: &Config) -> Result<(CheckResult, Option<GateReport>)> {
    if cfg.algorithm == crate::algorithms::AlgorithmKind::IstaOracle {
        return Ok((
            CheckResult {
                name: "gradient gate".into(),
                passed: true,
                detail: "no trainable parameters".into(),
            },
            None,
        ));
    }
    let template = cfg.init_denoisers(cfg.fs)?;
    let rep = gradient_check(
        cfg.synthesis_scaling,
        cfg.noise_term,
        &cfg.algorithm_config(),
        &template,
        cfg.backward_mode,
        cfg.seed,
    )?;
    Ok((
        CheckResult {
            name: "gradient gate".into(),
            passed: rep.passed,
            detail: format!(
                "loss {:.2e}, penalty {}, tolerance {:.0e}",
                rep.loss_rel_err,
                rep.penalty_rel_err
                    .map(|p| format!("{p:.2e}"))
                    .unwrap_or_else(|| "n/a".into()),
                rep.tolerance
            ),
        },
        Some(rep),
    ))
}

pub fn run_selftest(cfg: &Config) -> Result<Vec<CheckResult>> {
    let mut out = vec![adjoint_suite(cfg, cfg.seed)?, solver_suite(cfg.seed)];
    out.push(gate(cfg)?.0);
    Ok(out)
}
