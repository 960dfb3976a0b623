//! Finite-difference check of the training gradients on a miniature copy of
//! the configured pipeline.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::algorithms::{
    recover_recorded, AlgorithmConfig, Denoisers, DeproxRecord, OuterRound, RunRecord, StageExecution, StageRecord,
};
use crate::denoiser::{DenoiserArch, Mlp, Network};
use crate::error::{Error, Result};
use crate::fixed_point::SolverConfig;
use crate::signal_model::SignalModel;
use crate::spectral::{FrequencyGrid, SynthesisScaling};

use super::backward::{backward_run, jacobian_penalty, BackwardMode};
use super::loss::{standardize_columns, standardized_mse};

pub const GATE_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const MINI_BINS: usize = 4;
const MINI_SAMPLES: usize = 10;
const MINI_HIDDEN: usize = 3;
const MINI_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateReport {
    pub loss_rel_err: f64,
    /// Absent when the pipeline has no fixed-point component.
    pub penalty_rel_err: Option<f64>,
    pub n_params: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GateReport {
    pub fn worst(&self) -> f64 {
        self.loss_rel_err.max(self.penalty_rel_err.unwrap_or(0.0))
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn shrink(net: &Network, io_dim: usize, seed: u64) -> Result<Network> {
    let Network::Mlp(m) = net else { return Ok(net.clone()) };
    let arch = DenoiserArch {
        io_dim,
        hidden_dim: MINI_HIDDEN,
        ..*m.arch()
    };
    let mut mini = Mlp::init(arch, seed, true)?;
    // nonzero biases so their gradients are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let bias_ranges: Vec<_> = mini
        .specs()
        .iter()
        .filter(|s| s.name.contains("bias"))
        .map(|s| s.offset..s.offset + s.len())
        .collect();
    for range in bias_ranges {
        for p in &mut mini.params_mut()[range] {
            *p = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Network::Mlp(mini))
}

fn retape_stage(net: &Network, rec: &StageRecord) -> Result<StageRecord> {
    Ok(match rec {
        StageRecord::Pass(t) => StageRecord::Pass(net.retape(t)?),
        StageRecord::Equilibrium { tape, point } => StageRecord::Equilibrium {
            tape: net.retape(tape)?,
            point: point.clone(),
        },
        StageRecord::Iterated(ts) => StageRecord::Iterated(ts.iter().map(|t| net.retape(t)).collect::<Result<_>>()?),
        StageRecord::Skipped => StageRecord::Skipped,
    })
}

/// The same record with every tape recomputed by `nets` at the stored
/// inputs. Used to differentiate the penalty with the fixed points frozen.
pub fn retape_record(nets: &Denoisers, rec: &RunRecord) -> Result<RunRecord> {
    Ok(match rec {
        RunRecord::Outer(rounds) => RunRecord::Outer(
            rounds
                .iter()
                .map(|r| {
                    Ok(OuterRound {
                        x: retape_stage(&nets.r, &r.x)?,
                        e: retape_stage(&nets.q, &r.e)?,
                    })
                })
                .collect::<Result<_>>()?,
        ),
        RunRecord::Deprox(DeproxRecord::Equilibrium { r, q, point }) => RunRecord::Deprox(DeproxRecord::Equilibrium {
            r: nets.r.retape(r)?,
            q: q.as_ref().map(|t| nets.q.retape(t)).transpose()?,
            point: point.clone(),
        }),
        RunRecord::Deprox(DeproxRecord::Iterated(steps)) => RunRecord::Deprox(DeproxRecord::Iterated(
            steps
                .iter()
                .map(|(r, q)| Ok((nets.r.retape(r)?, q.as_ref().map(|t| nets.q.retape(t)).transpose()?)))
                .collect::<Result<_>>()?,
        )),
    })
}

fn params_flat(nets: &Denoisers) -> Vec<f64> {
    nets.r.params().iter().chain(nets.q.params()).copied().collect()
}

fn perturbed(nets: &Denoisers, i: usize, delta: f64) -> Denoisers {
    let mut out = nets.clone();
    let nr = out.r.param_count();
    if i < nr {
        out.r.params_mut()[i] += delta;
    } else {
        out.q.params_mut()[i - nr] += delta;
    }
    out
}

fn central<F: FnMut(&Denoisers) -> Result<f64>>(nets: &Denoisers, mut f: F) -> Result<Vec<f64>> {
    let n = params_flat(nets).len();
    (0..n)
        .map(|i| {
            let fp = f(&perturbed(nets, i, FD_STEP))?;
            let fm = f(&perturbed(nets, i, -FD_STEP))?;
            Ok((fp - fm) / (2.0 * FD_STEP))
        })
        .collect()
}

/// Compares analytic and central-difference gradients of the waveform loss
/// and of the Jacobian penalty on a miniature instance with the configured
/// algorithm, denoiser architectures, synthesis scaling, noise term and
/// backward mode. `jacobian_free` is checked in `ift` mode since its gradient
/// is approximate by construction.
pub fn gradient_check(
    scaling: SynthesisScaling,
    noise_term: bool,
    algo: &AlgorithmConfig,
    template: &Denoisers,
    mode: BackwardMode,
    seed: u64,
) -> Result<GateReport> {
    let grid = FrequencyGrid::new(
        crate::spectral::DEFAULT_F_LO,
        crate::spectral::DEFAULT_F_HI,
        MINI_BINS,
        25.0,
        MINI_SAMPLES,
    )?;
    let model = SignalModel::new(grid, scaling, noise_term)?;
    let nets = Denoisers {
        r: shrink(&template.r, MINI_BINS, seed)?,
        q: shrink(&template.q, MINI_SAMPLES, seed.wrapping_add(1))?,
    };
    let mode = if mode == BackwardMode::JacobianFree {
        BackwardMode::Ift
    } else {
        mode
    };
    let mut cfg = *algo;
    cfg.unroll_t = cfg.unroll_t.min(3);
    cfg.solver = match mode.execution() {
        StageExecution::Solve => SolverConfig {
            max_iters: 300,
            rel_tol: 1e-13,
            ..cfg.solver
        },
        StageExecution::Iterate => SolverConfig {
            max_iters: cfg.solver.max_iters.min(8),
            ..cfg.solver
        },
    };
    let bcfg = SolverConfig {
        max_iters: 300,
        rel_tol: 1e-13,
        ..SolverConfig::backward()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array2::from_shape_simple_fn((MINI_SAMPLES, MINI_CHANNELS), || rng.sample::<f64, _>(StandardNormal));
    let raw_target = Array2::from_shape_simple_fn((MINI_SAMPLES, 1), || rng.sample::<f64, _>(StandardNormal));
    let (t1, _) = standardize_columns(raw_target.view());
    let target = ndarray::concatenate(Axis(1), &vec![t1.view(); MINI_CHANNELS]).expect("same rows");

    let loss = |n: &Denoisers| -> Result<f64> {
        let (res, _) = recover_recorded(&model, &cfg, n, z.view(), mode.execution())?;
        Ok(standardized_mse(res.reconstructed.view(), target.view())?.0)
    };
    let (res, record) = recover_recorded(&model, &cfg, &nets, z.view(), mode.execution())?;
    let (_, g_recon) = standardized_mse(res.reconstructed.view(), target.view())?;
    let gx = model.operator().adjoint(g_recon.view())?;
    let (analytic, _) = backward_run(&model, &nets, &record, gx.view(), mode, &bcfg)?;
    let fd = central(&nets, loss)?;
    let loss_rel_err = relative_error(&analytic.flat(), &fd);

    let probe_seed = seed.wrapping_add(17);
    let penalty_rel_err = match jacobian_penalty(&model, &nets, &record, &mut ChaCha8Rng::seed_from_u64(probe_seed))? {
        None => None,
        Some(est) => {
            let fd = central(&nets, |n| {
                let rec = retape_record(n, &record)?;
                let est = jacobian_penalty(&model, n, &rec, &mut ChaCha8Rng::seed_from_u64(probe_seed))?;
                Ok(est.map(|e| e.value).unwrap_or(0.0))
            })?;
            Some(relative_error(&est.grad.flat(), &fd))
        }
    };
    let mut report = GateReport {
        loss_rel_err,
        penalty_rel_err,
        n_params: fd.len(),
        tolerance: GATE_TOLERANCE,
        passed: false,
    };
    report.passed = report.worst().is_finite() && report.worst() <= GATE_TOLERANCE;
    Ok(report)
}

/// [`gradient_check`], turned into an error when it fails.
pub fn require_gradient_check(
    scaling: SynthesisScaling,
    noise_term: bool,
    algo: &AlgorithmConfig,
    template: &Denoisers,
    mode: BackwardMode,
    seed: u64,
) -> Result<GateReport> {
    let report = gradient_check(scaling, noise_term, algo, template, mode, seed)?;
    if !report.passed {
        return Err(Error::GradientCheck {
            what: format!("{} pipeline, {} backward", algo.algorithm.name(), mode.name()),
            rel_err: report.worst(),
            tolerance: GATE_TOLERANCE,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{AlgorithmKind, ModelKind};
    use crate::denoiser::Activation;

    fn template(kind: AlgorithmKind, mx: ModelKind, me: ModelKind) -> Denoisers {
        // DE-Prox denoisers take no injected input
        let outer = kind != AlgorithmKind::Deprox;
        let arch = |io, complex, injection| DenoiserArch {
            io_dim: io,
            hidden_dim: 5,
            depth: 3,
            activation: Activation::Tanh,
            complex,
            injection,
        };
        Denoisers {
            r: Network::Mlp(Mlp::init(arch(8, true, outer && mx == ModelKind::Deq), 1, true).unwrap()),
            q: Network::Mlp(Mlp::init(arch(20, false, outer && me == ModelKind::Deq), 2, true).unwrap()),
        }
    }

    #[test]
    fn configured_pipelines_pass() {
        let cases = [
            (AlgorithmKind::Unrolled, BackwardMode::Ift, true),
            (AlgorithmKind::Udeq, BackwardMode::Ift, true),
            (AlgorithmKind::Udeq, BackwardMode::UnrolledBackprop, true),
            (AlgorithmKind::Udeq, BackwardMode::Ift, false),
            (AlgorithmKind::Deprox, BackwardMode::Ift, true),
            (AlgorithmKind::Deprox, BackwardMode::UnrolledBackprop, true),
            (AlgorithmKind::Deprox, BackwardMode::Ift, false),
        ];
        for (kind, mode, noise) in cases {
            let algo = AlgorithmConfig::new(kind);
            let t = template(kind, algo.model_x, algo.model_e);
            let rep = gradient_check(SynthesisScaling::Unit, noise, &algo, &t, mode, 3).unwrap();
            assert!(rep.passed, "{kind:?} {mode:?} noise={noise}: {rep:?}");
            assert_eq!(rep.penalty_rel_err.is_some(), algo.has_fixed_point());
        }
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
