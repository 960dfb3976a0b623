//! Reverse passes through recorded recovery runs.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::algorithms::{Denoisers, DeproxRecord, RunRecord, StageExecution, StageRecord};
use crate::denoiser::{Network, Tape};
use crate::error::{Error, Result};
use crate::fixed_point::{solve_fixed_point, SolverConfig, SolverTrace};
use crate::signal_model::{SignalModel, StackedVariable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    /// Implicit differentiation at every fixed point.
    #[default]
    Ift,
    /// Exact reverse accumulation through plain solver iterations.
    UnrolledBackprop,
    /// Fixed points are differentiated as if `(I - J)^-1 = I`.
    JacobianFree,
}

impl BackwardMode {
    /// How fixed-point stages must be executed for this mode.
    pub fn execution(&self) -> StageExecution {
        match self {
            Self::UnrolledBackprop => StageExecution::Iterate,
            Self::Ift | Self::JacobianFree => StageExecution::Solve,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ift => "ift",
            Self::UnrolledBackprop => "unrolled_backprop",
            Self::JacobianFree => "jacobian_free",
        }
    }
}

impl std::str::FromStr for BackwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ift" => Ok(Self::Ift),
            "unrolled_backprop" => Ok(Self::UnrolledBackprop),
            "jacobian_free" => Ok(Self::JacobianFree),
            other => Err(Error::Config(format!("unknown backward mode {other:?}"))),
        }
    }
}

/// Parameter gradients for the two denoiser slots, laid out like the
/// networks' flat parameter vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientBundle {
    pub r: Vec<f64>,
    pub q: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(nets: &Denoisers) -> Self {
        Self {
            r: vec![0.0; nets.r.param_count()],
            q: vec![0.0; nets.q.param_count()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.r.iter().chain(&self.q).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(&self.q).all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        add_into(&mut self.r, &other.r, scale);
        add_into(&mut self.q, &other.q, scale);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.r.iter().chain(&self.q).copied().collect()
    }

    /// Gradient slices named `r.<tensor>` / `q.<tensor>`.
    pub fn named<'a>(&'a self, nets: &Denoisers) -> Vec<(String, &'a [f64])> {
        let mut out = Vec::new();
        for (slot, net, g) in [("r", &nets.r, &self.r), ("q", &nets.q, &self.q)] {
            if let Network::Mlp(m) = net {
                for spec in m.specs() {
                    out.push((
                        format!("{slot}.{}", spec.name),
                        &g[spec.offset..spec.offset + spec.len()],
                    ));
                }
            }
        }
        out
    }
}

fn add_into(acc: &mut Vec<f64>, add: &[f64], scale: f64) {
    if add.is_empty() {
        return;
    }
    if acc.is_empty() {
        acc.resize(add.len(), 0.0);
    }
    acc.iter_mut().zip(add).for_each(|(a, b)| *a += scale * b);
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BackwardStats {
    pub adjoint_solves: usize,
    pub adjoint_converged: usize,
    pub adjoint_iterations: usize,
}

impl BackwardStats {
    fn record(&mut self, trace: &SolverTrace) {
        self.adjoint_solves += 1;
        self.adjoint_iterations += trace.iterations_used;
        if trace.converged {
            self.adjoint_converged += 1;
        } else {
            log::warn!(
                "adjoint solve stopped after {} iterations at relative residual {:.3e}",
                trace.iterations_used,
                trace.last_residual().unwrap_or(f64::NAN)
            );
        }
    }
}

/// Solves `v = upstream + J^T v` where `state_vjp(u) = J^T u`.
///
/// Non-convergence is not an error: the last iterate is returned together
/// with the trace.
pub fn solve_adjoint<F>(mut state_vjp: F, upstream: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, SolverTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    solve_fixed_point(
        |v| {
            let mut out = state_vjp(v)?;
            out.iter_mut().zip(upstream).for_each(|(o, g)| *o += g);
            Ok(out)
        },
        upstream,
        cfg,
    )
}

/// Gradient of a loss through a fixed point `p* = f(p*; theta)`.
///
/// `state_vjp(u) = u^T df/dp` and `param_vjp(v) = v^T df/dtheta`, both at
/// `p*`. With `jacobian_free` the adjoint solve is skipped (`v = upstream`).
pub fn backward_ift<FS, FP>(
    state_vjp: FS,
    mut param_vjp: FP,
    upstream: &[f64],
    cfg: &SolverConfig,
    jacobian_free: bool,
) -> Result<(Vec<f64>, Option<SolverTrace>)>
where
    FS: FnMut(&[f64]) -> Result<Vec<f64>>,
    FP: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if jacobian_free {
        return Ok((param_vjp(upstream)?, None));
    }
    let (v, trace) = solve_adjoint(state_vjp, upstream, cfg)?;
    Ok((param_vjp(&v)?, Some(trace)))
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn unflat(v: Vec<f64>, dim: (usize, usize)) -> Result<Array2<f64>> {
    Array2::from_shape_vec(dim, v).map_err(|e| Error::Numeric(format!("adjoint reshape: {e}")))
}

struct StageGrad {
    input: Array2<f64>,
    warm: Array2<f64>,
    params: Vec<f64>,
}

fn stage_backward(
    net: &Network,
    rec: &StageRecord,
    g_out: &Array2<f64>,
    mode: BackwardMode,
    cfg: &SolverConfig,
    stats: &mut BackwardStats,
) -> Result<StageGrad> {
    let zeros = || Array2::zeros(g_out.raw_dim());
    match rec {
        StageRecord::Skipped => Ok(StageGrad {
            input: zeros(),
            warm: g_out.clone(),
            params: Vec::new(),
        }),
        StageRecord::Pass(tape) => {
            let r = net.vjp(tape, g_out.view(), true)?;
            Ok(StageGrad {
                input: r.input,
                warm: zeros(),
                params: r.params,
            })
        }
        StageRecord::Equilibrium { tape, .. } => {
            let dim = g_out.dim();
            let v = if mode == BackwardMode::JacobianFree {
                g_out.clone()
            } else {
                let (v, trace) = solve_adjoint(
                    |u| Ok(flat(&net.vjp(tape, unflat(u.to_vec(), dim)?.view(), false)?.input)),
                    &flat(g_out),
                    cfg,
                )?;
                stats.record(&trace);
                unflat(v, dim)?
            };
            let r = net.vjp(tape, v.view(), true)?;
            Ok(StageGrad {
                input: r.injection.unwrap_or_else(zeros),
                warm: zeros(),
                params: r.params,
            })
        }
        StageRecord::Iterated(tapes) => {
            let mut g = g_out.clone();
            let mut input = zeros();
            let mut params = Vec::new();
            for tape in tapes.iter().rev() {
                let r = net.vjp(tape, g.view(), true)?;
                add_into(&mut params, &r.params, 1.0);
                if let Some(gi) = r.injection {
                    input += &gi;
                }
                g = r.input;
            }
            Ok(StageGrad { input, warm: g, params })
        }
    }
}

/// Parameter gradients of a loss whose cotangent on the final `X` is `grad_x`.
pub fn backward_run(
    model: &SignalModel,
    nets: &Denoisers,
    record: &RunRecord,
    grad_x: ArrayView2<'_, f64>,
    mode: BackwardMode,
    cfg: &SolverConfig,
) -> Result<(GradientBundle, BackwardStats)> {
    let mut stats = BackwardStats::default();
    let mut bundle = GradientBundle::zeros(nets);
    let (n2, s, c) = (model.coefficient_rows(), model.samples(), grad_x.ncols());
    if grad_x.nrows() != n2 {
        return Err(Error::dims("cotangent rows", n2, grad_x.nrows()));
    }
    match record {
        RunRecord::Outer(rounds) => {
            let mut gx = grad_x.to_owned();
            let mut ge = Array2::<f64>::zeros((s, c));
            for round in rounds.iter().rev() {
                let sx = stage_backward(&nets.r, &round.x, &gx, mode, cfg, &mut stats)?;
                let se = stage_backward(&nets.q, &round.e, &ge, mode, cfg, &mut stats)?;
                add_into(&mut bundle.r, &sx.params, 1.0);
                add_into(&mut bundle.q, &se.params, 1.0);
                let back = model.gradient_step_transpose(&StackedVariable {
                    x: sx.input,
                    e: se.input,
                })?;
                gx = back.x + sx.warm;
                ge = back.e + se.warm;
            }
        }
        RunRecord::Deprox(DeproxRecord::Iterated(steps)) => {
            let mut g = StackedVariable {
                x: grad_x.to_owned(),
                e: Array2::zeros((s, c)),
            };
            for (rt, qt) in steps.iter().rev() {
                let rx = nets.r.vjp(rt, g.x.view(), true)?;
                add_into(&mut bundle.r, &rx.params, 1.0);
                let ue = match qt {
                    Some(qt) => {
                        let rq = nets.q.vjp(qt, g.e.view(), true)?;
                        add_into(&mut bundle.q, &rq.params, 1.0);
                        rq.input
                    }
                    None => g.e.clone(),
                };
                g = model.gradient_step_transpose(&StackedVariable { x: rx.input, e: ue })?;
            }
        }
        RunRecord::Deprox(DeproxRecord::Equilibrium { r, q, .. }) => {
            let noise = q.is_some();
            let upstream = StackedVariable {
                x: grad_x.to_owned(),
                e: Array2::zeros((s, c)),
            };
            let v = if mode == BackwardMode::JacobianFree {
                upstream
            } else {
                let pack = |p: &StackedVariable| if noise { p.to_flat() } else { flat(&p.x) };
                let (v, trace) = solve_adjoint(
                    |u| {
                        let u = unpack(u, noise, n2, s, c)?;
                        Ok(pack(&deprox_state_vjp(model, nets, r, q.as_ref(), &u)?))
                    },
                    &pack(&upstream),
                    cfg,
                )?;
                stats.record(&trace);
                unpack(&v, noise, n2, s, c)?
            };
            add_into(&mut bundle.r, &nets.r.vjp(r, v.x.view(), true)?.params, 1.0);
            if let Some(qt) = q {
                add_into(&mut bundle.q, &nets.q.vjp(qt, v.e.view(), true)?.params, 1.0);
            }
        }
    }
    Ok((bundle, stats))
}

fn unpack(v: &[f64], noise: bool, n2: usize, s: usize, c: usize) -> Result<StackedVariable> {
    if noise {
        StackedVariable::from_flat(v, n2, s, c)
    } else {
        Ok(StackedVariable {
            x: unflat(v.to_vec(), (n2, c))?,
            e: Array2::zeros((s, c)),
        })
    }
}

/// `J^T u` for the joint map `p -> D(G(p))` at the taped point.
fn deprox_state_vjp(
    model: &SignalModel,
    nets: &Denoisers,
    r: &Tape,
    q: Option<&Tape>,
    u: &StackedVariable,
) -> Result<StackedVariable> {
    let x = nets.r.vjp(r, u.x.view(), false)?.input;
    let e = match q {
        Some(qt) => nets.q.vjp(qt, u.e.view(), false)?.input,
        None => Array2::zeros(u.e.raw_dim()),
    };
    let mut out = model.gradient_step_transpose(&StackedVariable { x, e })?;
    if q.is_none() {
        out.e.fill(0.0);
    }
    Ok(out)
}

/// One-sample Hutchinson penalty on every fixed-point component of a run,
/// with its parameter gradient.
///
/// For a single map the penalty is `||J^T eps||^2 / d`. Several components
/// share one estimate normalized by their total dimension. The gradient
/// treats the fixed point and the injected input as constants.
#[derive(Debug, Clone)]
pub struct PenaltyEstimate {
    pub value: f64,
    pub grad: GradientBundle,
    pub dim: usize,
}

fn normal_like<R: Rng + ?Sized>(dim: (usize, usize), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

pub fn jacobian_penalty<R: Rng + ?Sized>(
    model: &SignalModel,
    nets: &Denoisers,
    record: &RunRecord,
    rng: &mut R,
) -> Result<Option<PenaltyEstimate>> {
    let mut sq = 0.0;
    let mut dim = 0usize;
    let mut grad = GradientBundle::zeros(nets);
    match record {
        RunRecord::Outer(rounds) => {
            let Some(last) = rounds.last() else { return Ok(None) };
            for (net, rec, slot) in [(&nets.r, &last.x, 0), (&nets.q, &last.e, 1)] {
                let tape = match rec {
                    StageRecord::Equilibrium { tape, .. } => tape,
                    StageRecord::Iterated(tapes) => match tapes.last() {
                        Some(t) => t,
                        None => continue,
                    },
                    _ => continue,
                };
                let out_dim = net_output_dim(tape);
                let eps = normal_like(out_dim, rng);
                let w = net.vjp(tape, eps.view(), false)?.input;
                sq += w.iter().map(|v| v * v).sum::<f64>();
                dim += eps.len();
                let g = net.jacobian_bilinear_grad(tape, w.view(), eps.view())?;
                add_into(if slot == 0 { &mut grad.r } else { &mut grad.q }, &g, 2.0);
            }
        }
        RunRecord::Deprox(rec) => {
            let (r, q) = match rec {
                DeproxRecord::Equilibrium { r, q, .. } => (r, q.as_ref()),
                DeproxRecord::Iterated(steps) => match steps.last() {
                    Some((r, q)) => (r, q.as_ref()),
                    None => return Ok(None),
                },
            };
            let (n2, c) = net_output_dim(r);
            let s = model.samples();
            let eps = StackedVariable {
                x: normal_like((n2, c), rng),
                e: if q.is_some() {
                    normal_like((s, c), rng)
                } else {
                    Array2::zeros((s, c))
                },
            };
            let w = deprox_state_vjp(model, nets, r, q, &eps)?;
            sq = w.x.iter().chain(w.e.iter()).map(|v| v * v).sum();
            dim = eps.x.len() + if q.is_some() { eps.e.len() } else { 0 };
            // eps^T D'(G_lin w): the linear part is symmetric
            let mut u = model.gradient_step_transpose(&w)?;
            if q.is_none() {
                u.e.fill(0.0);
            }
            add_into(
                &mut grad.r,
                &nets.r.jacobian_bilinear_grad(r, u.x.view(), eps.x.view())?,
                2.0,
            );
            if let Some(qt) = q {
                add_into(
                    &mut grad.q,
                    &nets.q.jacobian_bilinear_grad(qt, u.e.view(), eps.e.view())?,
                    2.0,
                );
            }
        }
    }
    if dim == 0 {
        return Ok(None);
    }
    let d = dim as f64;
    grad.r.iter_mut().chain(grad.q.iter_mut()).for_each(|g| *g /= d);
    let value = sq / d;
    if !value.is_finite() {
        return Err(Error::Numeric("Jacobian penalty".into()));
    }
    Ok(Some(PenaltyEstimate { value, grad, dim }))
}

fn net_output_dim(tape: &Tape) -> (usize, usize) {
    match tape {
        Tape::Mlp(t) => t.output().dim(),
        Tape::Input(x) => x.dim(),
    }
}
