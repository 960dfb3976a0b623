//! Recovery algorithms built from gradient steps, denoisers and fixed-point
//! solves.
//!
//! * Unrolled: `T` rounds of gradient step then one pass of `R` and `Q`.
//! * UDEQ: the same outer loop, with `X` set to the fixed point of
//!   `R(X*; X_tilde)` in every round.
//! * DE-Prox: one fixed point of the joint map `p -> D(G(p))` where `G` is the
//!   gradient step and `D` applies `R` and `Q` blockwise.
//! * ISTA: the outer loop with soft-thresholding in place of both denoisers.
//!
//! Every algorithm starts from `X = 0, E = 0`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Network, Tape};
use crate::error::{Error, Result};
use crate::fixed_point::{solve_fixed_point, SolverConfig, SolverTrace};
use crate::signal_model::{SignalModel, StackedVariable};
use crate::spectral::{SpectralCoefficients, WindowedSignal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Unrolled,
    Deprox,
    Udeq,
    IstaOracle,
}

impl AlgorithmKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Unrolled => "unrolled",
            Self::Deprox => "deprox",
            Self::Udeq => "udeq",
            Self::IstaOracle => "ista",
        }
    }

    /// Denoiser types used when none are given explicitly.
    pub fn default_models(&self) -> (ModelKind, ModelKind) {
        match self {
            Self::Udeq => (ModelKind::Deq, ModelKind::Nn),
            Self::Deprox => (ModelKind::Deq, ModelKind::Deq),
            Self::Unrolled | Self::IstaOracle => (ModelKind::Nn, ModelKind::Nn),
        }
    }
}

impl std::str::FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unrolled" => Ok(Self::Unrolled),
            "deprox" => Ok(Self::Deprox),
            "udeq" => Ok(Self::Udeq),
            "ista" | "ista_oracle" => Ok(Self::IstaOracle),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// How a denoiser is used inside one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Solved to the fixed point of `D(y; input)`.
    Deq,
    /// One forward pass `D(input)`.
    Nn,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deq" => Ok(Self::Deq),
            "nn" => Ok(Self::Nn),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub algorithm: AlgorithmKind,
    pub unroll_t: usize,
    pub solver: SolverConfig,
    pub model_x: ModelKind,
    pub model_e: ModelKind,
    pub ista_threshold: f64,
}

impl AlgorithmConfig {
    pub fn new(algorithm: AlgorithmKind) -> Self {
        let (model_x, model_e) = algorithm.default_models();
        Self {
            algorithm,
            unroll_t: 3,
            solver: SolverConfig::default(),
            model_x,
            model_e,
            ista_threshold: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unroll_t == 0 {
            return Err(Error::Config("unroll_t must be at least 1".into()));
        }
        self.solver.validate()?;
        if self.algorithm == AlgorithmKind::IstaOracle && !(self.ista_threshold >= 0.0) {
            return Err(Error::Config("ista_threshold must be nonnegative".into()));
        }
        Ok(())
    }

    /// True when some denoiser is solved to a fixed point.
    pub fn has_fixed_point(&self) -> bool {
        match self.algorithm {
            AlgorithmKind::Deprox => true,
            AlgorithmKind::IstaOracle => false,
            AlgorithmKind::Unrolled | AlgorithmKind::Udeq => {
                self.model_x == ModelKind::Deq || self.model_e == ModelKind::Deq
            }
        }
    }

    /// Applies a test-time iteration budget: `T` for the outer-loop
    /// algorithms, the solver's iteration cap for DE-Prox.
    pub fn with_test_iters(mut self, iters: usize) -> Self {
        match self.algorithm {
            AlgorithmKind::Deprox => self.solver.max_iters = iters,
            _ => self.unroll_t = iters,
        }
        self
    }
}

/// The two denoiser slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoisers {
    pub r: Network,
    pub q: Network,
}

#[derive(Debug, Clone)]
pub struct RecoveryResult {
    /// Stacked real coefficients (`2N x C`).
    pub x: Array2<f64>,
    pub e: Array2<f64>,
    /// `Re(F^-1 X)` (`S x C`).
    pub reconstructed: Array2<f64>,
    pub traces: Vec<SolverTrace>,
    pub iterations_run: usize,
}

impl RecoveryResult {
    pub fn coefficients(&self, model: &SignalModel) -> Result<SpectralCoefficients> {
        SpectralCoefficients::from_stacked(self.x.view(), *model.grid())
    }
}

/// How fixed-point stages are executed when a run is recorded for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageExecution {
    /// Solver to convergence; the tape is taken at the fixed point.
    Solve,
    /// `solver.max_iters` plain iterations, every pass taped.
    Iterate,
}

/// Reverse-pass information for one denoiser in one outer round.
#[derive(Debug, Clone)]
pub enum StageRecord {
    /// Single pass on the gradient-step output.
    Pass(Tape),
    /// Fixed point `y* = D(y*; input)`; the tape is `D` evaluated at `y*`.
    Equilibrium { tape: Tape, point: Array2<f64> },
    /// Plain iterations `y_{k+1} = D(y_k; input)` from a warm start.
    Iterated(Vec<Tape>),
    /// Noise term disabled.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct OuterRound {
    pub x: StageRecord,
    pub e: StageRecord,
}

#[derive(Debug, Clone)]
pub enum DeproxRecord {
    /// Tapes of `R` and `Q` evaluated at the gradient step of the fixed point.
    Equilibrium {
        r: Tape,
        q: Option<Tape>,
        point: StackedVariable,
    },
    /// Tapes of every plain iteration from zero.
    Iterated(Vec<(Tape, Option<Tape>)>),
}

#[derive(Debug, Clone)]
pub enum RunRecord {
    Outer(Vec<OuterRound>),
    Deprox(DeproxRecord),
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn unflat(v: Vec<f64>, dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_vec(dim, v).expect("solver preserves length")
}

/// Runs one recovery over the columns of `z` (`S x C`).
pub fn recover(
    model: &SignalModel,
    cfg: &AlgorithmConfig,
    nets: &Denoisers,
    z: ArrayView2<'_, f64>,
) -> Result<RecoveryResult> {
    Ok(run(model, cfg, nets, z, None)?.0)
}

/// Like [`recover`] but also keeps what the reverse pass needs.
pub fn recover_recorded(
    model: &SignalModel,
    cfg: &AlgorithmConfig,
    nets: &Denoisers,
    z: ArrayView2<'_, f64>,
    execution: StageExecution,
) -> Result<(RecoveryResult, RunRecord)> {
    let (res, rec) = run(model, cfg, nets, z, Some(execution))?;
    Ok((res, rec.expect("recording requested")))
}

pub fn run_unrolled(
    model: &SignalModel,
    nets: &Denoisers,
    cfg: &AlgorithmConfig,
    z: &WindowedSignal,
) -> Result<RecoveryResult> {
    expect_kind(cfg, AlgorithmKind::Unrolled)?;
    recover(model, cfg, nets, z.data.view())
}

pub fn run_udeq(
    model: &SignalModel,
    nets: &Denoisers,
    cfg: &AlgorithmConfig,
    z: &WindowedSignal,
) -> Result<RecoveryResult> {
    expect_kind(cfg, AlgorithmKind::Udeq)?;
    recover(model, cfg, nets, z.data.view())
}

pub fn run_deprox(
    model: &SignalModel,
    nets: &Denoisers,
    cfg: &AlgorithmConfig,
    z: &WindowedSignal,
) -> Result<RecoveryResult> {
    expect_kind(cfg, AlgorithmKind::Deprox)?;
    recover(model, cfg, nets, z.data.view())
}

/// Proximal gradient with the `l1` prox on both blocks (complex magnitude
/// shrinkage on `X`).
pub fn run_ista_oracle(model: &SignalModel, cfg: &AlgorithmConfig, z: &WindowedSignal) -> Result<RecoveryResult> {
    expect_kind(cfg, AlgorithmKind::IstaOracle)?;
    recover(model, cfg, &ista_denoisers(cfg.ista_threshold), z.data.view())
}

pub fn ista_denoisers(tau: f64) -> Denoisers {
    Denoisers {
        r: Network::SoftThreshold { tau, complex: true },
        q: Network::SoftThreshold { tau, complex: false },
    }
}

fn expect_kind(cfg: &AlgorithmConfig, kind: AlgorithmKind) -> Result<()> {
    if cfg.algorithm != kind {
        return Err(Error::Config(format!(
            "configuration is for {}, not {}",
            cfg.algorithm.name(),
            kind.name()
        )));
    }
    Ok(())
}

fn run(
    model: &SignalModel,
    cfg: &AlgorithmConfig,
    nets: &Denoisers,
    z: ArrayView2<'_, f64>,
    record: Option<StageExecution>,
) -> Result<(RecoveryResult, Option<RunRecord>)> {
    cfg.validate()?;
    if z.nrows() != model.samples() {
        return Err(Error::dims("measurement rows", model.samples(), z.nrows()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("measurement".into()));
    }
    match cfg.algorithm {
        AlgorithmKind::Deprox => run_joint(model, cfg, nets, z, record),
        _ => run_outer(model, cfg, nets, z, record),
    }
}

fn finish(
    model: &SignalModel,
    v: StackedVariable,
    traces: Vec<SolverTrace>,
    iterations_run: usize,
) -> Result<RecoveryResult> {
    let reconstructed = model.operator().forward(v.x.view())?;
    Ok(RecoveryResult {
        x: v.x,
        e: v.e,
        reconstructed,
        traces,
        iterations_run,
    })
}

fn run_outer(
    model: &SignalModel,
    cfg: &AlgorithmConfig,
    nets: &Denoisers,
    z: ArrayView2<'_, f64>,
    record: Option<StageExecution>,
) -> Result<(RecoveryResult, Option<RunRecord>)> {
    let mut v = StackedVariable::zeros(model.coefficient_rows(), model.samples(), z.ncols());
    let mut traces = Vec::new();
    let mut rounds = Vec::new();
    for t in 0..cfg.unroll_t {
        let stepped = model.gradient_step(&v, z)?;
        let (x, xr) = stage(&nets.r, cfg.model_x, &stepped.x, &v.x, cfg, record, &mut traces)
            .map_err(|e| at_iteration(e, t, "X"))?;
        let (e, er) = if model.noise_term() {
            stage(&nets.q, cfg.model_e, &stepped.e, &v.e, cfg, record, &mut traces)
                .map_err(|e| at_iteration(e, t, "E"))?
        } else {
            (v.e.clone(), StageRecord::Skipped)
        };
        v = StackedVariable { x, e };
        if record.is_some() {
            rounds.push(OuterRound { x: xr, e: er });
        }
    }
    let result = finish(model, v, traces, cfg.unroll_t)?;
    Ok((result, record.map(|_| RunRecord::Outer(rounds))))
}

fn at_iteration(e: Error, t: usize, block: &str) -> Error {
    match e {
        Error::Numeric(what) => Error::Numeric(format!("{what} (outer iteration {t}, {block} update)")),
        other => other,
    }
}

/// One denoiser update inside the outer loop.
fn stage(
    net: &Network,
    kind: ModelKind,
    input: &Array2<f64>,
    warm: &Array2<f64>,
    cfg: &AlgorithmConfig,
    record: Option<StageExecution>,
    traces: &mut Vec<SolverTrace>,
) -> Result<(Array2<f64>, StageRecord)> {
    match kind {
        ModelKind::Nn => {
            if record.is_some() {
                let (y, tape) = net.forward(input.view(), None)?;
                Ok((y, StageRecord::Pass(tape)))
            } else {
                Ok((net.apply(input.view(), None)?, StageRecord::Skipped))
            }
        }
        ModelKind::Deq => {
            if let Network::Mlp(m) = net {
                if !m.arch().injection {
                    return Err(Error::Config("a fixed-point denoiser needs an injection branch".into()));
                }
            }
            let inj = Some(input.view());
            if record == Some(StageExecution::Iterate) {
                let mut y = warm.clone();
                let mut tapes = Vec::with_capacity(cfg.solver.max_iters);
                for _ in 0..cfg.solver.max_iters {
                    let (next, tape) = net.forward(y.view(), inj)?;
                    tapes.push(tape);
                    y = next;
                }
                return Ok((y, StageRecord::Iterated(tapes)));
            }
            let dim = warm.dim();
            let (sol, trace) = solve_fixed_point(
                |p| Ok(flat(&net.apply(unflat(p.to_vec(), dim).view(), inj)?)),
                &flat(warm),
                &cfg.solver,
            )?;
            traces.push(trace);
            let y = unflat(sol, dim);
            if record.is_some() {
                let (_, tape) = net.forward(y.view(), inj)?;
                Ok((y.clone(), StageRecord::Equilibrium { tape, point: y }))
            } else {
                Ok((y, StageRecord::Skipped))
            }
        }
    }
}

/// The joint DE-Prox map `p -> [R(G_X p); Q(G_E p)]`.
pub fn joint_map(
    model: &SignalModel,
    nets: &Denoisers,
    z: ArrayView2<'_, f64>,
    p: &StackedVariable,
) -> Result<StackedVariable> {
    let g = model.gradient_step(p, z)?;
    let x = nets.r.apply(g.x.view(), None)?;
    let e = if model.noise_term() {
        nets.q.apply(g.e.view(), None)?
    } else {
        p.e.clone()
    };
    Ok(StackedVariable { x, e })
}

fn run_joint(
    model: &SignalModel,
    cfg: &AlgorithmConfig,
    nets: &Denoisers,
    z: ArrayView2<'_, f64>,
    record: Option<StageExecution>,
) -> Result<(RecoveryResult, Option<RunRecord>)> {
    let (n2, s, c) = (model.coefficient_rows(), model.samples(), z.ncols());
    let noise = model.noise_term();
    let p0 = StackedVariable::zeros(n2, s, c);

    if record == Some(StageExecution::Iterate) {
        let mut p = p0;
        let mut steps = Vec::with_capacity(cfg.solver.max_iters);
        for _ in 0..cfg.solver.max_iters {
            let g = model.gradient_step(&p, z)?;
            let (x, rt) = nets.r.forward(g.x.view(), None)?;
            let (e, qt) = if noise {
                let (e, qt) = nets.q.forward(g.e.view(), None)?;
                (e, Some(qt))
            } else {
                (p.e.clone(), None)
            };
            steps.push((rt, qt));
            p = StackedVariable { x, e };
        }
        let iters = steps.len();
        let res = finish(model, p, Vec::new(), iters)?;
        return Ok((res, Some(RunRecord::Deprox(DeproxRecord::Iterated(steps)))));
    }

    // without the noise term E stays zero, so only X enters the solver
    let pack = |p: &StackedVariable| if noise { p.to_flat() } else { flat(&p.x) };
    let unpack = |v: &[f64]| -> Result<StackedVariable> {
        if noise {
            StackedVariable::from_flat(v, n2, s, c)
        } else {
            Ok(StackedVariable {
                x: unflat(v.to_vec(), (n2, c)),
                e: Array2::zeros((s, c)),
            })
        }
    };
    let (sol, trace) = solve_fixed_point(
        |v| Ok(pack(&joint_map(model, nets, z, &unpack(v)?)?)),
        &pack(&p0),
        &cfg.solver,
    )?;
    let p = unpack(&sol)?;
    let iters = trace.iterations_used;
    let rec = if record.is_some() {
        let g = model.gradient_step(&p, z)?;
        let (_, r) = nets.r.forward(g.x.view(), None)?;
        let q = if noise {
            Some(nets.q.forward(g.e.view(), None)?.1)
        } else {
            None
        };
        Some(RunRecord::Deprox(DeproxRecord::Equilibrium { r, q, point: p.clone() }))
    } else {
        None
    };
    Ok((finish(model, p, vec![trace], iters)?, rec))
}
