//! Epoch loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{recover, recover_recorded, AlgorithmConfig, Denoisers};
use crate::checkpoint::Checkpoint;
use crate::denoiser::Network;
use crate::error::{Error, Result};
use crate::fixed_point::SolverConfig;
use crate::signal_model::SignalModel;

use super::backward::{backward_run, jacobian_penalty, BackwardMode};
use super::gate::{require_gradient_check, GateReport};
use super::loss::standardized_mse;
use super::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// 1-based epoch from which the rate is halved.
    pub lr_halve_epoch: usize,
    pub lambda_value: f64,
    pub lambda_bernoulli_p: f64,
    pub backward_mode: BackwardMode,
    pub seed: u64,
    pub hutchinson_samples: usize,
    pub backward_solver: SolverConfig,
    pub adam: AdamConfig,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub gradient_gate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            epochs: 10,
            lr: 3e-4,
            lr_halve_epoch: 10,
            lambda_value: 5.0,
            lambda_bernoulli_p: 0.5,
            backward_mode: BackwardMode::Ift,
            seed: 0,
            hutchinson_samples: 1,
            backward_solver: SolverConfig::backward(),
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            gradient_gate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_bernoulli_p) {
            return Err(Error::Config("lambda_bernoulli_p must lie in [0, 1]".into()));
        }
        if !(self.lambda_value >= 0.0) {
            return Err(Error::Config("lambda_value must be nonnegative".into()));
        }
        if self.hutchinson_samples == 0 {
            return Err(Error::Config("hutchinson_samples must be at least 1".into()));
        }
        self.backward_solver.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halve_epoch > 0 && epoch >= self.lr_halve_epoch {
            0.5 * self.lr
        } else {
            self.lr
        }
    }

    /// One draw of the regularization weight.
    pub fn draw_lambda<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.lambda_bernoulli_p {
            self.lambda_value
        } else {
            0.0
        }
    }
}

/// One training window: model input (`S x K`) and the standardized
/// reference waveform (`S`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub input: Array2<f64>,
    pub target: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub jacobian_penalty: f64,
    pub total: f64,
    pub lambda_used: f64,
}

impl LossBreakdown {
    pub fn new(mse: f64, jacobian_penalty: f64, lambda_used: f64) -> Self {
        Self {
            mse,
            jacobian_penalty,
            total: mse + lambda_used * jacobian_penalty,
            lambda_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Gate(GateReport),
    Step {
        epoch: usize,
        step: usize,
        mse: f64,
        penalty: f64,
        lambda: f64,
        total: f64,
        solver_convergence_rate: f64,
        adjoint_convergence_rate: f64,
        grad_norm: f64,
        lr: f64,
    },
    Epoch {
        epoch: usize,
        mean_loss: Option<f64>,
        mean_mse: Option<f64>,
        mean_penalty: Option<f64>,
        solver_convergence_rate: Option<f64>,
        mean_grad_norm: Option<f64>,
        val_mse: Option<f64>,
    },
}

/// Where training writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    /// Stored in every checkpoint's metadata.
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub nets: Denoisers,
    pub log: Vec<LogRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

fn batch_arrays(pairs: &[&TrainPair]) -> Result<(Array2<f64>, Array2<f64>)> {
    let k = pairs[0].input.ncols();
    let inputs: Vec<_> = pairs.iter().map(|p| p.input.view()).collect();
    let z = concatenate(Axis(1), &inputs).map_err(|e| Error::dims("batch", pairs[0].input.nrows(), e.to_string()))?;
    let mut targets = Vec::with_capacity(pairs.len() * k);
    for p in pairs {
        if p.target.len() != p.input.nrows() {
            return Err(Error::dims("target length", p.input.nrows(), p.target.len()));
        }
        for _ in 0..p.input.ncols() {
            targets.push(p.target.view().insert_axis(Axis(1)));
        }
    }
    let t = concatenate(Axis(1), &targets).expect("equal lengths checked");
    Ok((z, t))
}

/// Mean standardized waveform MSE of the current networks over `pairs`.
pub fn evaluate_mse(
    model: &SignalModel,
    algo: &AlgorithmConfig,
    nets: &Denoisers,
    pairs: &[TrainPair],
    batch_size: usize,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let (z, t) = batch_arrays(&refs)?;
        let res = recover(model, algo, nets, z.view())?;
        let (mse, _) = standardized_mse(res.reconstructed.view(), t.view())?;
        acc += mse * t.len() as f64;
        count += t.len();
    }
    Ok(acc / count.max(1) as f64)
}

fn checkpoint_of(nets: &Denoisers, meta: &serde_json::Value, epoch: usize) -> Checkpoint {
    let mut meta = meta.clone();
    if let serde_json::Value::Object(m) = &mut meta {
        m.insert("epoch".into(), epoch.into());
    }
    let mut ck = Checkpoint::new(meta);
    for (name, net) in [("r", &nets.r), ("q", &nets.q)] {
        if let Network::Mlp(m) = net {
            ck = ck.with_network(name, m.clone());
        }
    }
    ck
}

struct Logger {
    records: Vec<LogRecord>,
    file: Option<BufWriter<File>>,
}

impl Logger {
    fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Trains the denoisers in `nets` on `train` and returns them with the log.
pub fn train(
    model: &SignalModel,
    algo: &AlgorithmConfig,
    cfg: &TrainConfig,
    mut nets: Denoisers,
    train: &[TrainPair],
    val: Option<&[TrainPair]>,
    output: Option<&TrainOutput>,
) -> Result<TrainResult> {
    cfg.validate()?;
    algo.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut logger = Logger {
        records: Vec::new(),
        file: None,
    };
    if let Some(out) = output {
        fs::create_dir_all(&out.dir)?;
        logger.file = Some(BufWriter::new(File::create(out.dir.join(LOG_FILE))?));
    }
    let meta = output.map(|o| o.meta.clone()).unwrap_or(serde_json::Value::Null);

    if cfg.gradient_gate {
        let report = require_gradient_check(
            model.operator().scaling(),
            model.noise_term(),
            algo,
            &nets,
            cfg.backward_mode,
            cfg.seed,
        )?;
        log::info!("gradient check passed, worst relative error {:.2e}", report.worst());
        logger.push(LogRecord::Gate(report))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_r = Adam::new(nets.r.param_count(), cfg.adam);
    let mut adam_q = Adam::new(nets.q.param_count(), cfg.adam);
    let use_penalty = algo.has_fixed_point();

    if let Some(v) = val {
        let val_mse = evaluate_mse(model, algo, &nets, v, cfg.batch_size)?;
        logger.push(LogRecord::Epoch {
            epoch: 0,
            mean_loss: None,
            mean_mse: None,
            mean_penalty: None,
            solver_convergence_rate: None,
            mean_grad_norm: None,
            val_mse: Some(val_mse),
        })?;
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let (mut sum_loss, mut sum_mse, mut sum_pen, mut sum_gn) = (0.0, 0.0, 0.0, 0.0);
        let (mut solves, mut converged) = (0usize, 0usize);
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let lambda = if use_penalty { cfg.draw_lambda(&mut rng) } else { 0.0 };
            let pairs: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
            let outcome = train_step(model, algo, cfg, &nets, &pairs, lambda, &mut rng);
            let (loss, grads, rate, adj_rate, n_solves, n_conv) = match outcome {
                Ok(v) => v,
                Err(e @ (Error::Numeric(_) | Error::SolverDiverged { .. })) => {
                    return Err(abort(output, &nets, &meta, epoch, step, &e.to_string()));
                }
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(abort(output, &nets, &meta, epoch, step, "non-finite loss or gradient"));
            }
            let grad_norm = grads.norm();
            adam_r.step(nets.r.params_mut(), &grads.r, lr);
            adam_q.step(nets.q.params_mut(), &grads.q, lr);
            logger.push(LogRecord::Step {
                epoch,
                step,
                mse: loss.mse,
                penalty: loss.jacobian_penalty,
                lambda: loss.lambda_used,
                total: loss.total,
                solver_convergence_rate: rate,
                adjoint_convergence_rate: adj_rate,
                grad_norm,
                lr,
            })?;
            sum_loss += loss.total;
            sum_mse += loss.mse;
            sum_pen += loss.jacobian_penalty;
            sum_gn += grad_norm;
            solves += n_solves;
            converged += n_conv;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let val_mse = match val {
            Some(v) => Some(evaluate_mse(model, algo, &nets, v, cfg.batch_size)?),
            None => None,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} mse {:.5}{}",
            sum_loss / b,
            sum_mse / b,
            val_mse.map(|v| format!(" val {v:.5}")).unwrap_or_default()
        );
        logger.push(LogRecord::Epoch {
            epoch,
            mean_loss: Some(sum_loss / b),
            mean_mse: Some(sum_mse / b),
            mean_penalty: Some(sum_pen / b),
            solver_convergence_rate: Some(if solves == 0 {
                1.0
            } else {
                converged as f64 / solves as f64
            }),
            mean_grad_norm: Some(sum_gn / b),
            val_mse,
        })?;
        if let Some(out) = output {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint_of(&nets, &meta, epoch).save(&out.dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
        }
    }
    if let Some(out) = output {
        checkpoint_of(&nets, &meta, cfg.epochs).save(&out.dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainResult {
        nets,
        log: logger.records,
    })
}

fn abort(
    output: Option<&TrainOutput>,
    nets: &Denoisers,
    meta: &serde_json::Value,
    epoch: usize,
    step: usize,
    why: &str,
) -> Error {
    let mut msg = format!("{why} at epoch {epoch}, step {step}");
    if let Some(out) = output {
        let path = out.dir.join("diagnostic.ckpt");
        match checkpoint_of(nets, meta, epoch).save(&path) {
            Ok(()) => msg.push_str(&format!("; parameters saved to {}", path.display())),
            Err(e) => msg.push_str(&format!("; diagnostic checkpoint failed: {e}")),
        }
    }
    Error::Training(msg)
}

type StepOutcome = (LossBreakdown, super::GradientBundle, f64, f64, usize, usize);

fn train_step(
    model: &SignalModel,
    algo: &AlgorithmConfig,
    cfg: &TrainConfig,
    nets: &Denoisers,
    pairs: &[&TrainPair],
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let (z, target) = batch_arrays(pairs)?;
    let (res, record) = recover_recorded(model, algo, nets, z.view(), cfg.backward_mode.execution())?;
    let (mse, g_recon) = standardized_mse(res.reconstructed.view(), target.view())?;
    let gx = model.operator().adjoint(g_recon.view())?;
    let (mut grads, stats) = backward_run(model, nets, &record, gx.view(), cfg.backward_mode, &cfg.backward_solver)?;
    let mut penalty = 0.0;
    if algo.has_fixed_point() {
        for _ in 0..cfg.hutchinson_samples {
            if let Some(est) = jacobian_penalty(model, nets, &record, rng)? {
                let w = 1.0 / cfg.hutchinson_samples as f64;
                penalty += w * est.value;
                if lambda != 0.0 {
                    grads.add_scaled(&est.grad, w * lambda);
                }
            }
        }
    }
    let n = res.traces.len();
    let conv = res.traces.iter().filter(|t| t.converged).count();
    let rate = if n == 0 { 1.0 } else { conv as f64 / n as f64 };
    let adj_rate = if stats.adjoint_solves == 0 {
        1.0
    } else {
        stats.adjoint_converged as f64 / stats.adjoint_solves as f64
    };
    Ok((LossBreakdown::new(mse, penalty, lambda), grads, rate, adj_rate, n, conv))
}
