//! Flat key-value configuration covering every tunable default, and the
//! assembly of models, algorithms and networks from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgorithmConfig, AlgorithmKind, Denoisers, ModelKind};
use crate::data::{Protocol, SplitSpec, SyntheticConfig, WindowConfig};
use crate::denoiser::{Activation, DenoiserArch, Mlp, Network};
use crate::error::{Error, Result};
use crate::fixed_point::{SolverConfig, SolverMethod};
use crate::signal_model::SignalModel;
use crate::spectral::{Conditioning, FrequencyGrid, SynthesisScaling};
use crate::training::{AdamConfig, BackwardMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,

    // recovery
    pub algorithm: AlgorithmKind,
    /// Empty means the algorithm's default.
    pub model_x: Option<ModelKind>,
    pub model_e: Option<ModelKind>,
    pub unroll_t: usize,
    pub noise_term: bool,
    pub ista_threshold: f64,
    pub solver_method: SolverMethod,
    pub solver_max_iters: usize,
    pub solver_tol: f64,
    pub anderson_memory: usize,
    pub anderson_beta: f64,

    // frequency grid and conditioning
    pub n_bins: usize,
    pub f_lo: f64,
    pub f_hi: f64,
    pub synthesis_scaling: SynthesisScaling,
    pub filter_order: usize,
    pub edge_trim_s: f64,
    pub window_s: f64,
    pub stride_s: f64,
    pub oversample: usize,

    // denoisers
    pub hidden_dim: usize,
    pub depth: usize,
    pub activation: Activation,

    // training
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_halve_epoch: usize,
    pub lambda_value: f64,
    pub lambda_bernoulli_p: f64,
    pub hutchinson_samples: usize,
    pub backward_mode: BackwardMode,
    pub backward_max_iters: usize,
    pub backward_tol: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub gradient_gate: bool,

    // data
    pub split_train: f64,
    pub split_val: f64,
    pub protocol: Protocol,

    // synthetic generator
    pub n_subjects: usize,
    pub duration_s: f64,
    pub fs: f64,
    pub k_channels: usize,
    pub hr_min_bpm: f64,
    pub hr_max_bpm: f64,
    pub n_harmonics: usize,
    pub harmonic_decay: f64,
    pub hr_drift_bpm_per_s: f64,
    pub noise_snr_db: f64,
    pub motion_burst_rate_per_min: f64,
    pub motion_amplitude: f64,
    pub noise_shared_fraction: f64,
    pub noise_corner_hz: f64,
    pub dc_level: f64,
}

impl Default for Config {
    fn default() -> Self {
        let solver = SolverConfig::default();
        let backward = SolverConfig::backward();
        let train = TrainConfig::default();
        let cond = Conditioning::default();
        let win = WindowConfig::default();
        let syn = SyntheticConfig::default();
        let adam = AdamConfig::default();
        Self {
            seed: 0,
            algorithm: AlgorithmKind::Udeq,
            model_x: None,
            model_e: None,
            unroll_t: 3,
            noise_term: true,
            ista_threshold: 0.01,
            solver_method: solver.method,
            solver_max_iters: solver.max_iters,
            solver_tol: solver.rel_tol,
            anderson_memory: solver.anderson_memory,
            anderson_beta: solver.anderson_beta,
            n_bins: crate::spectral::DEFAULT_N_BINS,
            f_lo: cond.f_lo,
            f_hi: cond.f_hi,
            synthesis_scaling: SynthesisScaling::Unit,
            filter_order: cond.order,
            edge_trim_s: cond.edge_trim_s,
            window_s: win.window_s,
            stride_s: win.stride_s,
            oversample: win.oversample,
            hidden_dim: DEFAULT_HIDDEN,
            depth: 3,
            activation: Activation::Tanh,
            batch_size: train.batch_size,
            epochs: train.epochs,
            lr: train.lr,
            lr_halve_epoch: train.lr_halve_epoch,
            lambda_value: train.lambda_value,
            lambda_bernoulli_p: train.lambda_bernoulli_p,
            hutchinson_samples: train.hutchinson_samples,
            backward_mode: train.backward_mode,
            backward_max_iters: backward.max_iters,
            backward_tol: backward.rel_tol,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            checkpoint_every: train.checkpoint_every,
            gradient_gate: train.gradient_gate,
            split_train: 0.7,
            split_val: 0.1,
            protocol: Protocol::Plain,
            n_subjects: syn.n_subjects,
            duration_s: syn.duration_s,
            fs: syn.fs,
            k_channels: syn.k_channels,
            hr_min_bpm: syn.hr_range_bpm[0],
            hr_max_bpm: syn.hr_range_bpm[1],
            n_harmonics: syn.n_harmonics,
            harmonic_decay: syn.harmonic_decay,
            hr_drift_bpm_per_s: syn.hr_drift_bpm_per_s,
            noise_snr_db: syn.noise_snr_db,
            motion_burst_rate_per_min: syn.motion_burst_rate_per_min,
            motion_amplitude: syn.motion_amplitude,
            noise_shared_fraction: syn.noise_shared_fraction,
            noise_corner_hz: syn.noise_corner_hz,
            dc_level: syn.dc_level,
        }
    }
}

/// Hidden width giving about 1.38e5 parameters for the default fixed-point
/// `R` (with injection) and feed-forward `Q` on the 512-bin, 250-sample
/// problem.
pub const DEFAULT_HIDDEN: usize = 37;

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn model_kinds(&self) -> (ModelKind, ModelKind) {
        let (dx, de) = self.algorithm.default_models();
        (self.model_x.unwrap_or(dx), self.model_e.unwrap_or(de))
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            method: self.solver_method,
            max_iters: self.solver_max_iters,
            rel_tol: self.solver_tol,
            anderson_memory: self.anderson_memory,
            anderson_beta: self.anderson_beta,
            seed: self.seed,
        }
    }

    pub fn algorithm_config(&self) -> AlgorithmConfig {
        let (model_x, model_e) = self.model_kinds();
        AlgorithmConfig {
            algorithm: self.algorithm,
            unroll_t: self.unroll_t,
            solver: self.solver(),
            model_x,
            model_e,
            ista_threshold: self.ista_threshold,
        }
    }

    pub fn conditioning(&self) -> Conditioning {
        Conditioning {
            order: self.filter_order,
            f_lo: self.f_lo,
            f_hi: self.f_hi,
            edge_trim_s: self.edge_trim_s,
        }
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            window_s: self.window_s,
            stride_s: self.stride_s,
            conditioning: self.conditioning(),
            oversample: self.oversample,
        }
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec::Fractions {
            train: self.split_train,
            val: self.split_val,
        }
    }

    pub fn window_samples(&self, fs: f64) -> usize {
        (self.window_s * fs).round() as usize
    }

    pub fn grid(&self, fs: f64) -> Result<FrequencyGrid> {
        FrequencyGrid::new(self.f_lo, self.f_hi, self.n_bins, fs, self.window_samples(fs))
    }

    pub fn signal_model(&self, fs: f64) -> Result<SignalModel> {
        SignalModel::new(self.grid(fs)?, self.synthesis_scaling, self.noise_term)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            lr_halve_epoch: self.lr_halve_epoch,
            lambda_value: self.lambda_value,
            lambda_bernoulli_p: self.lambda_bernoulli_p,
            backward_mode: self.backward_mode,
            seed: self.seed,
            hutchinson_samples: self.hutchinson_samples,
            backward_solver: SolverConfig {
                max_iters: self.backward_max_iters,
                rel_tol: self.backward_tol,
                ..self.solver()
            },
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            checkpoint_every: self.checkpoint_every,
            gradient_gate: self.gradient_gate,
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: self.n_subjects,
            duration_s: self.duration_s,
            fs: self.fs,
            k_channels: self.k_channels,
            hr_range_bpm: [self.hr_min_bpm, self.hr_max_bpm],
            n_harmonics: self.n_harmonics,
            harmonic_decay: self.harmonic_decay,
            hr_drift_bpm_per_s: self.hr_drift_bpm_per_s,
            noise_snr_db: self.noise_snr_db,
            motion_burst_rate_per_min: self.motion_burst_rate_per_min,
            motion_amplitude: self.motion_amplitude,
            noise_shared_fraction: self.noise_shared_fraction,
            noise_corner_hz: self.noise_corner_hz,
            dc_level: self.dc_level,
            seed: self.seed,
        }
    }

    /// Architectures of `R` and `Q` for records sampled at `fs`. DE-Prox
    /// denoisers and feed-forward stages take no injected input.
    pub fn architectures(&self, fs: f64) -> (DenoiserArch, DenoiserArch) {
        let (mx, me) = self.model_kinds();
        let outer = self.algorithm != AlgorithmKind::Deprox;
        let arch = |io_dim, complex, injection| DenoiserArch {
            io_dim,
            hidden_dim: self.hidden_dim,
            depth: self.depth,
            activation: self.activation,
            complex,
            injection,
        };
        (
            arch(self.n_bins, true, outer && mx == ModelKind::Deq),
            arch(self.window_samples(fs), false, outer && me == ModelKind::Deq),
        )
    }

    /// Fresh networks. Fixed-point denoisers start contractive.
    pub fn init_denoisers(&self, fs: f64) -> Result<Denoisers> {
        if self.algorithm == AlgorithmKind::IstaOracle {
            return Ok(crate::algorithms::ista_denoisers(self.ista_threshold));
        }
        let (mx, me) = self.model_kinds();
        let deprox = self.algorithm == AlgorithmKind::Deprox;
        let (ra, qa) = self.architectures(fs);
        Ok(Denoisers {
            r: Network::Mlp(Mlp::init(
                ra,
                self.seed.wrapping_mul(2).wrapping_add(1),
                deprox || mx == ModelKind::Deq,
            )?),
            q: Network::Mlp(Mlp::init(
                qa,
                self.seed.wrapping_mul(2).wrapping_add(2),
                deprox || me == ModelKind::Deq,
            )?),
        })
    }

    /// Total trainable parameters of `R` and `Q`.
    pub fn param_count(&self, fs: f64) -> usize {
        if self.algorithm == AlgorithmKind::IstaOracle {
            return 0;
        }
        let (r, q) = self.architectures(fs);
        r.param_count() + q.param_count()
    }

    pub fn validate(&self) -> Result<()> {
        self.algorithm_config().validate()?;
        self.train_config().validate()?;
        self.synthetic().validate()?;
        self.grid(self.fs)?;
        if !(self.split_train > 0.0) || !(self.split_val >= 0.0) || self.split_train + self.split_val > 1.0 {
            return Err(Error::Config(
                "split fractions must be positive and sum to at most 1".into(),
            ));
        }
        if self.hidden_dim == 0 || self.depth == 0 {
            return Err(Error::Config("hidden_dim and depth must be at least 1".into()));
        }
        let (mx, me) = self.model_kinds();
        if self.algorithm == AlgorithmKind::Unrolled && (mx == ModelKind::Deq || me == ModelKind::Deq) {
            log::info!("unrolled pipeline with a fixed-point stage: the Jacobian penalty applies to it");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(Config::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_key_fails() {
        let err = Config::from_toml("learning_rate = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn partial_override() {
        let c = Config::from_toml("algorithm = \"deprox\"\nepochs = 25\nnoise_term = false\n").unwrap();
        assert_eq!(c.algorithm, AlgorithmKind::Deprox);
        assert_eq!(c.epochs, 25);
        assert!(!c.noise_term);
        assert_eq!(c.model_kinds(), (ModelKind::Deq, ModelKind::Deq));
    }

    #[test]
    fn defaults_match_component_defaults() {
        let c = Config::default();
        assert_eq!(c.train_config().batch_size, 100);
        assert_eq!(c.train_config().lr, 3e-4);
        assert_eq!(c.algorithm_config().solver, SolverConfig::default());
        assert_eq!(c.window_config(), WindowConfig::default());
        assert_eq!(c.synthetic(), SyntheticConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn default_budget() {
        let n = Config::default().param_count(25.0);
        assert_eq!(n, 137_767);
    }
}
