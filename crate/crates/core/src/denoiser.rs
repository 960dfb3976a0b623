//! Learned denoisers standing in for proximal operators.
//!
//! `R` acts on spectral coefficients (split-complex MLP) and `Q` on the noise
//! estimate (real MLP). Both act column by column with shared parameters, so a
//! batch is just more columns. Complex tensors are stacked real channels
//! (real rows over imaginary rows) and complex layers are applied as the real
//! block matrix `[[Wr, -Wi], [Wi, Wr]]`, which makes every derivative below
//! ordinary real-valued reverse mode.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::operator::top_singular_value;

/// Target spectral norm of each layer of a fixed-point denoiser at init.
pub const DEQ_LAYER_NORM: f64 = 0.9;

static FAULT: AtomicBool = AtomicBool::new(false);

/// Corrupts the activation derivative used by reverse passes (gradient gate
/// testing only).
#[doc(hidden)]
pub fn set_fault_injection(on: bool) {
    FAULT.store(on, Ordering::SeqCst);
}

fn fault_active() -> bool {
    cfg!(feature = "fault-injection") || FAULT.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Shape of an MLP denoiser: `io -> hidden -> ... -> io` with `depth` affine
/// layers, each followed by the activation. `io_dim` counts complex entries
/// for complex networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub io_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub activation: Activation,
    pub complex: bool,
    pub injection: bool,
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden_dim == 0 || self.io_dim == 0 {
            return Err(Error::Config(format!("invalid denoiser architecture {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.io_dim];
        w.extend(std::iter::repeat_n(self.hidden_dim, self.depth - 1));
        w.push(self.io_dim);
        w
    }

    /// Rows of the stacked real representation of one column.
    pub fn rows(&self) -> usize {
        self.io_dim * self.channels()
    }

    fn channels(&self) -> usize {
        if self.complex {
            2
        } else {
            1
        }
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels();
        let w = self.widths();
        let layers: usize = w.windows(2).map(|p| c * (p[0] * p[1] + p[1])).sum();
        let inj = if self.injection { c * self.io_dim * w[1] } else { 0 };
        layers + inj
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    /// Offset of the weight (real part; imaginary part follows when complex).
    weight: usize,
    /// Offset of the bias, absent for the injection map.
    bias: Option<usize>,
    out: usize,
    inp: usize,
}

/// Multilayer perceptron with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: DenoiserArch,
    specs: Vec<ParamSpec>,
    params: Vec<f64>,
}

/// Values saved by a forward pass for the reverse passes.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
    injection: Option<Array2<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape has at least the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.acts[0]
    }

    pub fn injection(&self) -> Option<&Array2<f64>> {
        self.injection.as_ref()
    }
}

/// Reverse-mode result of one denoiser pass.
#[derive(Debug, Clone)]
pub struct VjpResult {
    pub input: Array2<f64>,
    pub injection: Option<Array2<f64>>,
    pub params: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. With `contractive` every layer
    /// weight is rescaled to spectral norm [`DEQ_LAYER_NORM`].
    pub fn init(arch: DenoiserArch, seed: u64, contractive: bool) -> Result<Self> {
        arch.validate()?;
        let specs = Self::layout(&arch);
        let total = specs.last().map_or(0, |s| s.offset + s.len());
        let mut net = Self {
            arch,
            specs,
            params: vec![0.0; total],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in net.blocks_with_injection() {
            let limit = (6.0 / (block.inp + block.out) as f64).sqrt();
            let n = block.out * block.inp * arch.channels();
            for v in &mut net.params[block.weight..block.weight + n] {
                *v = rng.random_range(-limit..=limit);
            }
        }
        if contractive {
            for l in 0..arch.depth {
                let block = net.block(l);
                let sigma = top_singular_value(&net.effective(block));
                if sigma > 0.0 {
                    // tiny margin so rounding in sigma never lands above target
                    let scale = DEQ_LAYER_NORM / (sigma * (1.0 + 1e-12));
                    let n = block.out * block.inp * arch.channels();
                    net.params[block.weight..block.weight + n]
                        .iter_mut()
                        .for_each(|v| *v *= scale);
                }
            }
        }
        Ok(net)
    }

    pub fn from_params(arch: DenoiserArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let specs = Self::layout(&arch);
        if params.len() != arch.param_count() {
            return Err(Error::dims("denoiser parameters", arch.param_count(), params.len()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("denoiser parameters".into()));
        }
        Ok(Self { arch, specs, params })
    }

    fn layout(arch: &DenoiserArch) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            specs.push(ParamSpec { name, shape, offset });
            offset += len;
        };
        let w = arch.widths();
        for (l, pair) in w.windows(2).enumerate() {
            if arch.complex {
                push(format!("layer{l}.weight_re"), vec![pair[1], pair[0]]);
                push(format!("layer{l}.weight_im"), vec![pair[1], pair[0]]);
                push(format!("layer{l}.bias_re"), vec![pair[1]]);
                push(format!("layer{l}.bias_im"), vec![pair[1]]);
            } else {
                push(format!("layer{l}.weight"), vec![pair[1], pair[0]]);
                push(format!("layer{l}.bias"), vec![pair[1]]);
            }
        }
        if arch.injection {
            if arch.complex {
                push("injection.weight_re".into(), vec![w[1], w[0]]);
                push("injection.weight_im".into(), vec![w[1], w[0]]);
            } else {
                push("injection.weight".into(), vec![w[1], w[0]]);
            }
        }
        specs
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn block(&self, l: usize) -> Block {
        let per_layer = if self.arch.complex { 4 } else { 2 };
        let w = &self.specs[per_layer * l];
        let b = &self.specs[per_layer * l + per_layer / 2];
        Block {
            weight: w.offset,
            bias: Some(b.offset),
            out: w.shape[0],
            inp: w.shape[1],
        }
    }

    fn injection_block(&self) -> Option<Block> {
        if !self.arch.injection {
            return None;
        }
        let per_layer = if self.arch.complex { 4 } else { 2 };
        let w = &self.specs[per_layer * self.arch.depth];
        Some(Block {
            weight: w.offset,
            bias: None,
            out: w.shape[0],
            inp: w.shape[1],
        })
    }

    fn blocks_with_injection(&self) -> Vec<Block> {
        let mut v: Vec<Block> = (0..self.arch.depth).map(|l| self.block(l)).collect();
        v.extend(self.injection_block());
        v
    }

    /// Real matrix acting on stacked columns.
    fn effective(&self, b: Block) -> Array2<f64> {
        let n = b.out * b.inp;
        let re = ArrayView2::from_shape((b.out, b.inp), &self.params[b.weight..b.weight + n]).expect("layout");
        if !self.arch.complex {
            return re.to_owned();
        }
        let im = ArrayView2::from_shape((b.out, b.inp), &self.params[b.weight + n..b.weight + 2 * n]).expect("layout");
        let mut m = Array2::zeros((2 * b.out, 2 * b.inp));
        m.slice_mut(s![..b.out, ..b.inp]).assign(&re);
        m.slice_mut(s![b.out.., b.inp..]).assign(&re);
        m.slice_mut(s![b.out.., ..b.inp]).assign(&im);
        m.slice_mut(s![..b.out, b.inp..]).assign(&im.mapv(|v| -v));
        m
    }

    fn effective_bias(&self, b: Block) -> Array1<f64> {
        let rows = b.out * self.arch.channels();
        let off = b.bias.expect("layer block");
        Array1::from(self.params[off..off + rows].to_vec())
    }

    /// Folds a gradient of the effective matrix back into parameter layout.
    fn accumulate_weight(&self, grads: &mut [f64], b: Block, g: &Array2<f64>) {
        let n = b.out * b.inp;
        if !self.arch.complex {
            grads[b.weight..b.weight + n]
                .iter_mut()
                .zip(g.iter())
                .for_each(|(d, v)| *d += v);
            return;
        }
        let (o, i) = (b.out, b.inp);
        for r in 0..o {
            for c in 0..i {
                let k = r * i + c;
                grads[b.weight + k] += g[[r, c]] + g[[o + r, i + c]];
                grads[b.weight + n + k] += g[[o + r, c]] - g[[r, i + c]];
            }
        }
    }

    fn accumulate_bias(grads: &mut [f64], b: Block, g: &Array2<f64>) {
        let off = b.bias.expect("layer block");
        for (d, v) in grads[off..].iter_mut().zip(g.sum_axis(Axis(1))) {
            *d += v;
        }
    }

    fn check_input(&self, x: ArrayView2<'_, f64>, injection: Option<ArrayView2<'_, f64>>) -> Result<()> {
        let rows = self.arch.rows();
        if x.nrows() != rows {
            return Err(Error::dims("denoiser input", rows, x.nrows()));
        }
        match (self.arch.injection, injection) {
            (true, Some(c)) if c.dim() == x.dim() => Ok(()),
            (true, Some(c)) => Err(Error::dims("denoiser injection", x.dim(), c.dim())),
            (true, None) => Err(Error::Config("denoiser expects an injection input".into())),
            (false, Some(_)) => Err(Error::Config("denoiser has no injection branch".into())),
            (false, None) => Ok(()),
        }
    }

    fn activate(&self, z: &mut Array2<f64>) {
        if self.arch.activation == Activation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
    }

    /// Activation derivative expressed through the activation output.
    fn derivative(&self, a: &Array2<f64>) -> Array2<f64> {
        let mut d = match self.arch.activation {
            Activation::Tanh => a.mapv(|v| 1.0 - v * v),
            Activation::Identity => Array2::ones(a.raw_dim()),
        };
        if fault_active() {
            d.mapv_inplace(|v| 1.01 * v + 1e-3);
        }
        d
    }

    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        injection: Option<ArrayView2<'_, f64>>,
    ) -> Result<(Array2<f64>, MlpTape)> {
        self.check_input(x, injection)?;
        let mut acts = Vec::with_capacity(self.arch.depth + 1);
        acts.push(x.to_owned());
        for l in 0..self.arch.depth {
            let b = self.block(l);
            let mut z = self.effective(b).dot(&acts[l]);
            if l == 0 {
                if let (Some(ib), Some(c)) = (self.injection_block(), injection) {
                    z += &self.effective(ib).dot(&c);
                }
            }
            z += &self.effective_bias(b).insert_axis(Axis(1));
            self.activate(&mut z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("denoiser layer {l} output")));
            }
            acts.push(z);
        }
        let out = acts.last().expect("depth >= 1").clone();
        Ok((
            out,
            MlpTape {
                acts,
                injection: injection.map(|c| c.to_owned()),
            },
        ))
    }

    fn reverse(&self, tape: &MlpTape, upstream: ArrayView2<'_, f64>, want_params: bool) -> Result<VjpResult> {
        let out = tape.output();
        if upstream.dim() != out.dim() {
            return Err(Error::dims("denoiser cotangent", out.dim(), upstream.dim()));
        }
        let mut grads = if want_params {
            vec![0.0; self.params.len()]
        } else {
            Vec::new()
        };
        let mut g = upstream.to_owned();
        let mut injection = None;
        for l in (0..self.arch.depth).rev() {
            let b = self.block(l);
            g *= &self.derivative(&tape.acts[l + 1]);
            if want_params {
                self.accumulate_weight(&mut grads, b, &g.dot(&tape.acts[l].t()));
                Self::accumulate_bias(&mut grads, b, &g);
            }
            if l == 0 {
                if let (Some(ib), Some(c)) = (self.injection_block(), tape.injection.as_ref()) {
                    if want_params {
                        self.accumulate_weight(&mut grads, ib, &g.dot(&c.t()));
                    }
                    injection = Some(self.effective(ib).t().dot(&g));
                }
            }
            g = self.effective(b).t().dot(&g);
        }
        Ok(VjpResult {
            input: g,
            injection,
            params: grads,
        })
    }

    /// Reverse pass for input, injection and parameter cotangents.
    pub fn vjp(&self, tape: &MlpTape, upstream: ArrayView2<'_, f64>) -> Result<VjpResult> {
        self.reverse(tape, upstream, true)
    }

    /// Reverse pass for input and injection cotangents only.
    pub fn vjp_input(&self, tape: &MlpTape, upstream: ArrayView2<'_, f64>) -> Result<VjpResult> {
        self.reverse(tape, upstream, false)
    }

    /// Jacobian-vector product with respect to the input (injection held).
    pub fn jvp(&self, tape: &MlpTape, tangent: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.tangents(tape, tangent)?.pop().expect("depth >= 1").1)
    }

    /// Forward tangents per layer: `(z_dot, a_dot)` with `a_dot` the layer
    /// output tangent.
    fn tangents(&self, tape: &MlpTape, tangent: ArrayView2<'_, f64>) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        if tangent.dim() != tape.acts[0].dim() {
            return Err(Error::dims("denoiser tangent", tape.acts[0].dim(), tangent.dim()));
        }
        let mut out: Vec<(Array2<f64>, Array2<f64>)> = Vec::with_capacity(self.arch.depth);
        for l in 0..self.arch.depth {
            let prev = if l == 0 { tangent } else { out[l - 1].1.view() };
            let zdot = self.effective(self.block(l)).dot(&prev);
            let adot = &zdot * &self.derivative(&tape.acts[l + 1]);
            out.push((zdot, adot));
        }
        Ok(out)
    }

    /// Gradient with respect to the parameters of `eps^T J w`, where `J` is
    /// the input Jacobian at the taped point. The taped input, the injection
    /// and `w` are held constant.
    pub fn jacobian_bilinear_grad(
        &self,
        tape: &MlpTape,
        w: ArrayView2<'_, f64>,
        eps: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        if eps.dim() != tape.output().dim() {
            return Err(Error::dims("penalty probe", tape.output().dim(), eps.dim()));
        }
        let tangents = self.tangents(tape, w)?;
        let mut grads = vec![0.0; self.params.len()];
        // cotangents of the tangent stream and of the primal stream
        let mut t_bar = eps.to_owned();
        let mut a_bar = Array2::<f64>::zeros(eps.raw_dim());
        for l in (0..self.arch.depth).rev() {
            let b = self.block(l);
            let a_out = &tape.acts[l + 1];
            let deriv = self.derivative(a_out);
            let (zdot, _) = &tangents[l];
            let zdot_bar = &t_bar * &deriv;
            if self.arch.activation == Activation::Tanh {
                Zip::from(&mut a_bar)
                    .and(&t_bar)
                    .and(zdot)
                    .and(a_out)
                    .for_each(|ab, tb, zd, a| *ab += tb * zd * (-2.0 * a));
            }
            let z_bar = &a_bar * &deriv;
            let prev_tangent = if l == 0 { w } else { tangents[l - 1].1.view() };
            let wg = zdot_bar.dot(&prev_tangent.t()) + z_bar.dot(&tape.acts[l].t());
            self.accumulate_weight(&mut grads, b, &wg);
            Self::accumulate_bias(&mut grads, b, &z_bar);
            if l == 0 {
                if let (Some(ib), Some(c)) = (self.injection_block(), tape.injection.as_ref()) {
                    self.accumulate_weight(&mut grads, ib, &z_bar.dot(&c.t()));
                }
            }
            if l > 0 {
                let we = self.effective(b);
                t_bar = we.t().dot(&zdot_bar);
                a_bar = we.t().dot(&z_bar);
            }
        }
        Ok(grads)
    }

    /// Largest singular value of each layer's effective weight.
    pub fn layer_norms(&self) -> Vec<f64> {
        (0..self.arch.depth)
            .map(|l| top_singular_value(&self.effective(self.block(l))))
            .collect()
    }

    /// Dense effective weight of layer `l` (stacked real form).
    pub fn layer_matrix(&self, l: usize) -> Array2<f64> {
        self.effective(self.block(l))
    }
}

/// A denoiser slot in a recovery algorithm: a trainable MLP or one of the
/// fixed maps used for oracles and tests.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Mlp(Mlp),
    Identity,
    Zero,
    /// Every column replaced by the same vector.
    Constant(Array1<f64>),
    /// Soft thresholding; complex mode shrinks `(re, im)` pairs by magnitude.
    SoftThreshold {
        tau: f64,
        complex: bool,
    },
}

#[derive(Debug, Clone)]
pub enum Tape {
    Mlp(MlpTape),
    Input(Array2<f64>),
}

impl Network {
    pub fn param_count(&self) -> usize {
        match self {
            Network::Mlp(m) => m.param_count(),
            _ => 0,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Network::Mlp(m) => m.params(),
            _ => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Network::Mlp(m) => m.params_mut(),
            _ => &mut [],
        }
    }

    pub fn has_injection(&self) -> bool {
        matches!(self, Network::Mlp(m) if m.arch.injection)
    }

    pub fn as_mlp(&self) -> Option<&Mlp> {
        match self {
            Network::Mlp(m) => Some(m),
            _ => None,
        }
    }

    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        injection: Option<ArrayView2<'_, f64>>,
    ) -> Result<(Array2<f64>, Tape)> {
        match self {
            Network::Mlp(m) => {
                let (y, t) = m.forward(x, injection)?;
                Ok((y, Tape::Mlp(t)))
            }
            _ => Ok((self.apply(x, injection)?, Tape::Input(x.to_owned()))),
        }
    }

    /// Runs this network again at the input (and injection) stored in a tape.
    pub fn retape(&self, tape: &Tape) -> Result<Tape> {
        match tape {
            Tape::Mlp(t) => Ok(self.forward(t.input().view(), t.injection().map(|c| c.view()))?.1),
            Tape::Input(x) => Ok(self.forward(x.view(), None)?.1),
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>, injection: Option<ArrayView2<'_, f64>>) -> Result<Array2<f64>> {
        match self {
            Network::Mlp(m) => Ok(m.forward(x, injection)?.0),
            Network::Identity => Ok(x.to_owned()),
            Network::Zero => Ok(Array2::zeros(x.raw_dim())),
            Network::Constant(c) => {
                if c.len() != x.nrows() {
                    return Err(Error::dims("constant denoiser", c.len(), x.nrows()));
                }
                let mut out = Array2::zeros(x.raw_dim());
                out.axis_iter_mut(Axis(1)).for_each(|mut col| col.assign(c));
                Ok(out)
            }
            Network::SoftThreshold { tau, complex } => Ok(soft_threshold(x, *tau, *complex)),
        }
    }

    fn injection_zeros(&self, tape: &Tape) -> Option<Array2<f64>> {
        match tape {
            Tape::Mlp(t) => t.injection.as_ref().map(|c| Array2::zeros(c.raw_dim())),
            Tape::Input(_) => None,
        }
    }

    pub fn vjp(&self, tape: &Tape, upstream: ArrayView2<'_, f64>, want_params: bool) -> Result<VjpResult> {
        match (self, tape) {
            (Network::Mlp(m), Tape::Mlp(t)) => m.reverse(t, upstream, want_params),
            (_, Tape::Input(x)) => {
                let input = match self {
                    Network::Identity => upstream.to_owned(),
                    Network::Zero | Network::Constant(_) => Array2::zeros(upstream.raw_dim()),
                    Network::SoftThreshold { tau, complex } => soft_threshold_vjp(x.view(), upstream, *tau, *complex),
                    Network::Mlp(_) => unreachable!(),
                };
                Ok(VjpResult {
                    input,
                    injection: self.injection_zeros(tape),
                    params: Vec::new(),
                })
            }
            _ => Err(Error::Config("tape does not belong to this denoiser".into())),
        }
    }

    /// Parameter gradient of `eps^T J w` (empty for fixed maps).
    pub fn jacobian_bilinear_grad(
        &self,
        tape: &Tape,
        w: ArrayView2<'_, f64>,
        eps: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        match (self, tape) {
            (Network::Mlp(m), Tape::Mlp(t)) => m.jacobian_bilinear_grad(t, w, eps),
            _ => Ok(Vec::new()),
        }
    }
}

/// Proximal map of `tau * ||.||_1`: real entries shrink toward zero, complex
/// pairs (rows `n` and `n + N`) shrink in magnitude as `x max(1 - tau/|x|, 0)`.
pub fn soft_threshold(x: ArrayView2<'_, f64>, tau: f64, complex: bool) -> Array2<f64> {
    if !complex {
        return x.mapv(|v| v.signum() * (v.abs() - tau).max(0.0));
    }
    let n = x.nrows() / 2;
    let mut out = Array2::zeros(x.raw_dim());
    for c in 0..x.ncols() {
        for i in 0..n {
            let (re, im) = (x[[i, c]], x[[n + i, c]]);
            let mag = re.hypot(im);
            let k = if mag > tau { 1.0 - tau / mag } else { 0.0 };
            out[[i, c]] = k * re;
            out[[n + i, c]] = k * im;
        }
    }
    out
}

fn soft_threshold_vjp(x: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>, tau: f64, complex: bool) -> Array2<f64> {
    if !complex {
        let mut out = g.to_owned();
        Zip::from(&mut out).and(&x).for_each(|o, v| {
            if v.abs() <= tau {
                *o = 0.0
            }
        });
        return out;
    }
    let n = x.nrows() / 2;
    let mut out = Array2::zeros(x.raw_dim());
    for c in 0..x.ncols() {
        for i in 0..n {
            let (re, im) = (x[[i, c]], x[[n + i, c]]);
            let mag = re.hypot(im);
            if mag <= tau {
                continue;
            }
            // J = I - tau/|x| (I - u u^T), symmetric
            let (ur, ui) = (re / mag, im / mag);
            let (gr, gi) = (g[[i, c]], g[[n + i, c]]);
            let proj = ur * gr + ui * gi;
            let k = tau / mag;
            out[[i, c]] = gr - k * (gr - ur * proj);
            out[[n + i, c]] = gi - k * (gi - ui * proj);
        }
    }
    out
}
