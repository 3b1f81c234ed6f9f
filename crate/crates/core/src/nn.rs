//! Dense MLP with reverse-mode gradients, Adam/SGD, and the gradient
//! concentration probe `v(w)`, `g(w)` for bit targets on Z_p^*.
//!
//! Activations are stored feature-major: a layer's output for a batch of
//! `B` samples is a `d × B` row-major matrix.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gram::gram_values;
use crate::modcore::{bit_r, inverse_table, is_prime, mul_mod, BitIndex, PrimeField};
use crate::numeric::{ksum, KahanSum};
use crate::spectral::{TargetKind, TargetTable};

/// Seeded generator on an independent substream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_TASK: u64 = 2;
const STREAM_DATA: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::ReLU => z.max(0.0),
            Self::Sigmoid => sigmoid(z),
            Self::Identity => z,
        }
    }

    /// Derivative expressed through the activation value.
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Self::ReLU => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Sigmoid => a * (1.0 - a),
            Self::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::ReLU),
            "sigmoid" => Ok(Self::Sigmoid),
            "identity" | "linear" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^{-z})`.
#[inline]
pub fn logistic_loss(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `d/dz ln(1 + e^{-z}) = -σ(-z)`.
#[inline]
pub fn logistic_deriv(z: f64) -> f64 {
    -sigmoid(-z)
}

/// `C = op(A)·op(B) + beta·C`, all operands given by strides; C is row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerShape {
    d_in: usize,
    d_out: usize,
    w_off: usize,
    b_off: usize,
}

/// Flat parameter vector for a dense network. Layer `l` stores its
/// `d_out × d_in` weight matrix row-major, then its `d_out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    shapes: Vec<LayerShape>,
    pub params: Vec<f64>,
}

/// Flat gradient with the model's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn norm_sq(&self) -> f64 {
        ksum(self.values.iter().map(|v| v * v))
    }
}

struct Cache {
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    batch: usize,
}

impl MlpModel {
    /// Zero-initialized model. `activations[l]` follows layer `l`.
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!("bad layer sizes {layer_sizes:?}")));
        }
        if activations.len() != layer_sizes.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} activations, got {}",
                layer_sizes.len() - 1,
                layer_sizes.len() - 1,
                activations.len()
            )));
        }
        let mut shapes = Vec::new();
        let mut off = 0;
        for w in layer_sizes.windows(2) {
            let (d_in, d_out) = (w[0], w[1]);
            shapes.push(LayerShape {
                d_in,
                d_out,
                w_off: off,
                b_off: off + d_in * d_out,
            });
            off += (d_in + 1) * d_out;
        }
        Ok(Self {
            sizes: layer_sizes,
            activations,
            shapes,
            params: vec![0.0; off],
        })
    }

    /// Input 1, the given hidden widths with one activation, identity output of width `k`.
    pub fn scalar(hidden: &[usize], activation: Activation, k: usize) -> Result<Self> {
        let mut sizes = vec![1];
        sizes.extend_from_slice(hidden);
        sizes.push(k);
        let mut acts = vec![activation; hidden.len()];
        acts.push(Activation::Identity);
        Self::new(sizes, acts)
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Uniform on `±1/√d_in` per layer, weights and biases alike.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R) {
        for s in &self.shapes {
            let k = 1.0 / (s.d_in as f64).sqrt();
            for v in &mut self.params[s.w_off..s.b_off + s.d_out] {
                *v = rng.gen_range(-k..=k);
            }
        }
    }

    /// Mutable view of the last layer's weights and biases.
    pub fn head_mut(&mut self) -> &mut [f64] {
        let s = *self.shapes.last().unwrap();
        &mut self.params[s.w_off..s.b_off + s.d_out]
    }

    /// `inputs` is sample-major `B × d_in`.
    fn forward_cache(&self, inputs: &[f64]) -> Cache {
        let d0 = self.input_dim();
        assert_eq!(inputs.len() % d0, 0, "input length is not a multiple of d_in");
        let batch = inputs.len() / d0;
        let mut x0 = vec![0.0; inputs.len()];
        for b in 0..batch {
            for i in 0..d0 {
                x0[i * batch + b] = inputs[b * d0 + i];
            }
        }
        let mut acts = vec![x0];
        for (s, act) in self.shapes.iter().zip(&self.activations) {
            let prev = acts.last().unwrap();
            let mut z = vec![0.0; s.d_out * batch];
            for o in 0..s.d_out {
                let bias = self.params[s.b_off + o];
                z[o * batch..(o + 1) * batch].fill(bias);
            }
            let w = &self.params[s.w_off..s.b_off];
            gemm(s.d_out, s.d_in, batch, w, s.d_in, 1, prev, batch, 1, 1.0, &mut z);
            for v in &mut z {
                *v = act.apply(*v);
            }
            acts.push(z);
        }
        Cache { acts, batch }
    }

    /// Backward pass from `d_out` (`k × B`, feature-major). Accumulates into
    /// `grad` when given; returns `∂/∂z_l` per layer when `keep` is set.
    fn backward(
        &self,
        cache: &Cache,
        d_out: Vec<f64>,
        mut grad: Option<&mut [f64]>,
        keep: bool,
    ) -> Vec<Vec<f64>> {
        let batch = cache.batch;
        let mut kept = vec![Vec::new(); self.shapes.len()];
        let mut da = d_out;
        for l in (0..self.shapes.len()).rev() {
            let s = self.shapes[l];
            let out = &cache.acts[l + 1];
            let act = self.activations[l];
            let mut dz = da;
            for (d, a) in dz.iter_mut().zip(out) {
                *d *= act.deriv_from_output(*a);
            }
            let prev = &cache.acts[l];
            if let Some(g) = grad.as_deref_mut() {
                let (gw, rest) = g[s.w_off..].split_at_mut(s.d_in * s.d_out);
                gemm(s.d_out, batch, s.d_in, &dz, batch, 1, prev, 1, batch, 1.0, gw);
                for o in 0..s.d_out {
                    rest[o] += dz[o * batch..(o + 1) * batch].iter().sum::<f64>();
                }
            }
            if l > 0 {
                let mut prev_da = vec![0.0; s.d_in * batch];
                let w = &self.params[s.w_off..s.b_off];
                gemm(s.d_in, s.d_out, batch, w, 1, s.d_in, &dz, batch, 1, 0.0, &mut prev_da);
                da = prev_da;
            } else {
                da = Vec::new();
            }
            if keep {
                kept[l] = dz;
            }
        }
        kept
    }

    /// Pre-activations `z_l` of every layer, feature-major.
    pub fn preactivations(&self, inputs: &[f64]) -> Vec<Vec<f64>> {
        let cache = self.forward_cache(inputs);
        let batch = cache.batch;
        self.shapes
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let mut z = vec![0.0; s.d_out * batch];
                for o in 0..s.d_out {
                    z[o * batch..(o + 1) * batch].fill(self.params[s.b_off + o]);
                }
                let w = &self.params[s.w_off..s.b_off];
                gemm(s.d_out, s.d_in, batch, w, s.d_in, 1, &cache.acts[l], batch, 1, 1.0, &mut z);
                z
            })
            .collect()
    }

    /// Output for one input vector.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim());
        self.forward_batch(x)
    }

    /// Outputs for a sample-major batch, returned sample-major `B × k`.
    pub fn forward_batch(&self, inputs: &[f64]) -> Vec<f64> {
        let cache = self.forward_cache(inputs);
        let k = self.output_dim();
        let last = cache.acts.last().unwrap();
        let mut out = vec![0.0; k * cache.batch];
        for b in 0..cache.batch {
            for o in 0..k {
                out[b * k + o] = last[o * cache.batch + b];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// `Σ_k (η_k - y_k)²`, averaged over the batch.
    Mse,
    /// `Σ_k ln(1 + e^{-y_k η_k})`, averaged over the batch.
    Logistic,
}

/// Mean loss over a sample-major batch and its exact gradient.
pub fn loss_and_grad(
    model: &MlpModel,
    inputs: &[f64],
    targets: &[f64],
    loss: Loss,
) -> (f64, GradientVector) {
    let cache = model.forward_cache(inputs);
    let batch = cache.batch;
    assert!(batch > 0, "empty batch");
    let k = model.output_dim();
    assert_eq!(targets.len(), batch * k, "targets must be B × k");
    let out = cache.acts.last().unwrap();
    let bf = batch as f64;
    let mut total = KahanSum::new();
    let mut d_out = vec![0.0; k * batch];
    for b in 0..batch {
        for o in 0..k {
            let eta = out[o * batch + b];
            let y = targets[b * k + o];
            let (l, d) = match loss {
                Loss::Mse => ((eta - y).powi(2), 2.0 * (eta - y)),
                Loss::Logistic => (logistic_loss(y * eta), y * logistic_deriv(y * eta)),
            };
            total.add(l);
            d_out[o * batch + b] = d / bf;
        }
    }
    let mut grad = vec![0.0; model.param_count()];
    model.backward(&cache, d_out, Some(&mut grad), false);
    (total.value() / bf, GradientVector { values: grad })
}

/// Mean loss only.
pub fn loss_value(model: &MlpModel, inputs: &[f64], targets: &[f64], loss: Loss) -> f64 {
    let out = model.forward_batch(inputs);
    let batch = inputs.len() / model.input_dim();
    let terms = out.iter().zip(targets).map(|(&eta, &y)| match loss {
        Loss::Mse => (eta - y).powi(2),
        Loss::Logistic => logistic_loss(y * eta),
    });
    ksum(terms) / batch as f64
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

enum Optimizer {
    Adam(Adam),
    Sgd,
}

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(Adam::new(n)),
            OptimizerKind::Sgd => Self::Sgd,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Self::Adam(a) => a.step(params, grad, lr),
            Self::Sgd => sgd_step(params, grad, lr),
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient concentration probe

/// Hidden widths and activation of a scalar-in, scalar-out probe network.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn desk() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Sigmoid,
        }
    }

    pub fn build(&self) -> Result<MlpModel> {
        MlpModel::scalar(&self.hidden, self.activation, 1)
    }
}

pub const DEFAULT_PROBE_CAP: u64 = 3001;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSample {
    pub v: f64,
    pub g: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub p: u64,
    /// Mean of `v(w_i)` over initializations.
    pub v: f64,
    /// Mean of `g(w_i)` over initializations.
    pub g: f64,
    /// `E_i[v(w_i)/g(w_i) · √p]`.
    pub ratio_sqrt: f64,
    /// `E_i[v(w_i)/g(w_i) · p]`.
    pub ratio_lin: f64,
    pub seeds: Vec<u64>,
    pub per_init: Vec<ProbeSample>,
}

/// Network inputs for `x ∈ Z_p^*`, scaled to `(0, 1)`.
fn probe_inputs(field: PrimeField) -> Vec<f64> {
    let p = field.modulus();
    (1..p).map(|x| x as f64 / p as f64).collect()
}

fn bit_targets(field: PrimeField, r: BitIndex) -> TargetTable {
    TargetTable::new(field, TargetKind::BitR(r))
}

/// `K(x, x') = ⟨∂η(x)/∂w, ∂η(x')/∂w⟩` over a scalar-output model, `n × n`.
fn tangent_kernel(model: &MlpModel, inputs: &[f64]) -> Vec<f64> {
    assert_eq!(model.output_dim(), 1);
    let n = inputs.len();
    let cache = model.forward_cache(inputs);
    let deltas = model.backward(&cache, vec![1.0; n], None, true);
    let mut k = vec![0.0; n * n];
    let mut gd = vec![0.0; n * n];
    let mut ga = vec![0.0; n * n];
    for (l, s) in model.shapes.iter().enumerate() {
        let d = &deltas[l];
        let a = &cache.acts[l];
        gemm(n, s.d_out, n, d, 1, n, d, n, 1, 0.0, &mut gd);
        gemm(n, s.d_in, n, a, 1, n, a, n, 1, 0.0, &mut ga);
        for i in 0..n * n {
            k[i] += gd[i] * (ga[i] + 1.0);
        }
    }
    k
}

/// `v(w)` and `g(w)` for the logistic loss on targets `(-1)^{[a·x]_r}`.
///
/// With `y = ±1`, `y·l'(yη) = α(x) - y/2` where α does not depend on `a`, so
/// `∇L_a - E∇L = -(1/2n) Σ_x t̃(a·x) J_x` with `t̃` the centered target. Summing
/// over `a` turns `Σ_a t̃(ax) t̃(ax')` into `n·f̃(x'/x)`, giving
/// `v = (1/4n²) Σ_{x,x'} K(x,x') f̃(x'·x⁻¹)` and `g = tr K / n`.
pub fn probe_at(model: &MlpModel, field: PrimeField, r: BitIndex) -> ProbeSample {
    let p = field.modulus();
    let n = (p - 1) as usize;
    let k = tangent_kernel(model, &probe_inputs(field));
    let t = bit_targets(field, r);
    let mean = t.mean_nonzero();
    let centered: Vec<f64> = t
        .values
        .iter()
        .enumerate()
        .map(|(x, &v)| if x == 0 { 0.0 } else { v - mean })
        .collect();
    let f = gram_values(&TargetTable::custom(field, centered).expect("length p"));
    let inv = inverse_table(field);
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let step = inv[i + 1];
            let row = &k[i * n..(i + 1) * n];
            let mut acc = KahanSum::new();
            let mut y = step; // (j+1)·x⁻¹ at j = 0
            for &kv in row {
                acc.add(kv * f[(y - 1) as usize]);
                y += step;
                if y >= p {
                    y -= p;
                }
            }
            acc.value()
        })
        .collect();
    let nf = n as f64;
    let v = ksum(rows) / (4.0 * nf * nf);
    let g = ksum((0..n).map(|i| k[i * n + i])) / nf;
    ProbeSample { v, g }
}

/// Per-x Jacobians `J_x` as an `n × s` row-major matrix, and `η(x)`.
fn jacobians(model: &MlpModel, inputs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = inputs.len();
    let s_total = model.param_count();
    let cache = model.forward_cache(inputs);
    let deltas = model.backward(&cache, vec![1.0; n], None, true);
    let mut jac = vec![0.0; n * s_total];
    for (l, s) in model.shapes.iter().enumerate() {
        let d = &deltas[l];
        let a = &cache.acts[l];
        for x in 0..n {
            let row = &mut jac[x * s_total..(x + 1) * s_total];
            for o in 0..s.d_out {
                let dv = d[o * n + x];
                for i in 0..s.d_in {
                    row[s.w_off + o * s.d_in + i] = dv * a[i * n + x];
                }
                row[s.b_off + o] = dv;
            }
        }
    }
    (jac, cache.acts.last().unwrap().clone())
}

/// `v` by explicit per-`a` gradients, both as a two-pass variance and as
/// `E‖∇L_a‖² - ‖E∇L_a‖²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DefinitionalProbe {
    pub v_two_pass: f64,
    pub v_moments: f64,
    pub g: f64,
}

/// Explicit full-batch gradients for every `a`; targets are
/// `target_sign · (-1)^{[a·x]_r}`. O(p²·s), for small p.
pub fn probe_definitional(
    model: &MlpModel,
    field: PrimeField,
    r: BitIndex,
    target_sign: f64,
) -> DefinitionalProbe {
    let n = (field.modulus() - 1) as usize;
    let s = model.param_count();
    let (jac, eta) = jacobians(model, &probe_inputs(field));
    let t = bit_targets(field, r);
    let nf = n as f64;
    let mut coef = vec![0.0; n * n];
    for a in 1..=n {
        for x in 1..=n {
            let y = target_sign * t.values[mul_mod(field, a as u64, x as u64) as usize];
            coef[(a - 1) * n + x - 1] = y * logistic_deriv(y * eta[x - 1]) / nf;
        }
    }
    let mut grads = vec![0.0; n * s];
    gemm(n, n, s, &coef, n, 1, &jac, s, 1, 0.0, &mut grads);
    let mean: Vec<f64> = (0..s)
        .map(|j| ksum((0..n).map(|a| grads[a * s + j])) / nf)
        .collect();
    let v_two_pass = ksum((0..n).map(|a| {
        ksum((0..s).map(|j| (grads[a * s + j] - mean[j]).powi(2)))
    })) / nf;
    let second = ksum((0..n).map(|a| ksum((0..s).map(|j| grads[a * s + j].powi(2))))) / nf;
    let v_moments = second - ksum(mean.iter().map(|m| m * m));
    let g = ksum(jac.iter().map(|v| v * v)) / nf;
    DefinitionalProbe {
        v_two_pass,
        v_moments,
        g,
    }
}

/// Seeds of the initializations used by [`probe_variance`].
pub fn probe_seeds(seed: u64, n_inits: usize) -> Vec<u64> {
    let mut rng = stream_rng(seed, STREAM_INIT);
    (0..n_inits).map(|_| rng.gen()).collect()
}

pub fn probe_variance(
    field: PrimeField,
    r: BitIndex,
    arch: &ArchSpec,
    n_inits: usize,
    seed: u64,
) -> Result<ProbeReport> {
    probe_variance_capped(field, r, arch, n_inits, seed, DEFAULT_PROBE_CAP)
}

pub fn probe_variance_capped(
    field: PrimeField,
    r: BitIndex,
    arch: &ArchSpec,
    n_inits: usize,
    seed: u64,
    cap: u64,
) -> Result<ProbeReport> {
    let p = field.modulus();
    if p > cap {
        return Err(Error::SizeLimit {
            what: "probe modulus",
            got: p as usize,
            limit: cap as usize,
        });
    }
    if n_inits == 0 {
        return Err(Error::Config("probe needs at least one initialization".into()));
    }
    let template = arch.build()?;
    let seeds = probe_seeds(seed, n_inits);
    let per_init: Vec<ProbeSample> = seeds
        .par_iter()
        .map(|&s| {
            let mut model = template.clone();
            model.init_uniform(&mut ChaCha8Rng::seed_from_u64(s));
            probe_at(&model, field, r)
        })
        .collect();
    let k = n_inits as f64;
    let pf = p as f64;
    Ok(ProbeReport {
        p,
        v: ksum(per_init.iter().map(|s| s.v)) / k,
        g: ksum(per_init.iter().map(|s| s.g)) / k,
        ratio_sqrt: ksum(per_init.iter().map(|s| s.v / s.g * pf.sqrt())) / k,
        ratio_lin: ksum(per_init.iter().map(|s| s.v / s.g * pf)) / k,
        seeds,
        per_init,
    })
}

pub fn write_probe_csv<W: Write>(reports: &[ProbeReport], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "v", "g", "ratio_sqrt", "ratio_lin"])?;
    for r in reports {
        w.write_record([
            r.p.to_string(),
            r.v.to_string(),
            r.g.to_string(),
            r.ratio_sqrt.to_string(),
            r.ratio_lin.to_string(),
        ])?;
    }
    w.flush()
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    /// Regress `{a·x}` for `x ~ U[-100, 100]`, `a ~ Z_A`.
    WaveRegression { big_a: u64 },
    /// Classify `(-1)^{[a·x mod p]_r}` for `x, a ~ Z_p^*`.
    BitClassification { p: u64, r: u32 },
    /// All bits of `a·x mod p` at once, one logistic output per bit.
    AllBitsClassification { p: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Fraction of samples used for training; the rest is the test set.
    pub train_fraction: f64,
    pub seed: u64,
    /// Fixes the multiplier instead of drawing it from the seed.
    pub a: Option<u64>,
}

impl TrainConfig {
    pub fn waves(big_a: u64, seed: u64) -> Self {
        Self {
            task: Task::WaveRegression { big_a },
            hidden: vec![64, 128],
            activation: Activation::ReLU,
            samples: 1000,
            epochs: 100,
            batch_size: 1000,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            train_fraction: 1.0,
            seed,
            a: None,
        }
    }

    pub fn bits(p: u64, r: u32, seed: u64) -> Self {
        Self {
            task: Task::BitClassification { p, r },
            hidden: vec![128, 128],
            activation: Activation::Sigmoid,
            samples: 5000,
            epochs: 2000,
            batch_size: 100,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            train_fraction: 0.7,
            seed,
            a: None,
        }
    }

    pub fn all_bits(p: u64, seed: u64) -> Self {
        Self {
            task: Task::AllBitsClassification { p },
            ..Self::bits(p, 1, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match &self.task {
            Task::WaveRegression { big_a } => {
                if *big_a == 0 {
                    return bad("A must be at least 1".into());
                }
            }
            Task::BitClassification { p, r } => {
                let f = PrimeField::new(*p).map_err(|e| Error::Config(e.to_string()))?;
                BitIndex::new(f, *r).map_err(|e| Error::Config(e.to_string()))?;
            }
            Task::AllBitsClassification { p } => {
                PrimeField::new(*p).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        if self.samples == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("samples, batch_size and epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} is not positive", self.lr));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train fraction {} not in (0, 1]", self.train_fraction));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's minibatches.
    pub loss: f64,
    /// Test accuracy at the end of the epoch, for classification tasks.
    pub acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub a: u64,
    /// Training loss of the final parameters on the whole training set.
    pub final_loss: f64,
    /// Per-output test accuracy of the final parameters.
    pub final_bit_acc: Vec<f64>,
}

impl TrainTrace {
    pub fn final_acc(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.acc)
    }
}

/// Uniform prime in `[2^{bits-1}, 2^bits - 1]`.
pub fn random_prime_with_bits(bits: u32, seed: u64) -> Result<u64> {
    if !(2..=61).contains(&bits) {
        return Err(Error::Config(format!("bit length {bits} not in 2..=61")));
    }
    let mut rng = stream_rng(seed, STREAM_TASK);
    let lo = 1u64 << (bits - 1);
    let hi = (1u64 << bits) - 1;
    loop {
        let c = rng.gen_range(lo..=hi);
        if c >= 3 && is_prime(c) {
            return Ok(c);
        }
    }
}

struct Dataset {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    k: usize,
}

impl Dataset {
    fn subset(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len() * self.k);
        for &i in idx {
            x.push(self.inputs[i]);
            y.extend_from_slice(&self.targets[i * self.k..(i + 1) * self.k]);
        }
        (x, y)
    }
}

fn build_dataset(cfg: &TrainConfig) -> (Dataset, u64, Loss) {
    let mut task_rng = stream_rng(cfg.seed, STREAM_TASK);
    let mut rng = stream_rng(cfg.seed, STREAM_DATA);
    let m = cfg.samples;
    match cfg.task {
        Task::WaveRegression { big_a } => {
            let a = cfg.a.unwrap_or_else(|| task_rng.gen_range(0..big_a));
            let mut inputs = Vec::with_capacity(m);
            let mut targets = Vec::with_capacity(m);
            for _ in 0..m {
                let x: f64 = rng.gen_range(-100.0..=100.0);
                let ax = a as f64 * x;
                inputs.push(x / 100.0);
                targets.push(ax - ax.floor());
            }
            (Dataset { inputs, targets, k: 1 }, a, Loss::Mse)
        }
        Task::BitClassification { p, r } => {
            let field = PrimeField::new(p).expect("validated");
            let bit = BitIndex::new(field, r).expect("validated");
            let a = cfg.a.unwrap_or_else(|| task_rng.gen_range(1..p));
            let mut inputs = Vec::with_capacity(m);
            let mut targets = Vec::with_capacity(m);
            for _ in 0..m {
                let x = rng.gen_range(1..p);
                inputs.push(x as f64 / p as f64);
                let b = bit_r(mul_mod(field, a, x), bit);
                targets.push(if b == 0 { 1.0 } else { -1.0 });
            }
            (Dataset { inputs, targets, k: 1 }, a, Loss::Logistic)
        }
        Task::AllBitsClassification { p } => {
            let field = PrimeField::new(p).expect("validated");
            let k = field.bit_length() as usize;
            let a = cfg.a.unwrap_or_else(|| task_rng.gen_range(1..p));
            let mut inputs = Vec::with_capacity(m);
            let mut targets = Vec::with_capacity(m * k);
            for _ in 0..m {
                let x = rng.gen_range(1..p);
                inputs.push(x as f64 / p as f64);
                let ax = mul_mod(field, a, x);
                for bit in field.bit_indices() {
                    targets.push(if bit_r(ax, bit) == 0 { 1.0 } else { -1.0 });
                }
            }
            (Dataset { inputs, targets, k }, a, Loss::Logistic)
        }
    }
}

fn per_output_accuracy(model: &MlpModel, x: &[f64], y: &[f64]) -> Vec<f64> {
    let k = model.output_dim();
    let out = model.forward_batch(x);
    let n = x.len();
    (0..k)
        .map(|o| {
            let hits = (0..n)
                .filter(|&b| (out[b * k + o] > 0.0) == (y[b * k + o] > 0.0))
                .count();
            hits as f64 / n as f64
        })
        .collect()
}

/// Minibatch training with per-epoch reshuffling.
///
/// Inputs are rescaled to `[-1, 1]` (waves, `x/100`) or `(0, 1)` (bits, `x/p`).
pub fn train(cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let (data, a, loss) = build_dataset(cfg);
    let mut model = MlpModel::scalar(&cfg.hidden, cfg.activation, data.k)?;
    model.init_uniform(&mut stream_rng(cfg.seed, STREAM_INIT));
    let m = cfg.samples;
    let n_train = ((m as f64 * cfg.train_fraction).round() as usize).clamp(1, m);
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..m).collect();
    let (test_x, test_y) = data.subset(&test_idx);
    let classify = loss == Loss::Logistic && !test_idx.is_empty();

    let mut opt = Optimizer::new(cfg.optimizer, model.param_count());
    let mut shuffle = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut order = train_idx.clone();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = KahanSum::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.subset(chunk);
            let (l, g) = loss_and_grad(&model, &x, &y, loss);
            epoch_loss.add(l * chunk.len() as f64);
            opt.step(&mut model.params, &g.values, cfg.lr);
        }
        let acc = if classify {
            let per = per_output_accuracy(&model, &test_x, &test_y);
            Some(ksum(per.iter().copied()) / per.len() as f64)
        } else {
            None
        };
        records.push(EpochRecord {
            epoch,
            loss: epoch_loss.value() / n_train as f64,
            acc,
        });
    }
    let (train_x, train_y) = data.subset(&train_idx);
    let final_loss = loss_value(&model, &train_x, &train_y, loss);
    let final_bit_acc = if classify {
        per_output_accuracy(&model, &test_x, &test_y)
    } else {
        Vec::new()
    };
    Ok(TrainTrace {
        records,
        a,
        final_loss,
        final_bit_acc,
    })
}

pub fn write_trace_csv<W: Write>(trace: &TrainTrace, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "acc"])?;
    for r in &trace.records {
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            r.acc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(p: u64) -> PrimeField {
        PrimeField::new(p).unwrap()
    }

    fn random_model(sizes: Vec<usize>, acts: Vec<Activation>, seed: u64) -> MlpModel {
        let mut m = MlpModel::new(sizes, acts).unwrap();
        m.init_uniform(&mut ChaCha8Rng::seed_from_u64(seed));
        m
    }

    #[test]
    fn forward_examples() {
        let m = MlpModel::scalar(&[4], Activation::ReLU, 1).unwrap();
        assert_eq!(m.forward(&[3.0]), vec![0.0]);
        let lin = MlpModel::new(vec![1, 1], vec![Activation::Identity])
            .unwrap()
            .with_params(vec![2.0, 0.0])
            .unwrap();
        assert_eq!(lin.forward(&[3.0]), vec![6.0]);
        // ReLU inactive on nonnegative data: equals the product of linear maps.
        let relu = MlpModel::new(vec![1, 2, 1], vec![Activation::ReLU, Activation::Identity])
            .unwrap()
            .with_params(vec![0.5, 1.5, 0.1, 0.2, 2.0, 3.0, 0.25])
            .unwrap();
        let x = 2.0;
        let h = [0.5 * x + 0.1, 1.5 * x + 0.2];
        assert!((relu.forward(&[x])[0] - (2.0 * h[0] + 3.0 * h[1] + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn parameter_count() {
        let m = MlpModel::scalar(&[64, 128], Activation::ReLU, 1).unwrap();
        assert_eq!(m.param_count(), 2 * 64 + 65 * 128 + 129);
        assert!(MlpModel::new(vec![1, 2], vec![]).is_err());
    }

    #[test]
    fn loss_examples() {
        let m = MlpModel::scalar(&[3], Activation::Sigmoid, 1).unwrap();
        let (l, g) = loss_and_grad(&m, &[0.5], &[1.0], Loss::Logistic);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(g.values.iter().any(|&v| v != 0.0));
        let lin = MlpModel::new(vec![1, 1], vec![Activation::Identity])
            .unwrap()
            .with_params(vec![2.0, 1.0])
            .unwrap();
        let (l, g) = loss_and_grad(&lin, &[1.0, 2.0], &[3.0, 5.0], Loss::Mse);
        assert_eq!(l, 0.0);
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert!((logistic_loss(-800.0) - 800.0).abs() < 1e-9);
        assert!(logistic_loss(800.0) >= 0.0);
    }

    fn fd_grad(model: &MlpModel, x: &[f64], y: &[f64], loss: Loss, h: f64) -> Vec<f64> {
        let mut m = model.clone();
        (0..model.param_count())
            .map(|i| {
                let orig = m.params[i];
                m.params[i] = orig + h;
                let up = loss_value(&m, x, y, loss);
                m.params[i] = orig - h;
                let down = loss_value(&m, x, y, loss);
                m.params[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let act = if seed % 2 == 0 { Activation::Sigmoid } else { Activation::ReLU };
            let d_in = 1 + (seed % 3) as usize;
            let k = 1 + (seed % 2) as usize;
            let model = random_model(vec![d_in, 5, 4, k], vec![act, act, Activation::Identity], seed);
            let b = 3;
            let x: Vec<f64> = (0..b * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = if seed % 4 < 2 { Loss::Mse } else { Loss::Logistic };
            let y: Vec<f64> = (0..b * k)
                .map(|_| if rng.gen() { 1.0 } else { -1.0 })
                .collect();
            let (_, g) = loss_and_grad(&model, &x, &y, loss);
            let fd = fd_grad(&model, &x, &y, loss, 1e-5);
            let scale = g.values.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            for (a, b) in g.values.iter().zip(&fd) {
                assert!((a - b).abs() / scale < 1e-5, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, -2.0];
        let mut adam = Adam::new(2);
        adam.step(&mut p, &[0.0, 0.0], 0.1);
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.0, 0.0];
        let mut adam = Adam::new(2);
        adam.step(&mut p, &[3.0, -0.5], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-8 && (p[1] - 0.01).abs() < 1e-8);

        let mut p = vec![0.0];
        let mut adam = Adam::new(1);
        let mut prev = 0.0;
        for _ in 0..5000 {
            adam.step(&mut p, &[0.7], 0.001);
            let step = prev - p[0];
            prev = p[0];
            assert!((step - 0.001).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_probe_matches_definitional() {
        for (p, r, seed) in [(7u64, 1u32, 1u64), (13, 2, 2), (31, 1, 3), (29, 3, 4)] {
            let f = field(p);
            let bit = BitIndex::new(f, r).unwrap();
            for act in [Activation::Sigmoid, Activation::ReLU] {
                let model = random_model(vec![1, 6, 5, 1], vec![act, act, Activation::Identity], seed);
                let fast = probe_at(&model, f, bit);
                let def = probe_definitional(&model, f, bit, 1.0);
                assert!((fast.v - def.v_two_pass).abs() <= 1e-9 * def.v_two_pass, "p={p}");
                assert!((fast.g - def.g).abs() <= 1e-12 * def.g);
                assert!((def.v_two_pass - def.v_moments).abs() <= 1e-8 * def.v_two_pass);
            }
        }
    }

    #[test]
    fn probe_matches_finite_difference_gradients() {
        let f7 = field(7);
        let r1 = BitIndex::new(f7, 1).unwrap();
        let model = random_model(
            vec![1, 4, 4, 1],
            vec![Activation::Sigmoid, Activation::Sigmoid, Activation::Identity],
            11,
        );
        let n = 6;
        let x: Vec<f64> = (1..=n).map(|v| v as f64 / 7.0).collect();
        let grads: Vec<Vec<f64>> = (1..=n as u64)
            .map(|a| {
                let y: Vec<f64> = (1..=n as u64)
                    .map(|xx| if mul_mod(f7, a, xx) & 1 == 0 { 1.0 } else { -1.0 })
                    .collect();
                fd_grad(&model, &x, &y, Loss::Logistic, 1e-5)
            })
            .collect();
        let s = model.param_count();
        let mean: Vec<f64> = (0..s).map(|j| grads.iter().map(|g| g[j]).sum::<f64>() / n as f64).collect();
        let v_fd: f64 = grads
            .iter()
            .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let v = probe_at(&model, f7, r1).v;
        assert!((v - v_fd).abs() <= 1e-6 * v, "{v} vs {v_fd}");
    }

    #[test]
    fn probe_dead_head_gives_zero_variance() {
        // Only biases nonzero: J_x does not depend on x and Σ_x t(a·x) does not depend on a.
        let f = field(31);
        let r1 = BitIndex::new(f, 1).unwrap();
        let mut model = MlpModel::scalar(&[5, 5], Activation::Sigmoid, 1).unwrap();
        for s in model.shapes.clone() {
            for o in 0..s.d_out {
                model.params[s.b_off + o] = 0.1 * (o as f64 + 1.0);
            }
        }
        let fast = probe_at(&model, f, r1);
        let def = probe_definitional(&model, f, r1, 1.0);
        assert!(fast.v.abs() < 1e-14 && def.v_two_pass.abs() < 1e-14);
        assert!(fast.g > 0.0);
    }

    #[test]
    fn probe_sign_flip_symmetry() {
        let f = field(23);
        let r1 = BitIndex::new(f, 1).unwrap();
        let model = random_model(
            vec![1, 6, 6, 1],
            vec![Activation::Sigmoid, Activation::Sigmoid, Activation::Identity],
            5,
        );
        let mut flipped = model.clone();
        for v in flipped.head_mut() {
            *v = -*v;
        }
        let a = probe_definitional(&model, f, r1, 1.0);
        let b = probe_definitional(&flipped, f, r1, -1.0);
        assert!((a.v_two_pass - b.v_two_pass).abs() <= 1e-12 * a.v_two_pass);
    }

    #[test]
    fn probe_is_deterministic_and_capped() {
        let f = field(101);
        let r1 = BitIndex::new(f, 1).unwrap();
        let arch = ArchSpec {
            hidden: vec![8, 8],
            activation: Activation::Sigmoid,
        };
        let a = probe_variance(f, r1, &arch, 3, 42).unwrap();
        let b = probe_variance(f, r1, &arch, 3, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.v >= 0.0 && a.g > 0.0);
        assert_eq!(a.seeds.len(), 3);
        let big = field(3011);
        assert!(matches!(
            probe_variance(big, BitIndex::new(big, 1).unwrap(), &arch, 1, 0),
            Err(Error::SizeLimit { .. })
        ));
    }

    #[test]
    fn train_config_validation() {
        let mut c = TrainConfig::waves(0, 1);
        assert!(matches!(train(&c), Err(Error::Config(_))));
        c = TrainConfig::bits(15, 1, 1);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = TrainConfig::bits(13, 5, 1);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = TrainConfig::waves(4, 1);
        c.lr = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn constant_wave_is_learned() {
        let mut c = TrainConfig::waves(2, 0);
        c.a = Some(0);
        let t = train(&c).unwrap();
        assert_eq!(t.records.len(), 100);
        assert!(t.final_loss < 0.02, "{}", t.final_loss);
        assert!(t.final_acc().is_none());
    }

    #[test]
    fn small_bit_task_runs_and_is_deterministic() {
        let mut c = TrainConfig::bits(13, 1, 3);
        c.samples = 200;
        c.epochs = 5;
        c.hidden = vec![8, 8];
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert_eq!(a, b);
        let acc = a.final_acc().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let mut buf = Vec::new();
        write_trace_csv(&a, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,loss,acc\n1,"));
    }

    #[test]
    fn all_bits_task_has_one_output_per_bit() {
        let mut c = TrainConfig::all_bits(61, 2);
        c.samples = 100;
        c.epochs = 2;
        c.hidden = vec![4];
        let t = train(&c).unwrap();
        assert_eq!(t.final_bit_acc.len(), 6);
    }

    #[test]
    fn random_prime_has_requested_length() {
        for seed in 0..10 {
            let p = random_prime_with_bits(20, seed).unwrap();
            assert!(is_prime(p) && (1 << 19..1 << 20).contains(&p));
        }
    }
}
