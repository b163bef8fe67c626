//! Minimal reverse-mode autodiff over dense MLPs, plus Adam.
//!
//! Parameters live in flat f64 arrays ([`ParamStore`]) with a layout
//! descriptor mapping (layer, weight/bias) to slices. The [`tape::Tape`]
//! records per-layer affine/activation primitives (not per-scalar nodes),
//! which keeps memory O(batch · width · layers · T) when backpropagating
//! through a full T-step simulation.

pub mod tape;

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{affine_forward, dot, Tensor};

pub use tape::{Grads, NodeId, Tape};

/// Elementwise nonlinearity between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// tanh-form GELU; value and derivative are exact for the same formula.
    Gelu,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl Activation {
    /// Forward value plus a reusable intermediate (tanh of the inner
    /// argument) so the backward pass avoids a second libm call.
    #[inline]
    pub fn value_aux(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                (0.5 * x * (1.0 + t), t)
            }
            Activation::Relu => (x.max(0.0), 0.0),
            Activation::Tanh => {
                let t = x.tanh();
                (t, t)
            }
        }
    }

    /// Derivative given the cached intermediate from [`value_aux`](Self::value_aux).
    #[inline]
    pub fn deriv_with(self, x: f64, aux: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = aux;
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - aux * aux,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Offsets of one affine layer inside a flat parameter array.
/// Weights are (fan_out, fan_in) row-major, followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub w_off: usize,
    pub b_off: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerSpec {
    pub fn w_range(&self) -> Range<usize> {
        self.w_off..self.w_off + self.fan_in * self.fan_out
    }
    pub fn b_range(&self) -> Range<usize> {
        self.b_off..self.b_off + self.fan_out
    }
}

/// One MLP inside a [`ParamStore`] (a store may host several networks).
#[derive(Debug, Clone)]
pub struct MlpHandle {
    pub layers: Range<usize>,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// A learnable scalar inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct ScalarHandle {
    pub offset: usize,
}

/// Flat parameter array plus layout. Cloning is cheap (shared storage);
/// mutation copies-on-write if a tape still holds the values.
#[derive(Debug, Clone)]
pub struct ParamStore {
    data: Arc<Vec<f64>>,
    layers: Vec<LayerSpec>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn layer(&self, idx: usize) -> &LayerSpec {
        &self.layers[idx]
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn scalar(&self, h: ScalarHandle) -> f64 {
        self.data[h.offset]
    }

    pub fn set_scalar(&mut self, h: ScalarHandle, v: f64) {
        self.values_mut()[h.offset] = v;
    }

    /// Straight-line MLP evaluation (no tape).
    pub fn eval_mlp(&self, h: &MlpHandle, x: &Tensor) -> Result<Tensor> {
        if x.cols != h.in_dim {
            return Err(Error::shape(format!(
                "mlp input width {} does not match first layer fan_in {}",
                x.cols, h.in_dim
            )));
        }
        let mut cur = x.clone();
        self.eval_layers(h, &mut cur, None);
        Ok(cur)
    }

    /// Like [`eval_mlp`](Self::eval_mlp) but the first layer's input is the
    /// concatenation [x, tail] with `tail` constant across rows.
    pub fn eval_mlp_split(&self, h: &MlpHandle, x: &Tensor, tail: &[f64]) -> Result<Tensor> {
        if x.cols + tail.len() != h.in_dim {
            return Err(Error::shape(format!(
                "mlp split input width {}+{} does not match fan_in {}",
                x.cols,
                tail.len(),
                h.in_dim
            )));
        }
        let mut cur = x.clone();
        self.eval_layers(h, &mut cur, Some(tail));
        Ok(cur)
    }

    fn eval_layers(&self, h: &MlpHandle, cur: &mut Tensor, tail: Option<&[f64]>) {
        let n_layers = h.layers.end - h.layers.start;
        for (k, li) in h.layers.clone().enumerate() {
            let spec = &self.layers[li];
            let w = &self.data[spec.w_range()];
            let b = &self.data[spec.b_range()];
            let mut y = if k == 0 {
                if let Some(tail) = tail {
                    split_affine_forward(cur, w, b, tail, spec.fan_out)
                } else {
                    affine_forward(cur, w, b, spec.fan_out)
                }
            } else {
                affine_forward(cur, w, b, spec.fan_out)
            };
            if k + 1 < n_layers {
                for v in y.data.iter_mut() {
                    *v = h.activation.value(*v);
                }
            }
            *cur = y;
        }
    }
}

/// y = [x, tail] · Wᵀ + b with the tail block folded into an effective
/// bias (it is constant across rows), then a transposed-axpy sweep over
/// the x columns.
pub(crate) fn split_affine_forward(
    x: &Tensor,
    w: &[f64],
    b: &[f64],
    tail: &[f64],
    out_dim: usize,
) -> Tensor {
    let xc = x.cols;
    let fan_in = xc + tail.len();
    let mut eff_bias = vec![0.0; out_dim];
    for o in 0..out_dim {
        eff_bias[o] = b[o] + dot(&w[o * fan_in + xc..(o + 1) * fan_in], tail);
    }
    let mut wt = vec![0.0; xc * out_dim];
    for o in 0..out_dim {
        for j in 0..xc {
            wt[j * out_dim + o] = w[o * fan_in + j];
        }
    }
    let mut y = Tensor::zeros(x.rows, out_dim);
    for r in 0..x.rows {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        yr.copy_from_slice(&eff_bias);
        for (j, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                crate::linalg::axpy(xv, &wt[j * out_dim..(j + 1) * out_dim], yr);
            }
        }
    }
    y
}

/// Incrementally lays out MLPs and scalars into one flat store.
pub struct ParamBuilder {
    data: Vec<f64>,
    layers: Vec<LayerSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        ParamBuilder {
            data: Vec::new(),
            layers: Vec::new(),
        }
    }

    /// Append an MLP. Weights and biases are uniform(-1/sqrt(fan_in), +1/sqrt(fan_in));
    /// with `zero_init_last` the final layer is exactly zero so the network
    /// outputs the zero vector at initialization.
    pub fn mlp(
        &mut self,
        sizes: &[usize],
        activation: Activation,
        zero_init_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<MlpHandle> {
        if sizes.len() < 2 {
            return Err(Error::config(format!(
                "mlp needs at least 2 layer sizes, got {:?}",
                sizes
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::config(format!(
                "mlp layer sizes must be positive: {:?}",
                sizes
            )));
        }
        let first_layer = self.layers.len();
        let n_layers = sizes.len() - 1;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let w_off = self.data.len();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let zero = zero_init_last && l == n_layers - 1;
            for _ in 0..fan_in * fan_out {
                self.data.push(if zero {
                    0.0
                } else {
                    rng.gen_range(-bound..bound)
                });
            }
            let b_off = self.data.len();
            for _ in 0..fan_out {
                self.data.push(if zero {
                    0.0
                } else {
                    rng.gen_range(-bound..bound)
                });
            }
            self.layers.push(LayerSpec {
                w_off,
                b_off,
                fan_in,
                fan_out,
            });
        }
        Ok(MlpHandle {
            layers: first_layer..first_layer + n_layers,
            activation,
            in_dim: sizes[0],
            out_dim: *sizes.last().unwrap(),
        })
    }

    pub fn scalar(&mut self, init: f64) -> ScalarHandle {
        let offset = self.data.len();
        self.data.push(init);
        ScalarHandle { offset }
    }

    pub fn finish(self) -> ParamStore {
        ParamStore {
            data: Arc::new(self.data),
            layers: self.layers,
        }
    }
}

impl Default for ParamBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// Build a store holding a single MLP.
pub fn build_mlp(
    sizes: &[usize],
    activation: Activation,
    zero_init_last: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamStore, MlpHandle)> {
    let mut b = ParamBuilder::new();
    let h = b.mlp(sizes, activation, zero_init_last, rng)?;
    Ok((b.finish(), h))
}

/// Adam with bias correction. One state per parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates skipped because the gradient contained non-finite entries.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            skipped: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Returns false (and leaves params untouched) if the
    /// gradient contains NaN/Inf; the skip is counted for the run report.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[f64], lr: f64) -> Result<bool> {
        if lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if grads.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam length mismatch: grads {}, state {}, params {}",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let p = params.values_mut();
        for i in 0..grads.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(true)
    }

    pub(crate) fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore_raw(m: Vec<f64>, v: Vec<f64>, step: u64, skipped: u64) -> Self {
        AdamState {
            m,
            v,
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            skipped,
        }
    }
}
