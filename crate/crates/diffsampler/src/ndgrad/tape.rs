//! Operation-recording tape for reverse-mode differentiation.
//!
//! Nodes are whole batch tensors: one node per affine layer, activation,
//! elementwise op or reduction. The recording order is topological by
//! construction, so backward is a single reverse sweep. Parameter groups
//! are registered up front and receive flat gradient arrays aligned with
//! their [`ParamStore`](super::ParamStore) layout.

use std::collections::HashMap;
use std::sync::Arc;

use crate::energies::Energy;
use crate::error::{Error, Result};
use crate::linalg::{axpy, Tensor};

use super::{Activation, LayerSpec, MlpHandle, ParamStore, ScalarHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupId(pub usize);

enum Payload {
    /// Constant; backward stops here.
    Const,
    /// Differentiable leaf; cotangent is retained and returned.
    Input,
    /// (1, len) view of a parameter slice.
    Param {
        group: usize,
        offset: usize,
        len: usize,
    },
    /// y = [x, tail] Wᵀ + b. `tail` is a per-step constant appended to every row.
    Affine {
        x: NodeId,
        group: usize,
        layer: usize,
        tail: Option<Box<[f64]>>,
    },
    Act {
        x: NodeId,
        kind: Activation,
        aux: Tensor,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    AddConst {
        x: NodeId,
    },
    Clip {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Square {
        x: NodeId,
    },
    Sqrt {
        x: NodeId,
    },
    Ln {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    SumCols {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    /// Per-row energy value; gradient rows are captured at forward time.
    EnergyVal {
        x: NodeId,
        grad: Tensor,
    },
    /// Per-row energy gradient; backward applies Hessian-vector products.
    EnergyGrad {
        x: NodeId,
        energy: Arc<dyn Energy>,
    },
}

struct Node {
    payload: Payload,
    value: Tensor,
}

struct Group {
    data: Arc<Vec<f64>>,
    layers: Vec<LayerSpec>,
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    groups: Vec<Vec<f64>>,
    inputs: HashMap<usize, Tensor>,
}

impl Grads {
    pub fn group(&self, g: GroupId) -> &[f64] {
        &self.groups[g.0]
    }

    pub fn input(&self, id: NodeId) -> Option<&Tensor> {
        self.inputs.get(&id.0)
    }

    /// Elementwise add of another sweep's group gradients (chunk reduce).
    pub fn accumulate(&mut self, other: &Grads) {
        assert_eq!(self.groups.len(), other.groups.len());
        for (a, b) in self.groups.iter_mut().zip(other.groups.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            groups: self.groups.iter().map(|g| vec![0.0; g.len()]).collect(),
            inputs: HashMap::new(),
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    groups: Vec<Group>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            groups: Vec::new(),
            consumed: false,
        }
    }

    /// Snapshot a parameter store for use by this tape's nodes.
    pub fn register(&mut self, store: &ParamStore) -> GroupId {
        self.groups.push(Group {
            data: store.data_arc(),
            layers: store.layers().to_vec(),
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Overwrite one row of a recorded value with a constant. Keeps flagged
    /// (non-finite) batch rows from poisoning downstream node values; the
    /// row's loss contribution must be masked out by the caller.
    pub fn sanitize_row(&mut self, id: NodeId, row: usize, fill: f64) {
        self.nodes[id.0].value.row_mut(row).fill(fill);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, payload: Payload, value: Tensor) -> NodeId {
        self.nodes.push(Node { payload, value });
        NodeId(self.nodes.len() - 1)
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Payload::Const, t)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Payload::Input, t)
    }

    /// (1, len) leaf over params[offset..offset+len].
    pub fn param_slice(&mut self, g: GroupId, offset: usize, len: usize) -> NodeId {
        let vals = self.groups[g.0].data[offset..offset + len].to_vec();
        self.push(
            Payload::Param {
                group: g.0,
                offset,
                len,
            },
            Tensor::row_vec(vals),
        )
    }

    pub fn param_scalar(&mut self, g: GroupId, h: ScalarHandle) -> NodeId {
        self.param_slice(g, h.offset, 1)
    }

    // ── network layers ───────────────────────────────────────────────

    fn affine(&mut self, x: NodeId, g: GroupId, layer: usize, tail: Option<&[f64]>) -> NodeId {
        let group = &self.groups[g.0];
        let spec = group.layers[layer].clone();
        let w = &group.data[spec.w_range()];
        let b = &group.data[spec.b_range()];
        let xv = &self.nodes[x.0].value;
        let tail_len = tail.map_or(0, |t| t.len());
        assert_eq!(
            xv.cols + tail_len,
            spec.fan_in,
            "affine input width mismatch"
        );
        let value = match tail {
            Some(t) => super::split_affine_forward(xv, w, b, t, spec.fan_out),
            None => crate::linalg::affine_forward(xv, w, b, spec.fan_out),
        };
        self.push(
            Payload::Affine {
                x,
                group: g.0,
                layer,
                tail: tail.map(|t| t.to_vec().into_boxed_slice()),
            },
            value,
        )
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let (value, aux) = {
            let xv = &self.nodes[x.0].value;
            let mut y = xv.clone();
            let mut aux = Tensor::zeros(xv.rows, xv.cols);
            for (v, a) in y.data.iter_mut().zip(aux.data.iter_mut()) {
                let (val, t) = kind.value_aux(*v);
                *a = t;
                *v = val;
            }
            (y, aux)
        };
        self.push(Payload::Act { x, kind, aux }, value)
    }

    /// Full MLP forward. Input width must equal the handle's `in_dim`.
    pub fn mlp(&mut self, g: GroupId, h: &MlpHandle, x: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].value.cols != h.in_dim {
            return Err(Error::shape(format!(
                "mlp input width {} does not match first layer fan_in {}",
                self.nodes[x.0].value.cols, h.in_dim
            )));
        }
        Ok(self.mlp_inner(g, h, x, None))
    }

    /// MLP forward where the first layer sees [x, tail] with a constant tail.
    pub fn mlp_split(
        &mut self,
        g: GroupId,
        h: &MlpHandle,
        x: NodeId,
        tail: &[f64],
    ) -> Result<NodeId> {
        if self.nodes[x.0].value.cols + tail.len() != h.in_dim {
            return Err(Error::shape(format!(
                "mlp split input width {}+{} does not match fan_in {}",
                self.nodes[x.0].value.cols,
                tail.len(),
                h.in_dim
            )));
        }
        Ok(self.mlp_inner(g, h, x, Some(tail)))
    }

    fn mlp_inner(&mut self, g: GroupId, h: &MlpHandle, x: NodeId, tail: Option<&[f64]>) -> NodeId {
        let n_layers = h.layers.end - h.layers.start;
        let mut cur = x;
        for (k, layer) in h.layers.clone().enumerate() {
            cur = self.affine(cur, g, layer, if k == 0 { tail } else { None });
            if k + 1 < n_layers {
                cur = self.activation(cur, h.activation);
            }
        }
        cur
    }

    // ── elementwise / reductions ─────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.broadcast_zip(a, b, |x, y| x + y);
        self.push(Payload::Add { a, b }, value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.broadcast_zip(a, b, |x, y| x - y);
        self.push(Payload::Sub { a, b }, value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.broadcast_zip(a, b, |x, y| x * y);
        self.push(Payload::Mul { a, b }, value)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.broadcast_zip(a, b, |x, y| x / y);
        self.push(Payload::Div { a, b }, value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data.iter_mut() {
            *v *= c;
        }
        self.push(Payload::Scale { x, c }, value)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data.iter_mut() {
            *v += c;
        }
        self.push(Payload::AddConst { x }, value)
    }

    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data.iter_mut() {
            *v = v.clamp(lo, hi);
        }
        self.push(Payload::Clip { x, lo, hi }, value)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data.iter_mut() {
            *v *= *v;
        }
        self.push(Payload::Square { x }, value)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data.iter_mut() {
            *v = v.sqrt();
        }
        self.push(Payload::Sqrt { x }, value)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data.iter_mut() {
            *v = v.ln();
        }
        self.push(Payload::Ln { x }, value)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data.iter_mut() {
            *v = v.exp();
        }
        self.push(Payload::Exp { x }, value)
    }

    /// (r, c) -> (r, 1) row sums.
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut value = Tensor::zeros(xv.rows, 1);
        for r in 0..xv.rows {
            value.data[r] = xv.row(r).iter().sum();
        }
        self.push(Payload::SumCols { x }, value)
    }

    /// Total sum -> (1, 1).
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        self.push(Payload::SumAll { x }, Tensor::scalar(s))
    }

    /// Per-row energy values (r, 1); the analytic gradient is captured now
    /// so backward needs no further energy evaluations.
    pub fn energy_value(&mut self, x: NodeId, energy: &dyn Energy) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols;
        let mut grad = Tensor::zeros(xv.rows, d);
        let mut value = Tensor::zeros(xv.rows, 1);
        for r in 0..xv.rows {
            value.data[r] = energy.energy_grad(xv.row(r), grad.row_mut(r));
        }
        self.push(Payload::EnergyVal { x, grad }, value)
    }

    /// Per-row energy gradients (r, d). Backward uses Hessian-vector
    /// products, so only use this where the input genuinely carries
    /// gradients (reparametrized simulation); otherwise evaluate the
    /// gradient into a constant node.
    pub fn energy_gradient(&mut self, x: NodeId, energy: Arc<dyn Energy>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut value = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            energy.grad(xv.row(r), value.row_mut(r));
        }
        self.push(Payload::EnergyGrad { x, energy }, value)
    }

    fn broadcast_zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert!(
            broadcast_ok(av, bv),
            "broadcast mismatch: ({},{}) vs ({},{})",
            av.rows,
            av.cols,
            bv.rows,
            bv.cols
        );
        let mut out = Tensor::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            for c in 0..av.cols {
                out.data[r * av.cols + c] = f(av.at(r, c), bcast_at(bv, r, c));
            }
        }
        out
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from the given seed cotangents. Consumes the tape:
    /// a second call is an error.
    pub fn backward(&mut self, seeds: &[(NodeId, Tensor)]) -> Result<Grads> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let mut cots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            let node = &self.nodes[id.0];
            if !node.value.same_shape(seed) {
                return Err(Error::shape(format!(
                    "seed cotangent shape ({}, {}) does not match node shape ({}, {})",
                    seed.rows, seed.cols, node.value.rows, node.value.cols
                )));
            }
            accum(&mut cots[id.0], seed);
        }
        let mut grads = Grads {
            groups: self
                .groups
                .iter()
                .map(|g| vec![0.0; g.data.len()])
                .collect(),
            inputs: HashMap::new(),
        };
        for idx in (0..self.nodes.len()).rev() {
            let Some(cot) = cots[idx].take() else {
                continue;
            };
            self.pull_back(idx, &cot, &mut cots, &mut grads);
        }
        Ok(grads)
    }

    fn pull_back(&self, idx: usize, cot: &Tensor, cots: &mut [Option<Tensor>], grads: &mut Grads) {
        let node = &self.nodes[idx];
        match &node.payload {
            Payload::Const => {}
            Payload::Input => {
                let slot = grads
                    .inputs
                    .entry(idx)
                    .or_insert_with(|| Tensor::zeros(node.value.rows, node.value.cols));
                for (a, b) in slot.data.iter_mut().zip(cot.data.iter()) {
                    *a += b;
                }
            }
            Payload::Param { group, offset, len } => {
                let g = &mut grads.groups[*group];
                for i in 0..*len {
                    g[offset + i] += cot.data[i];
                }
            }
            Payload::Affine {
                x,
                group,
                layer,
                tail,
            } => {
                let gr = &self.groups[*group];
                let spec = &gr.layers[*layer];
                let w = &gr.data[spec.w_range()];
                let xv = &self.nodes[x.0].value;
                let xc = xv.cols;
                let fan_in = spec.fan_in;
                let gvec = &mut grads.groups[*group];
                // colsum(dY) feeds both the bias and the constant-tail block
                let mut col = vec![0.0; spec.fan_out];
                let mut dx = Tensor::zeros(xv.rows, xc);
                for r in 0..cot.rows {
                    let cr = cot.row(r);
                    let xr = xv.row(r);
                    let dxr = dx.row_mut(r);
                    for o in 0..spec.fan_out {
                        let g = cr[o];
                        if g != 0.0 {
                            axpy(g, &w[o * fan_in..o * fan_in + xc], dxr);
                            axpy(
                                g,
                                xr,
                                &mut gvec[spec.w_off + o * fan_in..spec.w_off + o * fan_in + xc],
                            );
                        }
                        col[o] += g;
                    }
                }
                for o in 0..spec.fan_out {
                    gvec[spec.b_off + o] += col[o];
                    if let Some(t) = tail {
                        axpy(
                            col[o],
                            t,
                            &mut gvec[spec.w_off + o * fan_in + xc..spec.w_off + (o + 1) * fan_in],
                        );
                    }
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::Act { x, kind, aux } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = cot.clone();
                for ((d, xi), t) in dx.data.iter_mut().zip(xv.data.iter()).zip(aux.data.iter()) {
                    *d *= kind.deriv_with(*xi, *t);
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::Add { a, b } => {
                accum(&mut cots[a.0], cot);
                self.accum_reduced(*b, cot, 1.0, None, cots);
            }
            Payload::Sub { a, b } => {
                accum(&mut cots[a.0], cot);
                self.accum_reduced(*b, cot, -1.0, None, cots);
            }
            Payload::Mul { a, b } => {
                let bv = &self.nodes[b.0].value;
                let av = &self.nodes[a.0].value;
                let mut da = cot.clone();
                for r in 0..da.rows {
                    for c in 0..da.cols {
                        da.data[r * da.cols + c] *= bcast_at(bv, r, c);
                    }
                }
                accum(&mut cots[a.0], &da);
                self.accum_reduced(*b, cot, 1.0, Some(av), cots);
            }
            Payload::Div { a, b } => {
                let bv = &self.nodes[b.0].value;
                let av = &self.nodes[a.0].value;
                let mut da = cot.clone();
                for r in 0..da.rows {
                    for c in 0..da.cols {
                        da.data[r * da.cols + c] /= bcast_at(bv, r, c);
                    }
                }
                accum(&mut cots[a.0], &da);
                // d/db (a/b) = -a / b^2
                if !matches!(self.nodes[b.0].payload, Payload::Const) {
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    for r in 0..cot.rows {
                        for c in 0..cot.cols {
                            let bval = bcast_at(bv, r, c);
                            let contrib = -cot.at(r, c) * av.at(r, c) / (bval * bval);
                            bcast_accum(&mut db, r, c, contrib);
                        }
                    }
                    accum(&mut cots[b.0], &db);
                }
            }
            Payload::Scale { x, c } => {
                let mut dx = cot.clone();
                for v in dx.data.iter_mut() {
                    *v *= c;
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::AddConst { x } => accum(&mut cots[x.0], cot),
            Payload::Clip { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = cot.clone();
                for (d, xi) in dx.data.iter_mut().zip(xv.data.iter()) {
                    if *xi < *lo || *xi > *hi {
                        *d = 0.0;
                    }
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::Square { x } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = cot.clone();
                for (d, xi) in dx.data.iter_mut().zip(xv.data.iter()) {
                    *d *= 2.0 * *xi;
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::Sqrt { x } => {
                let yv = &node.value;
                let mut dx = cot.clone();
                for (d, yi) in dx.data.iter_mut().zip(yv.data.iter()) {
                    *d *= 0.5 / *yi;
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::Ln { x } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = cot.clone();
                for (d, xi) in dx.data.iter_mut().zip(xv.data.iter()) {
                    *d /= *xi;
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::Exp { x } => {
                let yv = &node.value;
                let mut dx = cot.clone();
                for (d, yi) in dx.data.iter_mut().zip(yv.data.iter()) {
                    *d *= *yi;
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::SumCols { x } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let g = cot.data[r];
                    for v in dx.row_mut(r) {
                        *v = g;
                    }
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::SumAll { x } => {
                let xv = &self.nodes[x.0].value;
                let g = cot.data[0];
                let dx = Tensor::from_vec(xv.rows, xv.cols, vec![g; xv.len()]);
                accum(&mut cots[x.0], &dx);
            }
            Payload::EnergyVal { x, grad } => {
                let mut dx = grad.clone();
                for r in 0..dx.rows {
                    let g = cot.data[r];
                    for v in dx.row_mut(r) {
                        *v *= g;
                    }
                }
                accum(&mut cots[x.0], &dx);
            }
            Payload::EnergyGrad { x, energy } => {
                if matches!(self.nodes[x.0].payload, Payload::Const) {
                    return;
                }
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    energy.hvp(xv.row(r), cot.row(r), dx.row_mut(r));
                }
                accum(&mut cots[x.0], &dx);
            }
        }
    }

    /// Accumulate `sign * cot (* weight)` into node `b`, summing over
    /// whatever dimensions `b` broadcasts across.
    fn accum_reduced(
        &self,
        b: NodeId,
        cot: &Tensor,
        sign: f64,
        weight: Option<&Tensor>,
        cots: &mut [Option<Tensor>],
    ) {
        if matches!(self.nodes[b.0].payload, Payload::Const) {
            return;
        }
        let bv = &self.nodes[b.0].value;
        let mut db = Tensor::zeros(bv.rows, bv.cols);
        for r in 0..cot.rows {
            for c in 0..cot.cols {
                let mut contrib = sign * cot.at(r, c);
                if let Some(w) = weight {
                    contrib *= w.at(r, c);
                }
                bcast_accum(&mut db, r, c, contrib);
            }
        }
        accum(&mut cots[b.0], &db);
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    (b.rows == a.rows && b.cols == a.cols)
        || (b.rows == 1 && b.cols == 1)
        || (b.rows == a.rows && b.cols == 1)
        || (b.rows == 1 && b.cols == a.cols)
}

#[inline]
fn bcast_at(b: &Tensor, r: usize, c: usize) -> f64 {
    let rr = if b.rows == 1 { 0 } else { r };
    let cc = if b.cols == 1 { 0 } else { c };
    b.at(rr, cc)
}

#[inline]
fn bcast_accum(db: &mut Tensor, r: usize, c: usize, v: f64) {
    let rr = if db.rows == 1 { 0 } else { r };
    let cc = if db.cols == 1 { 0 } else { c };
    let cols = db.cols;
    db.data[rr * cols + cc] += v;
}

fn accum(slot: &mut Option<Tensor>, add: &Tensor) {
    match slot {
        Some(t) => {
            debug_assert!(t.same_shape(add));
            for (a, b) in t.data.iter_mut().zip(add.data.iter()) {
                *a += b;
            }
        }
        None => *slot = Some(add.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{build_mlp, Activation, ParamBuilder};
    use crate::rngs::{normal_tensor, stream, Domain};

    #[test]
    fn identity_affine_passes_cotangent_through() {
        let mut b = ParamBuilder::new();
        let mut rng = stream(0, Domain::Init, 0);
        let h = b.mlp(&[2, 2], Activation::Relu, false, &mut rng).unwrap();
        let mut store = b.finish();
        // weights = I, bias = 0
        {
            let spec = store.layer(h.layers.start).clone();
            let vals = store.values_mut();
            vals[spec.w_off] = 1.0;
            vals[spec.w_off + 1] = 0.0;
            vals[spec.w_off + 2] = 0.0;
            vals[spec.w_off + 3] = 1.0;
            vals[spec.b_off] = 0.0;
            vals[spec.b_off + 1] = 0.0;
        }
        let mut tape = Tape::new();
        let g = tape.register(&store);
        let x = tape.input(Tensor::from_vec(1, 2, vec![0.7, -1.3]));
        let y = tape.mlp(g, &h, x).unwrap();
        assert_eq!(tape.value(y).data, vec![0.7, -1.3]);
        let seed = Tensor::from_vec(1, 2, vec![2.5, -4.0]);
        let grads = tape.backward(&[(y, seed.clone())]).unwrap();
        assert_eq!(grads.input(x).unwrap().data, seed.data);
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut tape = Tape::new();
        let xv = vec![0.5, -2.0, 3.25];
        let x = tape.input(Tensor::row_vec(xv.clone()));
        let sq = tape.square(x);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(&[(loss, Tensor::scalar(1.0))]).unwrap();
        let gi = grads.input(x).unwrap();
        for (g, v) in gi.data.iter().zip(xv.iter()) {
            assert!((g - 2.0 * v).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.0));
        let y = tape.square(x);
        tape.backward(&[(y, Tensor::scalar(1.0))]).unwrap();
        let mut tape2 = Tape::new();
        let x2 = tape2.input(Tensor::scalar(1.0));
        let y2 = tape2.square(x2);
        tape2.backward(&[(y2, Tensor::scalar(1.0))]).unwrap();
        assert!(matches!(
            tape2.backward(&[(y2, Tensor::scalar(1.0))]),
            Err(Error::TapeConsumed)
        ));
        let _ = (tape, y);
    }

    #[test]
    fn seed_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vec(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(&[(x, Tensor::scalar(1.0))]),
            Err(Error::Shape(_))
        ));
    }

    /// Central finite differences of a scalar-valued function.
    fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(1e-12_f64, |m, v| m.max(v.abs()));
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn primitives_match_finite_differences() {
        // Each case: (name, tape builder producing a scalar from a 4-vector input)
        type Builder = fn(&mut Tape, NodeId) -> NodeId;
        let cases: Vec<(&str, Builder)> = vec![
            ("square", |t, x| {
                let s = t.square(x);
                t.sum_all(s)
            }),
            ("sqrt", |t, x| {
                let s = t.square(x); // keep positive
                let a = t.add_const(s, 0.5);
                let r = t.sqrt(a);
                t.sum_all(r)
            }),
            ("ln", |t, x| {
                let s = t.square(x);
                let a = t.add_const(s, 0.7);
                let l = t.ln(a);
                t.sum_all(l)
            }),
            ("exp", |t, x| {
                let e = t.exp(x);
                t.sum_all(e)
            }),
            ("clip", |t, x| {
                let c = t.clip(x, -0.9, 0.9);
                let s = t.square(c);
                t.sum_all(s)
            }),
            ("mul_broadcast", |t, x| {
                let w = t.constant(Tensor::row_vec(vec![2.0, -1.0, 0.5, 3.0]));
                let m = t.mul(x, w);
                let s = t.sum_cols(m);
                let sq = t.square(s);
                t.sum_all(sq)
            }),
            ("div", |t, x| {
                let sq = t.square(x);
                let denom = t.add_const(sq, 1.5);
                let q = t.div(x, denom);
                t.sum_all(q)
            }),
            ("gelu", |t, x| {
                let a = t.activation(x, Activation::Gelu);
                t.sum_all(a)
            }),
            ("tanh", |t, x| {
                let a = t.activation(x, Activation::Tanh);
                t.sum_all(a)
            }),
        ];
        let mut rng = stream(11, Domain::Misc, 0);
        for (name, build) in cases {
            // keep away from relu/clip kinks
            let x0: Vec<f64> = normal_tensor(&mut rng, 1, 4)
                .data
                .iter()
                .map(|v| v * 0.4 + 1.3)
                .collect();
            let run = |vals: &[f64]| {
                let mut t = Tape::new();
                let x = t.input(Tensor::row_vec(vals.to_vec()));
                let out = build(&mut t, x);
                t.value(out).data[0]
            };
            let fd = fd_grad(run, &x0, 1e-5);
            let mut t = Tape::new();
            let x = t.input(Tensor::row_vec(x0.clone()));
            let out = build(&mut t, x);
            let grads = t.backward(&[(out, Tensor::scalar(1.0))]).unwrap();
            let err = max_rel_err(&grads.input(x).unwrap().data, &fd);
            assert!(err < 1e-7, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = stream(42, Domain::Init, 0);
        let (store, h) = build_mlp(&[3, 8, 8, 2], Activation::Gelu, false, &mut rng).unwrap();
        let x0 = normal_tensor(&mut rng, 4, 3);

        let loss_of = |s: &ParamStore| -> f64 {
            let y = s.eval_mlp(&h, &x0).unwrap();
            y.data.iter().map(|v| v * v).sum::<f64>()
        };

        // autodiff
        let mut tape = Tape::new();
        let g = tape.register(&store);
        let x = tape.input(x0.clone());
        let y = tape.mlp(g, &h, x).unwrap();
        let sq = tape.square(y);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(&[(loss, Tensor::scalar(1.0))]).unwrap();

        // fd over all params
        let mut fd = vec![0.0; store.len()];
        let hstep = 1e-5;
        let mut s = store.clone();
        for i in 0..store.len() {
            let orig = s.values()[i];
            s.values_mut()[i] = orig + hstep;
            let fp = loss_of(&s);
            s.values_mut()[i] = orig - hstep;
            let fm = loss_of(&s);
            s.values_mut()[i] = orig;
            fd[i] = (fp - fm) / (2.0 * hstep);
        }
        let err = max_rel_err(grads.group(g), &fd);
        assert!(err < 1e-5, "composed mlp fd err {err}");

        // and input gradients
        let fd_in = fd_grad(
            |vals| {
                let xt = Tensor::from_vec(4, 3, vals.to_vec());
                let y = store.eval_mlp(&h, &xt).unwrap();
                y.data.iter().map(|v| v * v).sum()
            },
            &x0.data,
            1e-5,
        );
        let err_in = max_rel_err(&grads.input(x).unwrap().data, &fd_in);
        assert!(err_in < 1e-5, "input fd err {err_in}");
    }

    #[test]
    fn tape_forward_matches_straight_line_reimplementation() {
        // independent oracle: scalar loops, no shared kernels
        let mut rng = stream(42, Domain::Init, 1);
        let (store, h) = build_mlp(&[3, 5, 2], Activation::Tanh, false, &mut rng).unwrap();
        let x = vec![0.3, -1.1, 0.8];

        let mut tape = Tape::new();
        let g = tape.register(&store);
        let xi = tape.input(Tensor::row_vec(x.clone()));
        let y = tape.mlp(g, &h, xi).unwrap();

        // straight-line re-evaluation
        let vals = store.values();
        let l0 = store.layer(0);
        let l1 = store.layer(1);
        let mut hidden = [0.0; 5];
        for o in 0..5 {
            let mut acc = vals[l0.b_off + o];
            for k in 0..3 {
                acc += vals[l0.w_off + o * 3 + k] * x[k];
            }
            hidden[o] = acc.tanh();
        }
        for o in 0..2 {
            let mut acc = vals[l1.b_off + o];
            for k in 0..5 {
                acc += vals[l1.w_off + o * 5 + k] * hidden[k];
            }
            let got = tape.value(y).data[o];
            assert!((got - acc).abs() < 1e-14, "output {o}: {got} vs {acc}");
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = stream(9, Domain::Init, 0);
        let (store, h) = build_mlp(&[4, 16, 4], Activation::Gelu, false, &mut rng).unwrap();
        let x = normal_tensor(&mut rng, 7, 4);
        let a = store.eval_mlp(&h, &x).unwrap();
        let b = store.eval_mlp(&h, &x).unwrap();
        assert_eq!(a.data, b.data); // bit-identical
    }

    #[test]
    fn shared_parameters_accumulate_gradients() {
        // f(params) = g(x1; params) + g(x2; params) with ONE network must equal
        // the sum of gradients from two independent copies.
        let mut rng = stream(5, Domain::Init, 0);
        let (store, h) = build_mlp(&[2, 6, 1], Activation::Gelu, false, &mut rng).unwrap();
        let x1 = Tensor::row_vec(vec![0.4, -0.7]);
        let x2 = Tensor::row_vec(vec![-1.2, 0.3]);

        let mut tape = Tape::new();
        let g = tape.register(&store);
        let a = tape.input(x1.clone());
        let b = tape.input(x2.clone());
        let ya = tape.mlp(g, &h, a).unwrap();
        let yb = tape.mlp(g, &h, b).unwrap();
        let s = tape.add(ya, yb);
        let loss = tape.sum_all(s);
        let shared = tape.backward(&[(loss, Tensor::scalar(1.0))]).unwrap();

        let grad_single = |x: &Tensor| {
            let mut t = Tape::new();
            let gg = t.register(&store);
            let xi = t.input(x.clone());
            let y = t.mlp(gg, &h, xi).unwrap();
            let l = t.sum_all(y);
            t.backward(&[(l, Tensor::scalar(1.0))])
                .unwrap()
                .group(gg)
                .to_vec()
        };
        let g1 = grad_single(&x1);
        let g2 = grad_single(&x2);
        for i in 0..store.len() {
            assert!((shared.group(g)[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_split_gradients_match_concatenated() {
        let mut rng = stream(6, Domain::Init, 0);
        let (store, h) = build_mlp(&[5, 6, 2], Activation::Gelu, false, &mut rng).unwrap();
        let x = Tensor::from_vec(3, 2, vec![0.1, 0.2, -0.4, 0.9, 1.1, -0.3]);
        let tail = [0.25, -0.5, 0.75];

        let mut t1 = Tape::new();
        let g1 = t1.register(&store);
        let xi1 = t1.input(x.clone());
        let y1 = t1.mlp_split(g1, &h, xi1, &tail).unwrap();
        let l1 = t1.sum_all(y1);
        let gr1 = t1.backward(&[(l1, Tensor::scalar(1.0))]).unwrap();

        let mut full = Tensor::zeros(3, 5);
        for r in 0..3 {
            full.row_mut(r)[..2].copy_from_slice(x.row(r));
            full.row_mut(r)[2..].copy_from_slice(&tail);
        }
        let mut t2 = Tape::new();
        let g2 = t2.register(&store);
        let xi2 = t2.input(full);
        let y2 = t2.mlp(g2, &h, xi2).unwrap();
        let l2 = t2.sum_all(y2);
        let gr2 = t2.backward(&[(l2, Tensor::scalar(1.0))]).unwrap();

        for i in 0..store.len() {
            assert!((gr1.group(g1)[i] - gr2.group(g2)[i]).abs() < 1e-12);
        }
        // x-part of the input gradient agrees
        let gi1 = gr1.input(xi1).unwrap();
        let gi2 = gr2.input(xi2).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert!((gi1.at(r, c) - gi2.at(r, c)).abs() < 1e-12);
            }
        }
    }
}
