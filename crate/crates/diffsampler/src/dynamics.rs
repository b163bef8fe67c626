//! Forward Gaussian policies, fixed noising processes, and Euler–Maruyama
//! trajectory simulation with exact per-step log-density bookkeeping.
//!
//! A trajectory runs x_0 = 0 → x_Δt → … → x_1 on a uniform grid with
//! Δt = 1/T. The forward kernel is N(x + u(x,t)·Δt, g(t)²Δt·I) with the
//! drift u given by a neural network, optionally Langevin-parametrized as
//! clip(NN1(x,t) + NN2(t)·clip(∇log R(x), ±lgv_clip), ±gfn_clip). The
//! backward process is fixed: a discretized Brownian bridge or a
//! variance-preserving schedule, with the t = Δt factor a point mass at 0.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::energies::Energy;
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::linalg::Tensor;
use crate::ndgrad::tape::GroupId;
use crate::ndgrad::{Activation, MlpHandle, NodeId, ParamBuilder, ParamStore, Tape};
use rand_chacha::ChaCha8Rng;

pub const TIME_HARMONICS: usize = 64;
/// sin/cos pairs at 64 harmonic frequencies plus raw t.
pub const TIME_FEATURES: usize = 2 * TIME_HARMONICS + 1;

/// Sinusoidal time embedding appended to the state for the networks.
pub fn time_features(t: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(TIME_FEATURES);
    f.push(t);
    for k in 1..=TIME_HARMONICS {
        let w = k as f64 * PI * t;
        f.push(w.sin());
        f.push(w.cos());
    }
    f
}

// ── time grid ────────────────────────────────────────────────────────

/// Uniform discretization of [0, 1] into `steps` Euler–Maruyama steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub steps: usize,
}

impl Grid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("grid needs at least one step"));
        }
        Ok(Grid { steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// t_i = i / T (exact at both endpoints).
    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }
}

// ── backward (noising) process ───────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackwardKind {
    BrownianBridge,
    VariancePreserving { beta_min: f64, beta_max: f64 },
}

/// β(t) drift/diffusion pair of the variance-preserving schedule:
/// drift multiplier -β(t) and diffusion ν√(2β(t)) with ν = 1.
pub fn vp_coefficients(t: f64, beta_min: f64, beta_max: f64) -> (f64, f64) {
    let beta = (1.0 - t) * beta_min + t * beta_max;
    (-beta, (2.0 * beta).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardProcess {
    pub kind: BackwardKind,
    /// Base rate σ² shared with the forward policy (t_scale).
    pub sigma2: f64,
}

impl BackwardProcess {
    pub fn bridge(sigma2: f64) -> Self {
        BackwardProcess {
            kind: BackwardKind::BrownianBridge,
            sigma2,
        }
    }

    /// Squared diffusion rate g(t)² of the matching forward process.
    pub fn forward_rate(&self, t: f64) -> f64 {
        match self.kind {
            BackwardKind::BrownianBridge => self.sigma2,
            BackwardKind::VariancePreserving { beta_min, beta_max } => {
                let (_, diff) = vp_coefficients(t, beta_min, beta_max);
                diff * diff
            }
        }
    }

    /// Per-step variance of the matching forward kernel for the step
    /// t_i → t_{i+1}. Under the variance-preserving schedule the first
    /// step leaves the point mass for the noising chain's stationary
    /// spread (ν² = 1), mirroring the backward's point-mass factor at
    /// t = Δt; later steps take the Euler–Maruyama variance.
    pub fn forward_step_variance(&self, grid: &Grid, i: usize) -> f64 {
        match self.kind {
            BackwardKind::BrownianBridge => self.sigma2 * grid.dt(),
            BackwardKind::VariancePreserving { .. } => {
                if i == 0 {
                    1.0
                } else {
                    self.forward_rate(grid.time(i)) * grid.dt()
                }
            }
        }
    }

    /// Mean coefficient and variance of p_B(x_{t-Δt} | x_t) at t = i/T,
    /// valid for i ≥ 2. The i = 1 factor is a point mass at 0.
    pub fn step_params(&self, grid: &Grid, i: usize) -> (f64, f64) {
        debug_assert!(i >= 2 && i <= grid.steps);
        match self.kind {
            BackwardKind::BrownianBridge => {
                let coef = (i - 1) as f64 / i as f64;
                (coef, coef * self.sigma2 * grid.dt())
            }
            BackwardKind::VariancePreserving { beta_min, beta_max } => {
                let t = grid.time(i);
                let beta = (1.0 - t) * beta_min + t * beta_max;
                (1.0 - beta * grid.dt(), 2.0 * beta * grid.dt())
            }
        }
    }
}

/// Σ_i log p_B(x_{(i-1)Δt} | x_{iΔt}) over a full trajectory of states
/// x_0..x_T (the final i = 1 factor contributes 0). `states[i]` holds the
/// batch rows at time i/T; results are per row.
pub fn backward_log_density(
    process: &BackwardProcess,
    grid: &Grid,
    states: &[Tensor],
) -> Result<Vec<f64>> {
    if states.len() != grid.steps + 1 {
        return Err(Error::shape(format!(
            "expected {} states, got {}",
            grid.steps + 1,
            states.len()
        )));
    }
    if states[0].data.iter().any(|&v| v != 0.0) {
        return Err(Error::config("trajectory must start at the zero vector"));
    }
    let per_step = backward_step_log_density(process, grid, states);
    Ok((0..states[0].rows)
        .map(|r| per_step.row(r).iter().sum())
        .collect())
}

/// Per-step backward log densities, (rows × T); column i-1 holds
/// log p_B(x_{i-1} | x_i), with column 0 equal to 0 (point mass).
pub fn backward_step_log_density(
    process: &BackwardProcess,
    grid: &Grid,
    states: &[Tensor],
) -> Tensor {
    let rows = states[0].rows;
    let d = states[0].cols;
    let t_steps = grid.steps;
    let mut out = Tensor::zeros(rows, t_steps);
    for i in 2..=t_steps {
        let (coef, var) = process.step_params(grid, i);
        let norm = -0.5 * d as f64 * (2.0 * PI * var).ln();
        let prev = &states[i - 1];
        let cur = &states[i];
        for r in 0..rows {
            let mut ss = 0.0;
            for c in 0..d {
                let diff = prev.at(r, c) - coef * cur.at(r, c);
                ss += diff * diff;
            }
            out.data[r * t_steps + (i - 1)] = norm - ss / (2.0 * var);
        }
    }
    out
}

// ── forward policy ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// Per-step variance g(t)²Δt exactly (σ²Δt under the Brownian bridge).
    Fixed,
    /// Variance = clamp(exp(head(x,t)), 1e-6, 10) · g(t)²Δt.
    LearnedStateDependent,
}

#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub dim: usize,
    pub hidden: usize,
    pub langevin: bool,
    pub lgv_clip: f64,
    pub gfn_clip: f64,
    pub variance_mode: VarianceMode,
    pub zero_init_last: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            dim: 1,
            hidden: 64,
            langevin: false,
            lgv_clip: 1e2,
            gfn_clip: 1e4,
            variance_mode: VarianceMode::Fixed,
            zero_init_last: true,
        }
    }
}

/// Drift network, optional Langevin scale network and optional variance
/// head, all living in one parameter store (one optimizer group).
#[derive(Clone)]
pub struct Policy {
    pub store: ParamStore,
    pub cfg: PolicyConfig,
    drift_net: MlpHandle,
    scale_net: Option<MlpHandle>,
    var_net: Option<MlpHandle>,
}

/// Per-step variance as a tape term.
pub enum VarTerm {
    Const(f64),
    Node(NodeId),
}

pub struct StepNodes {
    pub shift: NodeId,
    pub var: VarTerm,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.dim;
        let h = cfg.hidden;
        let mut b = ParamBuilder::new();
        let drift_net = b.mlp(
            &[d + TIME_FEATURES, h, h, d],
            Activation::Gelu,
            cfg.zero_init_last,
            rng,
        )?;
        let scale_net = if cfg.langevin {
            Some(b.mlp(
                &[TIME_FEATURES, h, h, 1],
                Activation::Gelu,
                cfg.zero_init_last,
                rng,
            )?)
        } else {
            None
        };
        let var_net = if cfg.variance_mode == VarianceMode::LearnedStateDependent {
            Some(b.mlp(
                &[d + TIME_FEATURES, h, h, 1],
                Activation::Gelu,
                cfg.zero_init_last,
                rng,
            )?)
        } else {
            None
        };
        Ok(Policy {
            store: b.finish(),
            cfg,
            drift_net,
            scale_net,
            var_net,
        })
    }

    /// Mean shift u·Δt and per-step variance as tape nodes at time t.
    ///
    /// `reparam` marks states that carry gradients (backprop through the
    /// simulation); otherwise the energy score enters as a constant.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape,
        g: GroupId,
        x: NodeId,
        t: f64,
        dt: f64,
        step_var: f64,
        energy: &Arc<dyn Energy>,
        reparam: bool,
    ) -> Result<StepNodes> {
        let temb = time_features(t);
        let raw = tape.mlp_split(g, &self.drift_net, x, &temb)?;
        let pre_clip = if self.cfg.langevin {
            let score = if reparam {
                let eg = tape.energy_gradient(x, Arc::clone(energy));
                tape.scale(eg, -1.0)
            } else {
                let xv = tape.value(x);
                let mut sc = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    energy.grad(xv.row(r), sc.row_mut(r));
                }
                for v in sc.data.iter_mut() {
                    *v = -*v;
                }
                tape.constant(sc)
            };
            let clipped = tape.clip(score, -self.cfg.lgv_clip, self.cfg.lgv_clip);
            let temb_node = tape.constant(Tensor::row_vec(temb.clone()));
            let scale_out = tape.mlp(g, self.scale_net.as_ref().unwrap(), temb_node)?;
            let lgv_term = tape.mul(clipped, scale_out);
            tape.add(raw, lgv_term)
        } else {
            raw
        };
        let drift = tape.clip(pre_clip, -self.cfg.gfn_clip, self.cfg.gfn_clip);
        let shift = tape.scale(drift, dt);
        let var = match self.cfg.variance_mode {
            VarianceMode::Fixed => VarTerm::Const(step_var),
            VarianceMode::LearnedStateDependent => {
                let lv = tape.mlp_split(g, self.var_net.as_ref().unwrap(), x, &temb)?;
                let e = tape.exp(lv);
                let c = tape.clip(e, 1e-6, 10.0);
                VarTerm::Node(tape.scale(c, step_var))
            }
        };
        Ok(StepNodes { shift, var })
    }

    /// Value-only step (no tape): mean shift tensor plus per-row variance.
    pub fn step_values(
        &self,
        x: &Tensor,
        t: f64,
        dt: f64,
        step_var: f64,
        energy: &dyn Energy,
    ) -> Result<(Tensor, Vec<f64>)> {
        let temb = time_features(t);
        let mut drift = self.store.eval_mlp_split(&self.drift_net, x, &temb)?;
        if self.cfg.langevin {
            let scale_out = self
                .store
                .eval_mlp(
                    self.scale_net.as_ref().unwrap(),
                    &Tensor::row_vec(temb.clone()),
                )?
                .data[0];
            let mut sc = vec![0.0; x.cols];
            for r in 0..x.rows {
                energy.grad(x.row(r), &mut sc);
                let dr = drift.row_mut(r);
                for c in 0..x.cols {
                    let clipped = (-sc[c]).clamp(-self.cfg.lgv_clip, self.cfg.lgv_clip);
                    dr[c] += scale_out * clipped;
                }
            }
        }
        for v in drift.data.iter_mut() {
            *v = (*v).clamp(-self.cfg.gfn_clip, self.cfg.gfn_clip) * dt;
        }
        let base = step_var;
        let vars = match self.cfg.variance_mode {
            VarianceMode::Fixed => vec![base; x.rows],
            VarianceMode::LearnedStateDependent => {
                let lv = self
                    .store
                    .eval_mlp_split(self.var_net.as_ref().unwrap(), x, &temb)?;
                lv.data
                    .iter()
                    .map(|l| l.exp().clamp(1e-6, 10.0) * base)
                    .collect()
            }
        };
        Ok((drift, vars))
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }
}

/// Single-state step parameters: (mean shift u·Δt, per-step variance).
/// Errors with the offending state if the energy gradient is non-finite.
pub fn policy_step_params(
    policy: &Policy,
    backward: &BackwardProcess,
    grid: &Grid,
    x: &[f64],
    t: f64,
    energy: &dyn Energy,
) -> Result<(Vec<f64>, f64)> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::config(format!("time {t} outside [0, 1)")));
    }
    if policy.cfg.langevin {
        let mut g = vec![0.0; x.len()];
        energy.grad(x, &mut g);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "energy gradient".into(),
                state: x.to_vec(),
            });
        }
    }
    let xt = Tensor::from_vec(1, x.len(), x.to_vec());
    let (shift, vars) = policy.step_values(&xt, t, grid.dt(), backward.forward_rate(t), energy)?;
    Ok((shift.data, vars[0]))
}

// ── Gaussian log-density node builder ────────────────────────────────

/// log N(diff; 0, var·I) as a (rows, 1) node, where `diff` is the
/// (rows, d) node holding x' - x - shift.
pub fn gauss_logpdf_node(tape: &mut Tape, diff: NodeId, var: &VarTerm, d: usize) -> NodeId {
    let sq = tape.square(diff);
    let ss = tape.sum_cols(sq);
    match var {
        VarTerm::Const(v) => {
            let q = tape.scale(ss, -0.5 / v);
            tape.add_const(q, -0.5 * d as f64 * (2.0 * PI * v).ln())
        }
        VarTerm::Node(vn) => {
            let two_v = tape.scale(*vn, 2.0);
            let q = tape.div(ss, two_v);
            let lv = tape.ln(*vn);
            let half_d_lv = tape.scale(lv, 0.5 * d as f64);
            let s = tape.add(q, half_d_lv);
            let neg = tape.scale(s, -1.0);
            tape.add_const(neg, -0.5 * d as f64 * (2.0 * PI).ln())
        }
    }
}

/// Closed-form Gaussian log pdf (scalar path, used for bookkeeping checks).
pub fn gauss_logpdf(diff: &[f64], var: f64) -> f64 {
    let ss: f64 = diff.iter().map(|v| v * v).sum();
    -0.5 * diff.len() as f64 * (2.0 * PI * var).ln() - ss / (2.0 * var)
}

// ── simulation ───────────────────────────────────────────────────────

/// What the simulator records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordMode {
    /// Values only (evaluation).
    None,
    /// Tape over policy outputs at detached states (off-policy losses).
    Score,
    /// Full graph through the states (reparametrized backprop).
    Reparam,
}

/// One chunk of a simulated batch, with its own tape.
pub struct SimChunk {
    pub start: usize,
    pub rows: usize,
    pub tape: Tape,
    pub group: GroupId,
    /// States x_0..x_T (values).
    pub states: Vec<Tensor>,
    /// State nodes (Reparam only).
    pub state_nodes: Option<Vec<NodeId>>,
    /// Per-step forward log-density nodes, (rows, 1) each.
    pub pf_nodes: Vec<NodeId>,
    /// Per-step backward log-density nodes (Reparam only).
    pub pb_nodes: Vec<NodeId>,
    /// log R(x_1) node (Reparam only).
    pub reward_node: Option<NodeId>,
    /// Per-step forward log densities (values), rows × T.
    pub step_log_pf: Tensor,
    /// Per-step backward log densities (values), rows × T.
    pub step_log_pb: Tensor,
    pub log_reward: Vec<f64>,
    pub ok: Vec<bool>,
}

impl SimChunk {
    pub fn sum_log_pf(&self, r: usize) -> f64 {
        self.step_log_pf.row(r).iter().sum()
    }
    pub fn sum_log_pb(&self, r: usize) -> f64 {
        self.step_log_pb.row(r).iter().sum()
    }
    /// Node for Σ_i log p_F over steps of one chunk, (rows, 1).
    pub fn sum_pf_node(&mut self) -> NodeId {
        let mut acc = self.pf_nodes[0];
        for i in 1..self.pf_nodes.len() {
            acc = self.tape.add(acc, self.pf_nodes[i]);
        }
        acc
    }
}

/// A simulated batch: chunks plus aggregate counters.
pub struct SimBatch {
    pub chunks: Vec<SimChunk>,
    pub dim: usize,
    pub steps: usize,
    pub nan_drops: usize,
}

impl SimBatch {
    pub fn rows(&self) -> usize {
        self.chunks.iter().map(|c| c.rows).sum()
    }

    /// Terminal states stacked back into one (batch, d) tensor.
    pub fn terminal(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows(), self.dim);
        for ch in &self.chunks {
            let last = &ch.states[self.steps];
            for r in 0..ch.rows {
                out.row_mut(ch.start + r).copy_from_slice(last.row(r));
            }
        }
        out
    }

    pub fn log_rewards(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for ch in &self.chunks {
            for r in 0..ch.rows {
                out[ch.start + r] = ch.log_reward[r];
            }
        }
        out
    }

    pub fn ok_flags(&self) -> Vec<bool> {
        let mut out = vec![true; self.rows()];
        for ch in &self.chunks {
            for r in 0..ch.rows {
                out[ch.start + r] = ch.ok[r];
            }
        }
        out
    }

    /// Per-row log importance ratio pieces: log R + Σ log p_B - Σ log p_F.
    pub fn log_weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for ch in &self.chunks {
            for r in 0..ch.rows {
                out[ch.start + r] = ch.log_reward[r] + ch.sum_log_pb(r) - ch.sum_log_pf(r);
            }
        }
        out
    }
}

/// Simulate `batch` forward trajectories. Sampling uses variance
/// (policy variance + exploration_std²) while log p_F is recorded under
/// the unperturbed policy. Non-finite rows are flagged, zero-filled to
/// keep the tape clean, and excluded from losses by the `ok` mask.
#[allow(clippy::too_many_arguments)]
pub fn simulate_forward(
    policy: &Policy,
    backward: &BackwardProcess,
    energy: &Arc<dyn Energy>,
    grid: &Grid,
    batch: usize,
    noise: &Tensor,
    exploration_std: f64,
    record: RecordMode,
    mode: Parallelism,
) -> Result<SimBatch> {
    let d = policy.cfg.dim;
    let t_steps = grid.steps;
    if exploration_std < 0.0 {
        return Err(Error::config("exploration_std must be >= 0"));
    }
    if record == RecordMode::Reparam && exploration_std != 0.0 {
        return Err(Error::config(
            "reparametrized simulation must be on-policy (exploration_std = 0)",
        ));
    }
    if noise.rows != t_steps * batch || noise.cols != d {
        return Err(Error::shape(format!(
            "noise must be ({} x {}), got ({} x {})",
            t_steps * batch,
            d,
            noise.rows,
            noise.cols
        )));
    }
    let ranges = exec::chunk_ranges(batch);
    let chunks: Vec<Result<SimChunk>> = exec::map_indexed(mode, ranges.len(), |ci| {
        let (start, end) = ranges[ci];
        simulate_chunk(
            policy,
            backward,
            energy,
            grid,
            batch,
            noise,
            exploration_std,
            record,
            start,
            end,
        )
    });
    let mut out = Vec::with_capacity(chunks.len());
    let mut nan_drops = 0;
    for ch in chunks {
        let ch = ch?;
        nan_drops += ch.ok.iter().filter(|&&o| !o).count();
        out.push(ch);
    }
    Ok(SimBatch {
        chunks: out,
        dim: d,
        steps: t_steps,
        nan_drops,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_chunk(
    policy: &Policy,
    backward: &BackwardProcess,
    energy: &Arc<dyn Energy>,
    grid: &Grid,
    batch: usize,
    noise: &Tensor,
    exploration_std: f64,
    record: RecordMode,
    start: usize,
    end: usize,
) -> Result<SimChunk> {
    let rows = end - start;
    let d = policy.cfg.dim;
    let t_steps = grid.steps;
    let dt = grid.dt();
    let reparam = record == RecordMode::Reparam;
    let mut tape = Tape::new();
    let group = tape.register(&policy.store);

    let mut states: Vec<Tensor> = Vec::with_capacity(t_steps + 1);
    let mut state_nodes: Vec<NodeId> = Vec::with_capacity(t_steps + 1);
    let mut pf_nodes: Vec<NodeId> = Vec::with_capacity(t_steps);
    let mut step_log_pf = Tensor::zeros(rows, t_steps);
    let mut ok = vec![true; rows];

    let x0 = Tensor::zeros(rows, d);
    states.push(x0.clone());
    if record != RecordMode::None {
        state_nodes.push(tape.constant(x0));
    }

    for i in 0..t_steps {
        let t = grid.time(i);
        let step_var = backward.forward_step_variance(grid, i);
        let x_vals = states[i].clone();

        if record == RecordMode::None {
            let (shift, vars) = policy.step_values(&x_vals, t, dt, step_var, energy.as_ref())?;
            let mut next = Tensor::zeros(rows, d);
            for r in 0..rows {
                let z = noise.row(i * batch + start + r);
                let std = (vars[r] + exploration_std * exploration_std).sqrt();
                let mut bad = !vars[r].is_finite() || vars[r] <= 0.0;
                for c in 0..d {
                    let v = x_vals.at(r, c) + shift.at(r, c) + std * z[c];
                    if !v.is_finite() {
                        bad = true;
                    }
                    next.row_mut(r)[c] = v;
                }
                if bad {
                    ok[r] = false;
                    next.row_mut(r).fill(0.0);
                } else {
                    let mut diff = vec![0.0; d];
                    for c in 0..d {
                        diff[c] = next.at(r, c) - x_vals.at(r, c) - shift.at(r, c);
                    }
                    step_log_pf.data[r * t_steps + i] = gauss_logpdf(&diff, vars[r]);
                }
            }
            states.push(next);
            continue;
        }

        let x_node = state_nodes[i];
        let step =
            policy.step_on_tape(&mut tape, group, x_node, t, dt, step_var, energy, reparam)?;
        // flag and sanitize rows whose drift or variance went non-finite
        let mut vars = vec![0.0; rows];
        {
            let sv = tape.value(step.shift);
            for r in 0..rows {
                if !sv.row(r).iter().all(|v| v.is_finite()) {
                    ok[r] = false;
                }
            }
            match &step.var {
                VarTerm::Const(v) => vars.fill(*v),
                VarTerm::Node(id) => {
                    let vv = tape.value(*id);
                    for r in 0..rows {
                        vars[r] = vv.data[r];
                        if !vars[r].is_finite() || vars[r] <= 0.0 {
                            ok[r] = false;
                        }
                    }
                }
            }
        }
        for r in 0..rows {
            if !ok[r] {
                tape.sanitize_row(step.shift, r, 0.0);
                if let VarTerm::Node(id) = step.var {
                    tape.sanitize_row(id, r, step_var);
                    vars[r] = step_var;
                }
            }
        }

        // draw the next state
        let mut z = Tensor::zeros(rows, d);
        for r in 0..rows {
            z.row_mut(r)
                .copy_from_slice(noise.row(i * batch + start + r));
        }
        let shift_vals = tape.value(step.shift).clone();

        let (next_node, next_vals, diff_node) = if reparam {
            // x' = x + shift + sqrt(var)·z as graph nodes
            let noise_term = match &step.var {
                VarTerm::Const(v) => {
                    let mut nt = z.clone();
                    for val in nt.data.iter_mut() {
                        *val *= v.sqrt();
                    }
                    tape.constant(nt)
                }
                VarTerm::Node(id) => {
                    let std = tape.sqrt(*id);
                    let zn = tape.constant(z.clone());
                    tape.mul(zn, std)
                }
            };
            let moved = tape.add(x_node, step.shift);
            let next = tape.add(moved, noise_term);
            for r in 0..rows {
                if !tape.value(next).row(r).iter().all(|v| v.is_finite()) {
                    ok[r] = false;
                }
            }
            for r in 0..rows {
                if !ok[r] {
                    tape.sanitize_row(next, r, 0.0);
                }
            }
            let d1 = tape.sub(next, x_node);
            let diff = tape.sub(d1, step.shift);
            let vals = tape.value(next).clone();
            (Some(next), vals, diff)
        } else {
            let mut next = Tensor::zeros(rows, d);
            for r in 0..rows {
                let std = (vars[r] + exploration_std * exploration_std).sqrt();
                let mut bad = !ok[r];
                for c in 0..d {
                    let v = x_vals.at(r, c) + shift_vals.at(r, c) + std * z.at(r, c);
                    if !v.is_finite() {
                        bad = true;
                    }
                    next.row_mut(r)[c] = v;
                }
                if bad {
                    ok[r] = false;
                    next.row_mut(r).fill(0.0);
                }
            }
            // delta = x' - x enters as a constant; the shift node carries grads
            let mut delta = Tensor::zeros(rows, d);
            for r in 0..rows {
                for c in 0..d {
                    delta.row_mut(r)[c] = next.at(r, c) - x_vals.at(r, c);
                }
            }
            let delta_node = tape.constant(delta);
            let diff = tape.sub(delta_node, step.shift);
            let next_node = tape.constant(next.clone());
            (Some(next_node), next, diff)
        };

        let pf = gauss_logpdf_node(&mut tape, diff_node, &step.var, d);
        {
            let pv = tape.value(pf);
            for r in 0..rows {
                step_log_pf.data[r * t_steps + i] = pv.data[r];
            }
        }
        pf_nodes.push(pf);
        state_nodes.push(next_node.unwrap());
        states.push(next_vals);
    }

    // terminal reward
    let last = &states[t_steps];
    let mut log_reward = vec![0.0; rows];
    for r in 0..rows {
        let lr = -energy.energy(last.row(r));
        if !lr.is_finite() {
            ok[r] = false;
        }
        log_reward[r] = lr;
    }

    // backward log densities
    let step_log_pb = backward_step_log_density(backward, grid, &states);
    let mut pb_nodes = Vec::new();
    let mut reward_node = None;
    if reparam {
        for i in 2..=t_steps {
            let (coef, var) = backward.step_params(grid, i);
            let scaled = tape.scale(state_nodes[i], coef);
            let diff = tape.sub(state_nodes[i - 1], scaled);
            pb_nodes.push(gauss_logpdf_node(&mut tape, diff, &VarTerm::Const(var), d));
        }
        let e = tape.energy_value(state_nodes[t_steps], energy.as_ref());
        reward_node = Some(tape.scale(e, -1.0));
    }

    Ok(SimChunk {
        start,
        rows,
        tape,
        group,
        states,
        state_nodes: if record == RecordMode::None {
            None
        } else {
            Some(state_nodes)
        },
        pf_nodes,
        pb_nodes,
        reward_node,
        step_log_pf,
        step_log_pb,
        log_reward,
        ok,
    })
}

/// Score existing trajectories under the current policy: build per-step
/// log p_F nodes at the (detached) recorded states. Used for replayed
/// backward trajectories; rewards come from the caller (stored values,
/// no re-evaluation).
#[allow(clippy::too_many_arguments)]
pub fn score_trajectories(
    policy: &Policy,
    backward: &BackwardProcess,
    energy: &Arc<dyn Energy>,
    grid: &Grid,
    states: &[Tensor],
    step_log_pb: &Tensor,
    log_reward: &[f64],
    mode: Parallelism,
) -> Result<SimBatch> {
    let d = policy.cfg.dim;
    let t_steps = grid.steps;
    if states.len() != t_steps + 1 {
        return Err(Error::shape(format!(
            "expected {} states, got {}",
            t_steps + 1,
            states.len()
        )));
    }
    let batch = states[0].rows;
    let ranges = exec::chunk_ranges(batch);
    let chunks: Vec<Result<SimChunk>> = exec::map_indexed(mode, ranges.len(), |ci| {
        let (start, end) = ranges[ci];
        let rows = end - start;
        let dt = grid.dt();
        let mut tape = Tape::new();
        let group = tape.register(&policy.store);
        let mut ok = vec![true; rows];
        let mut chunk_states = Vec::with_capacity(t_steps + 1);
        let mut state_nodes = Vec::with_capacity(t_steps + 1);
        for s in states {
            let sl = s.slice_rows(start, end);
            for r in 0..rows {
                if !sl.row(r).iter().all(|v| v.is_finite()) {
                    ok[r] = false;
                }
            }
            state_nodes.push(tape.constant(sl.clone()));
            chunk_states.push(sl);
        }
        let mut pf_nodes = Vec::with_capacity(t_steps);
        let mut step_log_pf = Tensor::zeros(rows, t_steps);
        for i in 0..t_steps {
            let t = grid.time(i);
            let step_var = backward.forward_step_variance(grid, i);
            let step = policy.step_on_tape(
                &mut tape,
                group,
                state_nodes[i],
                t,
                dt,
                step_var,
                energy,
                false,
            )?;
            for r in 0..rows {
                let bad = !tape.value(step.shift).row(r).iter().all(|v| v.is_finite());
                if bad {
                    ok[r] = false;
                    tape.sanitize_row(step.shift, r, 0.0);
                }
                if let VarTerm::Node(id) = step.var {
                    let v = tape.value(id).data[r];
                    if !v.is_finite() || v <= 0.0 {
                        ok[r] = false;
                        tape.sanitize_row(id, r, step_var);
                    }
                }
            }
            let mut delta = Tensor::zeros(rows, d);
            for r in 0..rows {
                for c in 0..d {
                    delta.row_mut(r)[c] = chunk_states[i + 1].at(r, c) - chunk_states[i].at(r, c);
                }
            }
            let delta_node = tape.constant(delta);
            let diff = tape.sub(delta_node, step.shift);
            let pf = gauss_logpdf_node(&mut tape, diff, &step.var, d);
            let pv = tape.value(pf);
            for r in 0..rows {
                step_log_pf.data[r * t_steps + i] = pv.data[r];
            }
            pf_nodes.push(pf);
        }
        let mut chunk_pb = Tensor::zeros(rows, t_steps);
        let mut chunk_reward = vec![0.0; rows];
        for r in 0..rows {
            for i in 0..t_steps {
                chunk_pb.data[r * t_steps + i] = step_log_pb.at(start + r, i);
            }
            chunk_reward[r] = log_reward[start + r];
            if !chunk_reward[r].is_finite() {
                ok[r] = false;
            }
        }
        Ok(SimChunk {
            start,
            rows,
            tape,
            group,
            states: chunk_states,
            state_nodes: Some(state_nodes),
            pf_nodes,
            pb_nodes: Vec::new(),
            reward_node: None,
            step_log_pf,
            step_log_pb: chunk_pb,
            log_reward: chunk_reward,
            ok,
        })
    });
    let mut out = Vec::with_capacity(chunks.len());
    let mut nan_drops = 0;
    for ch in chunks {
        let ch = ch?;
        nan_drops += ch.ok.iter().filter(|&&o| !o).count();
        out.push(ch);
    }
    Ok(SimBatch {
        chunks: out,
        dim: d,
        steps: t_steps,
        nan_drops,
    })
}

/// Ancestral backward sampling x_1 → x_{1-Δt} → … → x_0 = 0 for a batch of
/// terminal states, recording per-step backward log densities.
pub struct BackwardBatch {
    /// states[i] holds the rows at time i/T; states[0] is exactly zero.
    pub states: Vec<Tensor>,
    pub step_log_pb: Tensor,
    pub sum_log_pb: Vec<f64>,
}

pub fn sample_backward(
    process: &BackwardProcess,
    grid: &Grid,
    x1: &Tensor,
    noise: &Tensor,
) -> Result<BackwardBatch> {
    let (n, d) = (x1.rows, x1.cols);
    let t_steps = grid.steps;
    if !x1.all_finite() {
        return Err(Error::config("terminal states must be finite"));
    }
    if noise.rows != t_steps * n || noise.cols != d {
        return Err(Error::shape("backward noise shape mismatch"));
    }
    let mut states: Vec<Tensor> = vec![Tensor::zeros(0, 0); t_steps + 1];
    states[t_steps] = x1.clone();
    let mut step_log_pb = Tensor::zeros(n, t_steps);
    for i in (2..=t_steps).rev() {
        let (coef, var) = process.step_params(grid, i);
        let sd = var.sqrt();
        let norm = -0.5 * d as f64 * (2.0 * PI * var).ln();
        let cur = states[i].clone();
        let mut prev = Tensor::zeros(n, d);
        for r in 0..n {
            let z = noise.row((i - 1) * n + r);
            let mut ss = 0.0;
            for c in 0..d {
                let eps = sd * z[c];
                prev.row_mut(r)[c] = coef * cur.at(r, c) + eps;
                ss += eps * eps;
            }
            step_log_pb.data[r * t_steps + (i - 1)] = norm - ss / (2.0 * var);
        }
        states[i - 1] = prev;
    }
    states[0] = Tensor::zeros(n, d); // point mass at the origin
    let sum_log_pb = (0..n).map(|r| step_log_pb.row(r).iter().sum()).collect();
    Ok(BackwardBatch {
        states,
        step_log_pb,
        sum_log_pb,
    })
}

/// Evaluation rollout: no tape, just the per-row log weight pieces.
pub struct EvalRollout {
    pub terminal: Tensor,
    pub sum_log_pf: Vec<f64>,
    pub sum_log_pb: Vec<f64>,
    pub log_reward: Vec<f64>,
    pub ok: Vec<bool>,
}

pub fn simulate_eval(
    policy: &Policy,
    backward: &BackwardProcess,
    energy: &Arc<dyn Energy>,
    grid: &Grid,
    batch: usize,
    noise: &Tensor,
    mode: Parallelism,
) -> Result<EvalRollout> {
    let sim = simulate_forward(
        policy,
        backward,
        energy,
        grid,
        batch,
        noise,
        0.0,
        RecordMode::None,
        mode,
    )?;
    let mut out = EvalRollout {
        terminal: sim.terminal(),
        sum_log_pf: vec![0.0; batch],
        sum_log_pb: vec![0.0; batch],
        log_reward: sim.log_rewards(),
        ok: sim.ok_flags(),
    };
    for ch in &sim.chunks {
        for r in 0..ch.rows {
            out.sum_log_pf[ch.start + r] = ch.sum_log_pf(r);
            out.sum_log_pb[ch.start + r] = ch.sum_log_pb(r);
        }
    }
    Ok(out)
}
