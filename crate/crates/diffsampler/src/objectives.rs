//! Training objectives over simulated trajectory batches.
//!
//! Off-policy losses (TB, VarGrad, SubTB) score the policy at detached
//! states: gradients reach the parameters only through the recorded
//! log p_F terms (and flow evaluations), never through the simulation
//! noise. The PIS reverse-KL objective differentiates through the whole
//! simulation via the reparametrized tape.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::dynamics::{time_features, SimBatch, TIME_FEATURES};
use crate::energies::Energy;
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::ndgrad::{Activation, MlpHandle, NodeId, ParamBuilder, ParamStore, ScalarHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Tb,
    VarGrad,
    SubTb,
    Pis,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Tb => "tb",
            Objective::VarGrad => "vargrad",
            Objective::SubTb => "subtb",
            Objective::Pis => "pis",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tb" => Ok(Objective::Tb),
            "vargrad" => Ok(Objective::VarGrad),
            "subtb" => Ok(Objective::SubTb),
            "pis" => Ok(Objective::Pis),
            other => Err(Error::config(format!(
                "unknown objective '{other}' (expected tb|vargrad|subtb|pis)"
            ))),
        }
    }
}

/// Loss value plus flat gradients per parameter group.
pub struct LossResult {
    pub loss: f64,
    pub policy_grad: Vec<f64>,
    /// log Z_θ gradient (TB) or flow-store gradient (SubTB).
    pub aux_grad: Option<Vec<f64>>,
    /// Rows that entered the loss after the non-finite mask.
    pub used_rows: usize,
}

// ── value-level reference forms (shared by tests and metrics) ────────

/// TB residual: log Z_θ + Σ log p_F − log R − Σ log p_B.
pub fn tb_residual(log_z: f64, sum_log_pf: f64, log_reward: f64, sum_log_pb: f64) -> f64 {
    log_z + sum_log_pf - log_reward - sum_log_pb
}

/// Mean squared TB residual over (Σ log p_F, log R, Σ log p_B) triples.
pub fn tb_loss_from_parts(log_z: f64, parts: &[(f64, f64, f64)]) -> f64 {
    let n = parts.len() as f64;
    parts
        .iter()
        .map(|&(pf, r, pb)| tb_residual(log_z, pf, r, pb).powi(2))
        .sum::<f64>()
        / n
}

/// Population variance of the per-trajectory log-ratios.
pub fn vargrad_loss_from_parts(ell: &[f64]) -> Result<f64> {
    if ell.len() < 2 {
        return Err(Error::config(
            "vargrad needs a batch of at least 2 trajectories",
        ));
    }
    Ok(crate::stats::variance(ell))
}

// ── trajectory balance ───────────────────────────────────────────────

/// Learnable log-partition estimate (its own optimizer group).
pub struct LogZEstimate {
    pub store: ParamStore,
    pub handle: ScalarHandle,
}

impl LogZEstimate {
    pub fn new(init: f64) -> Self {
        let mut b = ParamBuilder::new();
        let handle = b.scalar(init);
        LogZEstimate {
            store: b.finish(),
            handle,
        }
    }

    pub fn value(&self) -> f64 {
        self.store.scalar(self.handle)
    }
}

fn mask_tensor(ok: &[bool]) -> (Tensor, usize) {
    let used = ok.iter().filter(|&&o| o).count();
    let mask = Tensor::col_vec(ok.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect());
    (mask, used)
}

fn require_used(used: usize) -> Result<()> {
    if used == 0 {
        return Err(Error::config(
            "every trajectory in the batch was dropped as non-finite",
        ));
    }
    Ok(())
}

fn add_into(acc: &mut Option<Vec<f64>>, grads: &[f64]) {
    match acc.as_mut() {
        Some(a) => {
            for (x, y) in a.iter_mut().zip(grads.iter()) {
                *x += y;
            }
        }
        None => *acc = Some(grads.to_vec()),
    }
}

/// Mean over the batch of squared TB residuals; gradients flow to the
/// policy parameters and log Z_θ.
pub fn tb_loss(sim: &mut SimBatch, log_z: &LogZEstimate) -> Result<LossResult> {
    let mut outs = Vec::with_capacity(sim.chunks.len());
    for ch in sim.chunks.iter_mut() {
        let logz_group = ch.tape.register(&log_z.store);
        let s = ch.sum_pf_node();
        let consts: Vec<f64> = (0..ch.rows)
            .map(|r| -(ch.log_reward[r] + ch.sum_log_pb(r)))
            .collect();
        let cnode = ch.tape.constant(Tensor::col_vec(consts));
        let zn = ch.tape.param_scalar(logz_group, log_z.handle);
        let pf_part = ch.tape.add(s, cnode);
        let resid = ch.tape.add(pf_part, zn);
        let sq = ch.tape.square(resid);
        let (mask, used) = mask_tensor(&ch.ok);
        let mnode = ch.tape.constant(mask);
        let masked = ch.tape.mul(sq, mnode);
        let loss_node = ch.tape.sum_all(masked);
        let sum = ch.tape.value(loss_node).data[0];
        outs.push((loss_node, logz_group, sum, used));
    }
    let used: usize = outs.iter().map(|o| o.3).sum();
    require_used(used)?;
    let seed = 1.0 / used as f64;
    let mut policy_grad = None;
    let mut logz_grad = vec![0.0];
    let mut total = 0.0;
    for (ch, (loss_node, logz_group, sum, _)) in sim.chunks.iter_mut().zip(outs) {
        total += sum;
        let grads = ch.tape.backward(&[(loss_node, Tensor::scalar(seed))])?;
        add_into(&mut policy_grad, grads.group(ch.group));
        logz_grad[0] += grads.group(logz_group)[0];
    }
    Ok(LossResult {
        loss: total * seed,
        policy_grad: policy_grad.unwrap_or_default(),
        aux_grad: Some(logz_grad),
        used_rows: used,
    })
}

// ── VarGrad ──────────────────────────────────────────────────────────

/// Population variance over the batch of ℓ_i = Σ log p_F − log R − Σ log p_B,
/// with the batch mean treated as a constant.
pub fn vargrad_loss(sim: &mut SimBatch) -> Result<LossResult> {
    if sim.rows() < 2 {
        return Err(Error::config(
            "vargrad needs a batch of at least 2 trajectories",
        ));
    }
    // phase 1: ℓ nodes and their values across all chunks
    let mut ell_nodes = Vec::with_capacity(sim.chunks.len());
    let mut sum_ell = 0.0;
    let mut used = 0usize;
    for ch in sim.chunks.iter_mut() {
        let s = ch.sum_pf_node();
        let consts: Vec<f64> = (0..ch.rows)
            .map(|r| -(ch.log_reward[r] + ch.sum_log_pb(r)))
            .collect();
        let cnode = ch.tape.constant(Tensor::col_vec(consts));
        let ell = ch.tape.add(s, cnode);
        for r in 0..ch.rows {
            if ch.ok[r] {
                sum_ell += ch.tape.value(ell).data[r];
                used += 1;
            }
        }
        ell_nodes.push(ell);
    }
    require_used(used)?;
    if used < 2 {
        return Err(Error::config(
            "vargrad needs at least 2 usable trajectories",
        ));
    }
    let center = sum_ell / used as f64; // detached batch mean
    let seed = 1.0 / used as f64;
    let mut policy_grad = None;
    let mut total = 0.0;
    for (ch, ell) in sim.chunks.iter_mut().zip(ell_nodes) {
        let centered = ch.tape.add_const(ell, -center);
        let sq = ch.tape.square(centered);
        let (mask, _) = mask_tensor(&ch.ok);
        let mnode = ch.tape.constant(mask);
        let masked = ch.tape.mul(sq, mnode);
        let loss_node = ch.tape.sum_all(masked);
        total += ch.tape.value(loss_node).data[0];
        let grads = ch.tape.backward(&[(loss_node, Tensor::scalar(seed))])?;
        add_into(&mut policy_grad, grads.group(ch.group));
    }
    Ok(LossResult {
        loss: total * seed,
        policy_grad: policy_grad.unwrap_or_default(),
        aux_grad: None,
        used_rows: used,
    })
}

// ── forward-looking flow and SubTB ───────────────────────────────────

/// State-flow model log f(x, t): a network head plus an optional
/// forward-looking bias interpolating between a Brownian reference
/// density and the terminal reward. log f(x_0) is a learnable scalar and
/// log f at t = 1 is pinned to log R.
pub struct FlowModel {
    pub store: ParamStore,
    pub net: MlpHandle,
    pub logf0: ScalarHandle,
    pub fl_bias: bool,
    pub sigma2: f64,
}

impl FlowModel {
    pub fn new(
        dim: usize,
        hidden: usize,
        fl_bias: bool,
        sigma2: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut b = ParamBuilder::new();
        let net = b.mlp(
            &[dim + TIME_FEATURES, hidden, hidden, 1],
            Activation::Gelu,
            true,
            rng,
        )?;
        let logf0 = b.scalar(0.0);
        Ok(FlowModel {
            store: b.finish(),
            net,
            logf0,
            fl_bias,
            sigma2,
        })
    }

    pub fn log_f0(&self) -> f64 {
        self.store.scalar(self.logf0)
    }

    /// Constant part of log f at interior times:
    /// (1-t)·log N(x; 0, σ²t I) + t·log R(x) when the bias is enabled.
    fn bias_value(&self, energy: &dyn Energy, x: &[f64], t: f64) -> f64 {
        if !self.fl_bias {
            return 0.0;
        }
        let d = x.len() as f64;
        let var = self.sigma2 * t;
        let ss: f64 = x.iter().map(|v| v * v).sum();
        let log_ref = -0.5 * d * (2.0 * PI * var).ln() - ss / (2.0 * var);
        (1.0 - t) * log_ref + t * energy.log_reward(x)
    }
}

/// log f(x, t) for 0 < t < 1 (the endpoints are fixed by convention in
/// the loss: a learnable scalar at t = 0 and log R at t = 1).
pub fn fl_log_flow(flow: &FlowModel, energy: &dyn Energy, x: &[f64], t: f64) -> Result<f64> {
    if !(0.0 < t && t < 1.0) {
        return Err(Error::config(format!(
            "fl_log_flow time {t} outside (0, 1)"
        )));
    }
    let xt = Tensor::from_vec(1, x.len(), x.to_vec());
    let nn = flow
        .store
        .eval_mlp_split(&flow.net, &xt, &time_features(t))?
        .data[0];
    Ok(flow.bias_value(energy, x, t) + nn)
}

/// Geometrically weighted subtrajectory-balance loss: for every pair
/// m < n, A(m,n) = log f(x_m) + Σ log p_F − log f(x_n) − Σ log p_B over
/// the (m,n) window; loss = Σ λ^{n-m} A² / Σ λ^{n-m}, averaged over rows.
pub fn subtb_loss(
    sim: &mut SimBatch,
    flow: &FlowModel,
    energy: &Arc<dyn Energy>,
    lambda: f64,
) -> Result<LossResult> {
    if lambda <= 0.0 {
        return Err(Error::config("subtb lambda must be positive"));
    }
    let t_steps = sim.steps;
    let mut weight_total = 0.0;
    for m in 0..t_steps {
        for n in (m + 1)..=t_steps {
            weight_total += lambda.powi((n - m) as i32);
        }
    }

    let mut outs = Vec::with_capacity(sim.chunks.len());
    for ch in sim.chunks.iter_mut() {
        let state_nodes = ch
            .state_nodes
            .as_ref()
            .ok_or_else(|| Error::config("subtb needs recorded trajectories"))?
            .clone();
        let flow_group = ch.tape.register(&flow.store);
        let (mask, used) = mask_tensor(&ch.ok);
        let ones = ch.tape.constant(Tensor::col_vec(vec![1.0; ch.rows]));

        // G[j] = log f(x_j) - Σ_{i<j} (log pF_i - log pB_i); every A(m,n)
        // equals G[m] - G[n], so the O(T²) residuals need O(T) bookkeeping.
        let mut g_nodes: Vec<NodeId> = Vec::with_capacity(t_steps + 1);
        let f0 = ch.tape.param_scalar(flow_group, flow.logf0);
        g_nodes.push(ch.tape.mul(ones, f0));
        let mut prefix: Option<NodeId> = None;
        for j in 1..=t_steps {
            let pb_col: Vec<f64> = (0..ch.rows).map(|r| ch.step_log_pb.at(r, j - 1)).collect();
            let pb_node = ch.tape.constant(Tensor::col_vec(pb_col));
            let delta = ch.tape.sub(ch.pf_nodes[j - 1], pb_node);
            let f = match prefix {
                Some(p) => ch.tape.add(p, delta),
                None => delta,
            };
            prefix = Some(f);
            let t = j as f64 / t_steps as f64;
            let logf = if j == t_steps {
                ch.tape.constant(Tensor::col_vec(ch.log_reward.clone()))
            } else {
                let bias: Vec<f64> = (0..ch.rows)
                    .map(|r| flow.bias_value(energy.as_ref(), ch.states[j].row(r), t))
                    .collect();
                let nn =
                    ch.tape
                        .mlp_split(flow_group, &flow.net, state_nodes[j], &time_features(t))?;
                let bnode = ch.tape.constant(Tensor::col_vec(bias));
                ch.tape.add(nn, bnode)
            };
            g_nodes.push(ch.tape.sub(logf, f));
        }

        let mnode = ch.tape.constant(mask);
        let mut acc: Option<NodeId> = None;
        for m in 0..t_steps {
            for n in (m + 1)..=t_steps {
                let a = ch.tape.sub(g_nodes[m], g_nodes[n]);
                let sq = ch.tape.square(a);
                let masked = ch.tape.mul(sq, mnode);
                let s = ch.tape.sum_all(masked);
                let w = ch.tape.scale(s, lambda.powi((n - m) as i32));
                acc = Some(match acc {
                    Some(prev) => ch.tape.add(prev, w),
                    None => w,
                });
            }
        }
        let loss_node = acc.expect("at least one subtrajectory window");
        let sum = ch.tape.value(loss_node).data[0];
        outs.push((loss_node, flow_group, sum, used));
    }
    let used: usize = outs.iter().map(|o| o.3).sum();
    require_used(used)?;
    let seed = 1.0 / (weight_total * used as f64);
    let mut policy_grad = None;
    let mut flow_grad = vec![0.0; flow.store.len()];
    let mut total = 0.0;
    for (ch, (loss_node, flow_group, sum, _)) in sim.chunks.iter_mut().zip(outs) {
        total += sum;
        let grads = ch.tape.backward(&[(loss_node, Tensor::scalar(seed))])?;
        add_into(&mut policy_grad, grads.group(ch.group));
        for (a, b) in flow_grad.iter_mut().zip(grads.group(flow_group)) {
            *a += b;
        }
    }
    Ok(LossResult {
        loss: total * seed,
        policy_grad: policy_grad.unwrap_or_default(),
        aux_grad: Some(flow_grad),
        used_rows: used,
    })
}

// ── PIS reverse KL ───────────────────────────────────────────────────

/// Mean of Σ log p_F − log R − Σ log p_B with gradients through the whole
/// simulation (reparametrization). Requires a batch simulated with
/// `RecordMode::Reparam` (which enforces zero exploration noise).
pub fn pis_kl_loss(sim: &mut SimBatch) -> Result<LossResult> {
    let mut outs = Vec::with_capacity(sim.chunks.len());
    for ch in sim.chunks.iter_mut() {
        let reward = ch
            .reward_node
            .ok_or_else(|| Error::config("pis loss needs a reparametrized (taped) simulation"))?;
        let s = ch.sum_pf_node();
        let minus_r = ch.tape.sub(s, reward);
        let pb_nodes = ch.pb_nodes.clone();
        let ell = match pb_nodes.split_first() {
            Some((&first, rest)) => {
                let mut pb = first;
                for &n in rest {
                    pb = ch.tape.add(pb, n);
                }
                ch.tape.sub(minus_r, pb)
            }
            None => minus_r, // T = 1: the single backward factor is a point mass
        };
        let (mask, used) = mask_tensor(&ch.ok);
        let mnode = ch.tape.constant(mask);
        let masked = ch.tape.mul(ell, mnode);
        let loss_node = ch.tape.sum_all(masked);
        let sum = ch.tape.value(loss_node).data[0];
        outs.push((loss_node, sum, used));
    }
    let used: usize = outs.iter().map(|o| o.2).sum();
    require_used(used)?;
    let seed = 1.0 / used as f64;
    let mut policy_grad = None;
    let mut total = 0.0;
    for (ch, (loss_node, sum, _)) in sim.chunks.iter_mut().zip(outs) {
        total += sum;
        let grads = ch.tape.backward(&[(loss_node, Tensor::scalar(seed))])?;
        add_into(&mut policy_grad, grads.group(ch.group));
    }
    Ok(LossResult {
        loss: total * seed,
        policy_grad: policy_grad.unwrap_or_default(),
        aux_grad: None,
        used_rows: used,
    })
}
