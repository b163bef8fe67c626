//! Evaluation metrics: variational and importance-weighted log-partition
//! bounds, exact-assignment squared 2-Wasserstein distance, and
//! mode-coverage diagnostics.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::dynamics::{simulate_eval, BackwardProcess, Grid, Policy};
use crate::energies::Energy;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::linalg::Tensor;
use crate::rngs::normal_tensor;
use crate::stats::logsumexp;

/// One evaluation record.
#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub log_z_hat: f64,
    pub log_z_rw: f64,
    pub w2_sq: Option<f64>,
    pub mode_count: Option<usize>,
    /// Trajectories used by the estimators.
    pub k: usize,
}

impl MetricRecord {
    /// Build both estimators from one batch of log weights; the Jensen
    /// ordering log_z_hat ≤ log_z_rw then holds by construction.
    pub fn from_weights(ell: &[f64], w2_sq: Option<f64>, mode_count: Option<usize>) -> Self {
        let (log_z_hat, log_z_rw) = log_z_from_weights(ell);
        MetricRecord {
            log_z_hat,
            log_z_rw,
            w2_sq,
            mode_count,
            k: ell.len(),
        }
    }
}

/// Both log-partition estimators from per-trajectory log weights
/// ℓ_i = log R + Σ log p_B − Σ log p_F: (mean, logsumexp − log K).
pub fn log_z_from_weights(ell: &[f64]) -> (f64, f64) {
    let lb = crate::stats::mean(ell);
    let rw = logsumexp(ell) - (ell.len() as f64).ln();
    (lb, rw)
}

/// K-trajectory rollout under the pure policy (no exploration noise)
/// returning terminal samples and both estimators.
pub fn log_z_estimates(
    policy: &Policy,
    backward: &BackwardProcess,
    energy: &Arc<dyn Energy>,
    grid: &Grid,
    k: usize,
    rng: &mut ChaCha8Rng,
    mode: Parallelism,
) -> Result<(f64, f64, Tensor)> {
    if k == 0 {
        return Err(Error::config("need at least one evaluation trajectory"));
    }
    let noise = normal_tensor(rng, grid.steps * k, policy.cfg.dim);
    let roll = simulate_eval(policy, backward, energy, grid, k, &noise, mode)?;
    let ell: Vec<f64> = (0..k)
        .filter(|&r| roll.ok[r])
        .map(|r| roll.log_reward[r] + roll.sum_log_pb[r] - roll.sum_log_pf[r])
        .collect();
    if ell.is_empty() {
        return Err(Error::config("every evaluation trajectory was non-finite"));
    }
    let (lb, rw) = log_z_from_weights(&ell);
    Ok((lb, rw, roll.terminal))
}

/// Variational lower bound: mean over K on-policy trajectories of
/// log R + Σ log p_B − Σ log p_F.
pub fn log_z_lower_bound(
    policy: &Policy,
    backward: &BackwardProcess,
    energy: &Arc<dyn Energy>,
    grid: &Grid,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    log_z_estimates(policy, backward, energy, grid, k, rng, Parallelism::auto()).map(|r| r.0)
}

/// Importance-weighted bound: logsumexp of the same weights minus log K.
pub fn log_z_rw(
    policy: &Policy,
    backward: &BackwardProcess,
    energy: &Arc<dyn Energy>,
    grid: &Grid,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    log_z_estimates(policy, backward, energy, grid, k, rng, Parallelism::auto()).map(|r| r.1)
}

/// Cap on the exact-assignment solver (worst-case cubic cost).
pub const W2_MAX_SAMPLES: usize = 2048;

/// Exact squared 2-Wasserstein distance between two equal-size point sets:
/// min over permutations of (1/n) Σ ‖a_i − b_{π(i)}‖², by shortest
/// augmenting paths over the squared-distance cost matrix.
pub fn wasserstein2_sq(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape(format!(
            "sample sets must match: ({} x {}) vs ({} x {})",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = a.rows;
    if n == 0 {
        return Err(Error::shape("empty sample sets"));
    }
    if n > W2_MAX_SAMPLES {
        return Err(Error::config(format!(
            "sample count {n} exceeds the cap {W2_MAX_SAMPLES}"
        )));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..n {
            let br = b.row(j);
            let mut s = 0.0;
            for c in 0..a.cols {
                let d = ar[c] - br[c];
                s += d * d;
            }
            cost[i * n + j] = s;
        }
    }
    let (_, total) = assignment_min_cost(&cost, n);
    Ok(total / n as f64)
}

/// Minimum-cost perfect matching on an n×n cost matrix (row-major).
/// Hungarian algorithm with potentials, O(n³). Returns (row→col, total).
pub fn assignment_min_cost(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // row matched to column j (1-based; 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
            total += cost[(p[j] - 1) * n + (j - 1)];
        }
    }
    (row_to_col, total)
}

/// Number of centers with at least one sample within `radius` (Euclidean).
pub fn mode_coverage(samples: &Tensor, centers: &[Vec<f64>], radius: f64) -> usize {
    let r2 = radius * radius;
    centers
        .iter()
        .filter(|c| {
            (0..samples.rows).any(|i| {
                let row = samples.row(i);
                let mut s = 0.0;
                for (a, b) in row.iter().zip(c.iter()) {
                    s += (a - b) * (a - b);
                }
                s <= r2
            })
        })
        .count()
}
