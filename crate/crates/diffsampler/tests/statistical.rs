//! Statistical agreement checks that need many batches: the TB/VarGrad
//! gradient direction identity and the PIS zero-gradient sanity check at
//! the balanced initialization.

use std::sync::Arc;

use diffsampler::dynamics::{
    simulate_forward, BackwardProcess, Grid, Policy, PolicyConfig, RecordMode,
};
use diffsampler::energies::{Energy, Gauss1d};
use diffsampler::exec::Parallelism;
use diffsampler::objectives::{pis_kl_loss, tb_loss, vargrad_loss, LogZEstimate};
use diffsampler::rngs::{normal_tensor, stream, Domain};

fn toy() -> (Policy, BackwardProcess, Arc<dyn Energy>, Grid) {
    let mut rng = stream(101, Domain::Init, 0);
    let mut policy = Policy::new(
        PolicyConfig {
            dim: 1,
            hidden: 8,
            zero_init_last: false,
            ..Default::default()
        },
        &mut rng,
    )
    .unwrap();
    // keep the random policy mild so log-ratios stay well-scaled
    for v in policy.store.values_mut().iter_mut() {
        *v *= 0.3;
    }
    (
        policy,
        BackwardProcess::bridge(1.0),
        Arc::new(Gauss1d),
        Grid::new(8).unwrap(),
    )
}

fn simulate(
    p: &Policy,
    bwd: &BackwardProcess,
    e: &Arc<dyn Energy>,
    grid: &Grid,
    batch: usize,
    idx: u64,
) -> diffsampler::dynamics::SimBatch {
    let noise = normal_tensor(
        &mut stream(102, Domain::Forward, idx),
        grid.steps * batch,
        1,
    );
    simulate_forward(
        p,
        bwd,
        e,
        grid,
        batch,
        &noise,
        0.0,
        RecordMode::Score,
        Parallelism::Sequential,
    )
    .unwrap()
}

/// On-policy TB (with log Z_θ converged to the mean of −ℓ) and VarGrad
/// produce directionally aligned policy gradients.
#[test]
fn tb_and_vargrad_gradients_align() {
    let (policy, bwd, energy, grid) = toy();
    let batch = 32;

    // stage 1: settle log Z at its optimum, the average of -ℓ
    let mut acc = 0.0;
    let mut count = 0;
    for b in 0..50u64 {
        let sim = simulate(&policy, &bwd, &energy, &grid, batch, b);
        for ch in &sim.chunks {
            for r in 0..ch.rows {
                acc += ch.log_reward[r] + ch.sum_log_pb(r) - ch.sum_log_pf(r);
                count += 1;
            }
        }
    }
    let log_z = LogZEstimate::new(acc / count as f64);

    // stage 2: the same 200 batches through both losses
    let n_params = policy.store.len();
    let mut g_tb = vec![0.0; n_params];
    let mut g_vg = vec![0.0; n_params];
    for b in 0..200u64 {
        let mut sim = simulate(&policy, &bwd, &energy, &grid, batch, 1000 + b);
        let r1 = tb_loss(&mut sim, &log_z).unwrap();
        let mut sim2 = simulate(&policy, &bwd, &energy, &grid, batch, 1000 + b);
        let r2 = vargrad_loss(&mut sim2).unwrap();
        for i in 0..n_params {
            g_tb[i] += r1.policy_grad[i];
            g_vg[i] += r2.policy_grad[i];
        }
    }
    let dot: f64 = g_tb.iter().zip(&g_vg).map(|(a, b)| a * b).sum();
    let na: f64 = g_tb.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = g_vg.iter().map(|b| b * b).sum::<f64>().sqrt();
    let cosine = dot / (na * nb);
    assert!(cosine > 0.95, "cosine similarity {cosine}");
}

/// At the balanced zero initialization (T = 1, σ matched to the target)
/// the PIS loss is exactly zero per trajectory and its gradient is pure
/// Monte Carlo noise: the batch-mean gradient must be statistically
/// indistinguishable from zero.
#[test]
fn pis_gradient_vanishes_at_the_balanced_point() {
    let mut rng = stream(103, Domain::Init, 0);
    let policy = Policy::new(
        PolicyConfig {
            dim: 1,
            hidden: 8,
            ..Default::default()
        },
        &mut rng,
    )
    .unwrap();
    let bwd = BackwardProcess::bridge(1.0);
    let energy: Arc<dyn Energy> = Arc::new(Gauss1d);
    let grid = Grid::new(1).unwrap();

    let n_chunks = 50;
    let chunk_batch = 2000; // 100k trajectories total
    let n_params = policy.store.len();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n_chunks);
    for b in 0..n_chunks {
        let noise = normal_tensor(&mut stream(104, Domain::Forward, b as u64), chunk_batch, 1);
        let mut sim = simulate_forward(
            &policy,
            &bwd,
            &energy,
            &grid,
            chunk_batch,
            &noise,
            0.0,
            RecordMode::Reparam,
            Parallelism::Sequential,
        )
        .unwrap();
        let res = pis_kl_loss(&mut sim).unwrap();
        assert!(
            res.loss.abs() < 1e-10,
            "loss {} should vanish identically",
            res.loss
        );
        grads.push(res.policy_grad);
    }
    // mean and per-coordinate standard error across the 50 batches
    let mut mean = vec![0.0; n_params];
    for g in &grads {
        for i in 0..n_params {
            mean[i] += g[i] / n_chunks as f64;
        }
    }
    let mut se_sq_sum = 0.0;
    let mut norm_sq = 0.0;
    for i in 0..n_params {
        let var: f64 =
            grads.iter().map(|g| (g[i] - mean[i]).powi(2)).sum::<f64>() / (n_chunks as f64 - 1.0);
        se_sq_sum += var / n_chunks as f64;
        norm_sq += mean[i] * mean[i];
    }
    // E[‖mean‖²] = Σ SE² under the null; a systematic bias would blow past it
    assert!(
        norm_sq < 3.0 * se_sq_sum,
        "gradient norm² {norm_sq} vs noise floor {se_sq_sum}"
    );
}

/// Exploration perturbs only the sampling distribution; the recorded
/// density stays the unperturbed policy's.
#[test]
fn exploration_widens_samples_but_not_the_recorded_density() {
    let mut rng = stream(105, Domain::Init, 0);
    let policy = Policy::new(
        PolicyConfig {
            dim: 1,
            hidden: 8,
            ..Default::default()
        },
        &mut rng,
    )
    .unwrap();
    let sigma2 = 1.0;
    let bwd = BackwardProcess::bridge(sigma2);
    let energy: Arc<dyn Energy> = Arc::new(Gauss1d);
    let grid = Grid::new(1).unwrap();
    let n = 40_000;
    let eps = 0.8;
    let noise = normal_tensor(&mut stream(106, Domain::Forward, 0), n, 1);
    let sim = simulate_forward(
        &policy,
        &bwd,
        &energy,
        &grid,
        n,
        &noise,
        eps,
        RecordMode::Score,
        Parallelism::Sequential,
    )
    .unwrap();
    // terminal variance reflects σ²Δt + ε²
    let xs: Vec<f64> = {
        let t = sim.terminal();
        t.data.clone()
    };
    let var = diffsampler::stats::variance(&xs);
    let expect = sigma2 + eps * eps;
    let se = expect * (2.0 / n as f64).sqrt();
    assert!(
        (var - expect).abs() < 4.0 * se,
        "sampled variance {var} vs {expect}"
    );
    // recorded log p_F is the unperturbed policy density at the sample
    for ch in &sim.chunks {
        for r in 0..ch.rows.min(64) {
            let x1 = ch.states[1].at(r, 0);
            let expect_pf = diffsampler::dynamics::gauss_logpdf(&[x1], sigma2);
            assert!((ch.sum_log_pf(r) - expect_pf).abs() < 1e-10);
        }
    }
}
