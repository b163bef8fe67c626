//! The training loop: alternating exploratory forward steps and
//! backward-replay steps, periodic local-search refresh, per-group Adam
//! orchestration, evaluation, and checkpointing.
//!
//! With local search enabled, even iterations simulate an exploratory
//! forward batch (terminal states feed the candidate buffer) and odd
//! iterations replay rank-prioritized local-search samples through
//! backward trajectories; every P-th odd iteration first refreshes the
//! local-search buffer with parallel MALA started from candidate draws.
//! Without local search every iteration is a forward step. The PIS
//! objective is strictly on-policy and rejects both exploration and
//! local search up front.

pub mod checkpoint;

use std::sync::Arc;
use std::time::Instant;

use crate::dynamics::{
    sample_backward, score_trajectories, simulate_forward, BackwardKind, BackwardProcess, Grid,
    Policy, PolicyConfig, RecordMode, VarianceMode,
};
use crate::energies::{self, Energy};
use crate::error::{Error, Result};
use crate::evalx::{self, mode_coverage, wasserstein2_sq};
use crate::exec::Parallelism;
use crate::explore::{local_search, ExplorationSchedule, MalaConfig, Prioritization, ReplayBuffer};
use crate::ndgrad::AdamState;
use crate::objectives::{
    pis_kl_loss, subtb_loss, tb_loss, vargrad_loss, FlowModel, LogZEstimate, LossResult, Objective,
};
use crate::rngs::{normal_tensor, stream, Domain};

/// Local-search settings: the MALA chain parameters plus how often (in
/// odd iterations) the buffer is refreshed.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSearchConfig {
    pub mala: MalaConfig,
    /// Refresh every P-th odd iteration (the first odd iteration refreshes).
    pub refresh_period: usize,
}

/// Full run configuration. Defaults follow the benchmark setup; energies
/// pick their own t_scale via [`default_t_scale`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub energy: String,
    pub manywell_dim: usize,
    pub objective: Objective,
    pub t_steps: usize,
    pub batch: usize,
    pub iterations: usize,
    pub t_scale: f64,
    pub hidden: usize,
    pub lr_policy: f64,
    pub lr_flow: f64,
    pub lr_logz: f64,
    pub langevin: bool,
    pub lgv_clip: f64,
    pub gfn_clip: f64,
    pub zero_init_last: bool,
    pub fl_bias: bool,
    pub subtb_lambda: f64,
    pub exploration: Option<ExplorationSchedule>,
    pub local_search: Option<LocalSearchConfig>,
    pub buffer_capacity: usize,
    pub prioritization: Prioritization,
    pub variance_mode: VarianceMode,
    pub backward: BackwardKind,
    pub seed: u64,
    pub eval_period: usize,
    pub eval_samples: usize,
    pub w2_every: usize,
    pub w2_samples: usize,
    pub mode_radius: f64,
}

/// Paper-backed per-energy diffusion rate σ² (t_scale).
pub fn default_t_scale(energy: &str) -> f64 {
    match energy {
        "gmm25" => 5.0,
        "gauss1d" => 2.0,
        _ => 1.0, // funnel, manywell
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            energy: "gmm25".into(),
            manywell_dim: 32,
            objective: Objective::Tb,
            t_steps: 100,
            batch: 300,
            iterations: 5000,
            t_scale: 5.0,
            hidden: 64,
            lr_policy: 1e-3,
            lr_flow: 1e-2,
            lr_logz: 1e-1,
            langevin: false,
            lgv_clip: 1e2,
            gfn_clip: 1e4,
            zero_init_last: true,
            fl_bias: false,
            subtb_lambda: 0.9,
            exploration: None,
            local_search: None,
            buffer_capacity: 600_000,
            prioritization: Prioritization::Rank { k: 0.01 },
            variance_mode: VarianceMode::Fixed,
            backward: BackwardKind::BrownianBridge,
            seed: 0,
            eval_period: 500,
            eval_samples: 2000,
            w2_every: 10,
            w2_samples: 500,
            mode_radius: 1.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be >= 1"));
        }
        if self.objective == Objective::VarGrad && self.batch < 2 {
            return Err(Error::config("--objective vargrad needs --batch >= 2"));
        }
        if self.objective == Objective::Pis {
            if self.local_search.is_some() {
                return Err(Error::config(
                    "--objective pis is on-policy and cannot be combined with --local_search",
                ));
            }
            if self.exploration.is_some() {
                return Err(Error::config(
                    "--objective pis is on-policy and cannot be combined with --exploratory",
                ));
            }
        }
        if self.lr_policy <= 0.0 || self.lr_flow <= 0.0 || self.lr_logz <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.t_scale <= 0.0 {
            return Err(Error::config("--t_scale must be positive"));
        }
        if let Some(ls) = &self.local_search {
            if ls.refresh_period == 0 {
                return Err(Error::config("local-search refresh period must be >= 1"));
            }
            ls.mala.validate()?;
        }
        if self.eval_period == 0 || self.w2_every == 0 {
            return Err(Error::config("eval periods must be >= 1"));
        }
        if self.w2_samples > evalx::W2_MAX_SAMPLES {
            return Err(Error::config(format!(
                "--w2_samples exceeds the exact-solver cap {}",
                evalx::W2_MAX_SAMPLES
            )));
        }
        Ok(())
    }

    /// Stable key=value form; the checkpoint/manifest hashes derive from it.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("backward", format!("{:?}", self.backward));
        kv("batch", self.batch.to_string());
        kv("buffer_capacity", self.buffer_capacity.to_string());
        kv("energy", self.energy.clone());
        kv("eval_period", self.eval_period.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("exploration", format!("{:?}", self.exploration));
        kv("fl_bias", self.fl_bias.to_string());
        kv("gfn_clip", format!("{:e}", self.gfn_clip));
        kv("hidden", self.hidden.to_string());
        kv("iterations", self.iterations.to_string());
        kv("langevin", self.langevin.to_string());
        kv("lgv_clip", format!("{:e}", self.lgv_clip));
        kv("local_search", format!("{:?}", self.local_search));
        kv("lr_flow", format!("{:e}", self.lr_flow));
        kv("lr_logz", format!("{:e}", self.lr_logz));
        kv("lr_policy", format!("{:e}", self.lr_policy));
        kv("manywell_dim", self.manywell_dim.to_string());
        kv("mode_radius", format!("{:e}", self.mode_radius));
        kv("objective", self.objective.name().into());
        kv("prioritization", format!("{:?}", self.prioritization));
        kv("seed", self.seed.to_string());
        kv("subtb_lambda", format!("{:e}", self.subtb_lambda));
        kv("t_scale", format!("{:e}", self.t_scale));
        kv("t_steps", self.t_steps.to_string());
        kv("variance_mode", format!("{:?}", self.variance_mode));
        kv("w2_every", self.w2_every.to_string());
        kv("w2_samples", self.w2_samples.to_string());
        kv("zero_init_last", self.zero_init_last.to_string());
        s
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub iteration: usize,
    pub wall_ms: u64,
    pub loss: f64,
    pub log_z_theta: Option<f64>,
    pub log_z_hat: f64,
    pub log_z_rw: f64,
    pub w2_sq: Option<f64>,
    pub mode_count: Option<usize>,
    /// Cumulative non-finite trajectory drops.
    pub nan_drops: u64,
    /// MALA step size after the most recent refresh (0 without local search).
    pub eta: f64,
    pub buffer_len: usize,
    pub ls_buffer_len: usize,
}

impl EvalRow {
    /// Equality ignoring wall-clock time (the only nondeterministic field).
    pub fn same_results(&self, other: &EvalRow) -> bool {
        self.iteration == other.iteration
            && self.loss == other.loss
            && self.log_z_theta == other.log_z_theta
            && self.log_z_hat == other.log_z_hat
            && self.log_z_rw == other.log_z_rw
            && self.w2_sq == other.w2_sq
            && self.mode_count == other.mode_count
            && self.nan_drops == other.nan_drops
            && self.eta == other.eta
            && self.buffer_len == other.buffer_len
            && self.ls_buffer_len == other.ls_buffer_len
    }
}

/// Per-run record: evaluation rows plus exact bookkeeping counters.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub rows: Vec<EvalRow>,
    pub final_loss: f64,
    pub nan_drops: u64,
    /// Backward steps that fell back to a forward step (empty buffer).
    pub forward_fallbacks: u64,
    pub candidate_inserts: u64,
    pub ls_inserts: u64,
    pub skipped_updates: u64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub policy: Policy,
    pub log_z: Option<LogZEstimate>,
    pub flow: Option<FlowModel>,
    pub energy: Arc<dyn Energy>,
    pub grid: Grid,
    pub backward: BackwardProcess,
    adam_policy: AdamState,
    adam_logz: Option<AdamState>,
    adam_flow: Option<AdamState>,
    candidates: Option<ReplayBuffer>,
    ls_pool: Option<ReplayBuffer>,
    iteration: usize,
    eta: f64,
    nan_drops: u64,
    forward_fallbacks: u64,
    mode: Parallelism,
    /// Called with each evaluation row as it is produced.
    pub progress: Option<Box<dyn Fn(&EvalRow) + Send>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let energy: Arc<dyn Energy> = energies::by_name(&cfg.energy, cfg.manywell_dim)?.into();
        let grid = Grid::new(cfg.t_steps)?;
        let backward = BackwardProcess {
            kind: cfg.backward,
            sigma2: cfg.t_scale,
        };
        let mut init_rng = stream(cfg.seed, Domain::Init, 0);
        let policy = Policy::new(
            PolicyConfig {
                dim: energy.dim(),
                hidden: cfg.hidden,
                langevin: cfg.langevin,
                lgv_clip: cfg.lgv_clip,
                gfn_clip: cfg.gfn_clip,
                variance_mode: cfg.variance_mode,
                zero_init_last: cfg.zero_init_last,
            },
            &mut init_rng,
        )?;
        let log_z = match cfg.objective {
            Objective::Tb => Some(LogZEstimate::new(0.0)),
            _ => None,
        };
        let flow = match cfg.objective {
            Objective::SubTb => Some(FlowModel::new(
                energy.dim(),
                cfg.hidden,
                cfg.fl_bias,
                cfg.t_scale,
                &mut init_rng,
            )?),
            _ => None,
        };
        let adam_policy = AdamState::new(policy.store.len());
        let adam_logz = log_z.as_ref().map(|z| AdamState::new(z.store.len()));
        let adam_flow = flow.as_ref().map(|f| AdamState::new(f.store.len()));
        let (candidates, ls_pool) = if cfg.local_search.is_some() {
            (
                Some(ReplayBuffer::new(cfg.buffer_capacity, cfg.prioritization)?),
                Some(ReplayBuffer::new(cfg.buffer_capacity, cfg.prioritization)?),
            )
        } else {
            (None, None)
        };
        Ok(Trainer {
            eta: cfg
                .local_search
                .as_ref()
                .map_or(0.0, |ls| ls.mala.step_size),
            cfg,
            policy,
            log_z,
            flow,
            energy,
            grid,
            backward,
            adam_policy,
            adam_logz,
            adam_flow,
            candidates,
            ls_pool,
            iteration: 0,
            nan_drops: 0,
            forward_fallbacks: 0,
            mode: Parallelism::auto(),
            progress: None,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log_z_value(&self) -> Option<f64> {
        match self.cfg.objective {
            Objective::Tb => self.log_z.as_ref().map(|z| z.value()),
            Objective::SubTb => self.flow.as_ref().map(|f| f.log_f0()),
            _ => None,
        }
    }

    fn exploration_std(&self) -> f64 {
        self.cfg
            .exploration
            .map_or(0.0, |s| s.std_at(self.iteration))
    }

    fn forward_step(&mut self) -> Result<f64> {
        let i = self.iteration as u64;
        let record = if self.cfg.objective == Objective::Pis {
            RecordMode::Reparam
        } else {
            RecordMode::Score
        };
        let eps = if record == RecordMode::Reparam {
            0.0
        } else {
            self.exploration_std()
        };
        let noise = normal_tensor(
            &mut stream(self.cfg.seed, Domain::Forward, i),
            self.grid.steps * self.cfg.batch,
            self.policy.cfg.dim,
        );
        let mut sim = simulate_forward(
            &self.policy,
            &self.backward,
            &self.energy,
            &self.grid,
            self.cfg.batch,
            &noise,
            eps,
            record,
            self.mode,
        )?;
        self.nan_drops += sim.nan_drops as u64;
        if let Some(buf) = self.candidates.as_mut() {
            let terminal = sim.terminal();
            let rewards = sim.log_rewards();
            let ok = sim.ok_flags();
            for r in 0..terminal.rows {
                if ok[r] {
                    buf.insert(terminal.row(r).to_vec(), rewards[r]);
                }
            }
        }
        let res = self.compute_loss(&mut sim)?;
        self.apply_update(&res)?;
        Ok(res.loss)
    }

    fn backward_step(&mut self, odd_index: usize) -> Result<f64> {
        let ls_cfg = self
            .cfg
            .local_search
            .clone()
            .expect("backward step without local search");
        let i = self.iteration as u64;
        // periodic refresh of the local-search pool
        if odd_index % ls_cfg.refresh_period == 0 {
            let can_refresh = self.candidates.as_ref().is_some_and(|b| !b.is_empty());
            if can_refresh {
                let inits = {
                    let buf = self.candidates.as_mut().unwrap();
                    let mut draw_rng = stream(self.cfg.seed, Domain::LsInit, i);
                    buf.sample(self.cfg.batch, &mut draw_rng)?.0
                };
                let mut mala_rng = stream(self.cfg.seed, Domain::MalaNoise, i);
                let report = local_search(
                    &inits,
                    self.energy.as_ref(),
                    &ls_cfg.mala,
                    self.ls_pool.as_mut().unwrap(),
                    &mut mala_rng,
                    self.mode,
                )?;
                self.eta = report.eta;
            }
        }
        if self.ls_pool.as_ref().is_none_or(|b| b.is_empty()) {
            // nothing to replay yet: fall back to a forward step
            self.forward_fallbacks += 1;
            return self.forward_step();
        }
        let (x1, stored_rewards) = {
            let buf = self.ls_pool.as_mut().unwrap();
            let mut draw_rng = stream(self.cfg.seed, Domain::BufferDraw, i);
            buf.sample(self.cfg.batch, &mut draw_rng)?
        };
        let noise = normal_tensor(
            &mut stream(self.cfg.seed, Domain::Backward, i),
            self.grid.steps * self.cfg.batch,
            self.policy.cfg.dim,
        );
        let bwd = sample_backward(&self.backward, &self.grid, &x1, &noise)?;
        let mut sim = score_trajectories(
            &self.policy,
            &self.backward,
            &self.energy,
            &self.grid,
            &bwd.states,
            &bwd.step_log_pb,
            &stored_rewards,
            self.mode,
        )?;
        self.nan_drops += sim.nan_drops as u64;
        let res = self.compute_loss(&mut sim)?;
        self.apply_update(&res)?;
        Ok(res.loss)
    }

    fn compute_loss(&mut self, sim: &mut crate::dynamics::SimBatch) -> Result<LossResult> {
        match self.cfg.objective {
            Objective::Tb => tb_loss(sim, self.log_z.as_ref().unwrap()),
            Objective::VarGrad => vargrad_loss(sim),
            Objective::SubTb => subtb_loss(
                sim,
                self.flow.as_ref().unwrap(),
                &self.energy,
                self.cfg.subtb_lambda,
            ),
            Objective::Pis => pis_kl_loss(sim),
        }
    }

    fn apply_update(&mut self, res: &LossResult) -> Result<()> {
        self.adam_policy
            .apply(&mut self.policy.store, &res.policy_grad, self.cfg.lr_policy)?;
        match self.cfg.objective {
            Objective::Tb => {
                let aux = res.aux_grad.as_ref().expect("tb carries a log Z gradient");
                self.adam_logz.as_mut().unwrap().apply(
                    &mut self.log_z.as_mut().unwrap().store,
                    aux,
                    self.cfg.lr_logz,
                )?;
            }
            Objective::SubTb => {
                let aux = res
                    .aux_grad
                    .as_ref()
                    .expect("subtb carries a flow gradient");
                self.adam_flow.as_mut().unwrap().apply(
                    &mut self.flow.as_mut().unwrap().store,
                    aux,
                    self.cfg.lr_flow,
                )?;
            }
            _ => {}
        }
        Ok(())
    }

    /// W₂ is the costly metric: compute it on every w2_every-th periodic
    /// evaluation and on the final one. Pure in the iteration index so
    /// resumed runs reproduce uninterrupted ones.
    fn should_w2(&self, i: usize) -> bool {
        let last = i + 1 == self.cfg.iterations;
        if (i + 1) % self.cfg.eval_period == 0 {
            ((i + 1) / self.cfg.eval_period - 1) % self.cfg.w2_every == 0 || last
        } else {
            last
        }
    }

    fn evaluate(&mut self, loss: f64, started: &Instant) -> Result<EvalRow> {
        let i = self.iteration as u64;
        let mut erng = stream(self.cfg.seed, Domain::Eval, i);
        let (lb, rw, samples) = evalx::log_z_estimates(
            &self.policy,
            &self.backward,
            &self.energy,
            &self.grid,
            self.cfg.eval_samples,
            &mut erng,
            self.mode,
        )?;
        let mode_count = self
            .energy
            .mode_centers()
            .map(|centers| mode_coverage(&samples, &centers, self.cfg.mode_radius));
        let w2_sq = if self.should_w2(self.iteration) {
            let n = self.cfg.w2_samples.min(samples.rows);
            let mut xrng = stream(self.cfg.seed, Domain::ExactSampler, i);
            self.energy
                .sample_exact(n, &mut xrng)
                .map(|reference| wasserstein2_sq(&samples.slice_rows(0, n), &reference))
                .transpose()?
        } else {
            None
        };
        Ok(EvalRow {
            iteration: self.iteration,
            wall_ms: started.elapsed().as_millis() as u64,
            loss,
            log_z_theta: self.log_z_value(),
            log_z_hat: lb,
            log_z_rw: rw,
            w2_sq,
            mode_count,
            nan_drops: self.nan_drops,
            eta: if self.cfg.local_search.is_some() {
                self.eta
            } else {
                0.0
            },
            buffer_len: self.candidates.as_ref().map_or(0, |b| b.len()),
            ls_buffer_len: self.ls_pool.as_ref().map_or(0, |b| b.len()),
        })
    }

    /// Run up to (at most) iteration `upto`, evaluating every
    /// `eval_period` iterations and at the configured end.
    pub fn run_until(&mut self, upto: usize) -> Result<RunReport> {
        let started = Instant::now();
        let stop = upto.min(self.cfg.iterations);
        let mut report = RunReport::default();
        let mut loss = f64::NAN;
        while self.iteration < stop {
            let i = self.iteration;
            loss = if self.cfg.local_search.is_some() && i % 2 == 1 {
                self.backward_step(i / 2)?
            } else {
                self.forward_step()?
            };
            let last = i + 1 == self.cfg.iterations;
            if (i + 1) % self.cfg.eval_period == 0 || last {
                let row = self.evaluate(loss, &started)?;
                if let Some(cb) = &self.progress {
                    cb(&row);
                }
                report.rows.push(row);
            }
            self.iteration += 1;
        }
        report.final_loss = loss;
        report.nan_drops = self.nan_drops;
        report.forward_fallbacks = self.forward_fallbacks;
        report.candidate_inserts = self.candidates.as_ref().map_or(0, |b| b.insert_count());
        report.ls_inserts = self.ls_pool.as_ref().map_or(0, |b| b.insert_count());
        report.skipped_updates = self.adam_policy.skipped
            + self.adam_logz.as_ref().map_or(0, |a| a.skipped)
            + self.adam_flow.as_ref().map_or(0, |a| a.skipped);
        Ok(report)
    }

    /// Run from the current iteration to `cfg.iterations`.
    pub fn run(&mut self) -> Result<RunReport> {
        self.run_until(self.cfg.iterations)
    }
}

/// Build a trainer and run it to completion.
pub fn train(cfg: TrainConfig) -> Result<(RunReport, Trainer)> {
    let mut t = Trainer::new(cfg)?;
    let report = t.run()?;
    Ok((report, t))
}
