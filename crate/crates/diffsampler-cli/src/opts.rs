//! Flag parsing, config-file merging, and resolution into a run plan.
//!
//! Precedence: built-in defaults < config file (`key = value` lines,
//! `#` comments) < command-line flags. Switch flags (--langevin,
//! --exploratory, --local_search, --fl_bias, --timing) can only enable;
//! value-carrying booleans (--zero_init, --ld_schedule) take an explicit
//! true/false.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use diffsampler::dynamics::{BackwardKind, VarianceMode};
use diffsampler::explore::{ExplorationSchedule, MalaConfig, Prioritization};
use diffsampler::objectives::Objective;
use diffsampler::trainer::{default_t_scale, LocalSearchConfig, TrainConfig};

#[derive(Debug, Clone, Default, Args)]
#[command(rename_all = "snake_case")]
pub struct RawOpts {
    /// Target energy: gmm25 | funnel | manywell | gauss1d
    #[arg(long)]
    pub energy: Option<String>,
    /// Manywell dimensionality (even)
    #[arg(long)]
    pub dim: Option<usize>,
    /// Training objective: tb | vargrad | subtb | pis
    #[arg(long)]
    pub objective: Option<String>,
    /// Base diffusion rate σ² shared by policy and noising process
    #[arg(long)]
    pub t_scale: Option<f64>,
    /// Number of Euler–Maruyama steps
    #[arg(long = "T")]
    pub t_steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr_policy: Option<f64>,
    #[arg(long)]
    pub lr_flow: Option<f64>,
    #[arg(long)]
    pub lr_logz: Option<f64>,
    /// Langevin parametrization of the drift
    #[arg(long)]
    pub langevin: bool,
    #[arg(long)]
    pub lgv_clip: Option<f64>,
    #[arg(long)]
    pub gfn_clip: Option<f64>,
    /// Zero-initialize network output layers (true by default)
    #[arg(long)]
    pub zero_init: Option<bool>,
    /// Forward-looking bias on the SubTB flow
    #[arg(long)]
    pub fl_bias: bool,
    #[arg(long)]
    pub subtb_lambda: Option<f64>,
    /// Add decaying variance noise when sampling training trajectories
    #[arg(long)]
    pub exploratory: bool,
    #[arg(long)]
    pub exploration_factor: Option<f64>,
    /// Iterations over which exploration decays to zero (default: half the run)
    #[arg(long)]
    pub exploration_horizon: Option<usize>,
    /// Alternate exploratory forward steps with local-search replay steps
    #[arg(long)]
    pub local_search: bool,
    #[arg(long)]
    pub buffer_size: Option<usize>,
    /// Buffer draws: rank | uniform
    #[arg(long)]
    pub prioritized: Option<String>,
    #[arg(long)]
    pub rank_weight: Option<f64>,
    /// Initial MALA step size η₀
    #[arg(long)]
    pub ld_step: Option<f64>,
    /// Adapt η toward the target acceptance rate (true by default)
    #[arg(long)]
    pub ld_schedule: Option<bool>,
    #[arg(long)]
    pub target_acceptance_rate: Option<f64>,
    /// MALA sweeps per refresh
    #[arg(long)]
    pub max_iter_ls: Option<usize>,
    /// Burn-in sweeps
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub f_increase: Option<f64>,
    #[arg(long)]
    pub f_decrease: Option<f64>,
    /// Inverse temperature in the MALA acceptance ratio
    #[arg(long)]
    pub beta_ls: Option<f64>,
    /// Refresh the local-search pool every P-th odd iteration
    #[arg(long)]
    pub ls_period: Option<usize>,
    /// Policy variance: fixed | learned
    #[arg(long)]
    pub variance_mode: Option<String>,
    /// Noising process: bridge | vp
    #[arg(long)]
    pub backward: Option<String>,
    #[arg(long)]
    pub beta_min: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_period: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Compute W₂ every Nth evaluation (it is the costly metric)
    #[arg(long)]
    pub w2_every: Option<usize>,
    #[arg(long)]
    pub w2_samples: Option<usize>,
    #[arg(long)]
    pub mode_radius: Option<f64>,
    /// Sample count written to samples.bin at the end of the run
    #[arg(long)]
    pub final_samples: Option<usize>,
    /// Write real wall-clock times into metrics.csv (off by default so that
    /// identical runs produce byte-identical output)
    #[arg(long)]
    pub timing: bool,
}

macro_rules! merge_opt {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )+
    };
}

impl RawOpts {
    /// Fill unset fields from `other` (lower precedence).
    pub fn merge_under(&mut self, other: &RawOpts) {
        merge_opt!(
            self,
            other,
            energy,
            dim,
            objective,
            t_scale,
            t_steps,
            batch,
            iterations,
            hidden,
            lr_policy,
            lr_flow,
            lr_logz,
            lgv_clip,
            gfn_clip,
            zero_init,
            subtb_lambda,
            exploration_factor,
            exploration_horizon,
            buffer_size,
            prioritized,
            rank_weight,
            ld_step,
            ld_schedule,
            target_acceptance_rate,
            max_iter_ls,
            burn_in,
            f_increase,
            f_decrease,
            beta_ls,
            ls_period,
            variance_mode,
            backward,
            beta_min,
            beta_max,
            seed,
            eval_period,
            eval_samples,
            w2_every,
            w2_samples,
            mode_radius,
            final_samples
        );
        self.langevin |= other.langevin;
        self.fl_bias |= other.fl_bias;
        self.exploratory |= other.exploratory;
        self.local_search |= other.local_search;
        self.timing |= other.timing;
    }

    /// Parse a `key = value` config file (# starts a comment).
    pub fn from_config_file(path: &PathBuf) -> Result<RawOpts> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), ln + 1))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut o = RawOpts::default();
        fn take<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            match map.remove(key) {
                Some(v) => v
                    .parse::<T>()
                    .map(Some)
                    .map_err(|e| anyhow!("bad value for {key}: {e}")),
                None => Ok(None),
            }
        }
        o.energy = take(&mut map, "energy")?;
        o.dim = take(&mut map, "dim")?;
        o.objective = take(&mut map, "objective")?;
        o.t_scale = take(&mut map, "t_scale")?;
        o.t_steps = take(&mut map, "T")?;
        o.batch = take(&mut map, "batch")?;
        o.iterations = take(&mut map, "iterations")?;
        o.hidden = take(&mut map, "hidden")?;
        o.lr_policy = take(&mut map, "lr_policy")?;
        o.lr_flow = take(&mut map, "lr_flow")?;
        o.lr_logz = take(&mut map, "lr_logz")?;
        o.langevin = take::<bool>(&mut map, "langevin")?.unwrap_or(false);
        o.lgv_clip = take(&mut map, "lgv_clip")?;
        o.gfn_clip = take(&mut map, "gfn_clip")?;
        o.zero_init = take(&mut map, "zero_init")?;
        o.fl_bias = take::<bool>(&mut map, "fl_bias")?.unwrap_or(false);
        o.subtb_lambda = take(&mut map, "subtb_lambda")?;
        o.exploratory = take::<bool>(&mut map, "exploratory")?.unwrap_or(false);
        o.exploration_factor = take(&mut map, "exploration_factor")?;
        o.exploration_horizon = take(&mut map, "exploration_horizon")?;
        o.local_search = take::<bool>(&mut map, "local_search")?.unwrap_or(false);
        o.buffer_size = take(&mut map, "buffer_size")?;
        o.prioritized = take(&mut map, "prioritized")?;
        o.rank_weight = take(&mut map, "rank_weight")?;
        o.ld_step = take(&mut map, "ld_step")?;
        o.ld_schedule = take(&mut map, "ld_schedule")?;
        o.target_acceptance_rate = take(&mut map, "target_acceptance_rate")?;
        o.max_iter_ls = take(&mut map, "max_iter_ls")?;
        o.burn_in = take(&mut map, "burn_in")?;
        o.f_increase = take(&mut map, "f_increase")?;
        o.f_decrease = take(&mut map, "f_decrease")?;
        o.beta_ls = take(&mut map, "beta_ls")?;
        o.ls_period = take(&mut map, "ls_period")?;
        o.variance_mode = take(&mut map, "variance_mode")?;
        o.backward = take(&mut map, "backward")?;
        o.beta_min = take(&mut map, "beta_min")?;
        o.beta_max = take(&mut map, "beta_max")?;
        o.seed = take(&mut map, "seed")?;
        o.eval_period = take(&mut map, "eval_period")?;
        o.eval_samples = take(&mut map, "eval_samples")?;
        o.w2_every = take(&mut map, "w2_every")?;
        o.w2_samples = take(&mut map, "w2_samples")?;
        o.mode_radius = take(&mut map, "mode_radius")?;
        o.final_samples = take(&mut map, "final_samples")?;
        o.timing = take::<bool>(&mut map, "timing")?.unwrap_or(false);
        map.remove("config_hash"); // manifests are valid config files
        map.remove("files");
        if let Some(k) = map.keys().next() {
            bail!("unknown config key '{k}' in {}", path.display());
        }
        Ok(o)
    }
}

/// Fully resolved run settings: the trainer config plus output options.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub train: TrainConfig,
    pub final_samples: usize,
    pub timing: bool,
}

pub fn resolve(opts: &RawOpts) -> Result<Resolved> {
    let energy = opts.energy.clone().unwrap_or_else(|| "gmm25".into());
    let objective = Objective::from_str(opts.objective.as_deref().unwrap_or("tb"))
        .map_err(|e| anyhow!("--objective: {e}"))?;
    let langevin = opts.langevin;
    // paper defaults at desk scale: plain runs train longer than Langevin ones
    let iterations = opts
        .iterations
        .unwrap_or(if langevin { 2000 } else { 5000 });
    let exploration = if opts.exploratory {
        let initial = opts.exploration_factor.unwrap_or(0.2);
        let horizon = opts.exploration_horizon.unwrap_or((iterations / 2).max(1));
        Some(
            ExplorationSchedule::new(initial, horizon)
                .map_err(|e| anyhow!("--exploration_factor: {e}"))?,
        )
    } else {
        if opts.exploration_factor.is_some() {
            bail!("--exploration_factor requires --exploratory");
        }
        None
    };
    let prioritization = match opts.prioritized.as_deref().unwrap_or("rank") {
        "rank" => Prioritization::Rank {
            k: opts.rank_weight.unwrap_or(0.01),
        },
        "uniform" => Prioritization::Uniform,
        other => bail!("--prioritized must be rank or uniform, got '{other}'"),
    };
    let local_search = if opts.local_search {
        Some(LocalSearchConfig {
            mala: MalaConfig {
                step_size: opts.ld_step.unwrap_or(0.01),
                f_increase: opts.f_increase.unwrap_or(1.1),
                f_decrease: opts.f_decrease.unwrap_or(0.9),
                steps: opts.max_iter_ls.unwrap_or(200),
                burn_in: opts.burn_in.unwrap_or(100),
                target_acceptance: opts.target_acceptance_rate.unwrap_or(0.574),
                beta_temp: opts.beta_ls.unwrap_or(1.0),
                adaptive: opts.ld_schedule.unwrap_or(true),
            },
            refresh_period: opts.ls_period.unwrap_or(100),
        })
    } else {
        None
    };
    let variance_mode = match opts.variance_mode.as_deref().unwrap_or("fixed") {
        "fixed" => VarianceMode::Fixed,
        "learned" => VarianceMode::LearnedStateDependent,
        other => bail!("--variance_mode must be fixed or learned, got '{other}'"),
    };
    let backward = match opts.backward.as_deref().unwrap_or("bridge") {
        "bridge" => BackwardKind::BrownianBridge,
        "vp" => BackwardKind::VariancePreserving {
            beta_min: opts.beta_min.unwrap_or(0.01),
            beta_max: opts.beta_max.unwrap_or(4.0),
        },
        other => bail!("--backward must be bridge or vp, got '{other}'"),
    };
    let train = TrainConfig {
        t_scale: opts.t_scale.unwrap_or_else(|| default_t_scale(&energy)),
        energy,
        manywell_dim: opts.dim.unwrap_or(32),
        objective,
        t_steps: opts.t_steps.unwrap_or(100),
        batch: opts.batch.unwrap_or(300),
        iterations,
        hidden: opts.hidden.unwrap_or(64),
        lr_policy: opts.lr_policy.unwrap_or(1e-3),
        lr_flow: opts.lr_flow.unwrap_or(1e-2),
        lr_logz: opts.lr_logz.unwrap_or(1e-1),
        langevin,
        lgv_clip: opts.lgv_clip.unwrap_or(1e2),
        gfn_clip: opts.gfn_clip.unwrap_or(1e4),
        zero_init_last: opts.zero_init.unwrap_or(true),
        fl_bias: opts.fl_bias,
        subtb_lambda: opts.subtb_lambda.unwrap_or(0.9),
        exploration,
        local_search,
        buffer_capacity: opts.buffer_size.unwrap_or(600_000),
        prioritization,
        variance_mode,
        backward,
        seed: opts.seed.unwrap_or(0),
        eval_period: opts.eval_period.unwrap_or(500),
        eval_samples: opts.eval_samples.unwrap_or(2000),
        w2_every: opts.w2_every.unwrap_or(10),
        w2_samples: opts.w2_samples.unwrap_or(500),
        mode_radius: opts.mode_radius.unwrap_or(1.5),
    };
    train.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(Resolved {
        train,
        final_samples: opts.final_samples.unwrap_or(2000),
        timing: opts.timing,
    })
}

/// Serialize the resolved settings back to config-file form (the manifest
/// body): every default materialized, stable key order.
pub fn to_manifest_body(r: &Resolved) -> String {
    let t = &r.train;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("energy", t.energy.clone());
    kv("dim", t.manywell_dim.to_string());
    kv("objective", t.objective.name().into());
    kv("t_scale", fmt_f(t.t_scale));
    kv("T", t.t_steps.to_string());
    kv("batch", t.batch.to_string());
    kv("iterations", t.iterations.to_string());
    kv("hidden", t.hidden.to_string());
    kv("lr_policy", fmt_f(t.lr_policy));
    kv("lr_flow", fmt_f(t.lr_flow));
    kv("lr_logz", fmt_f(t.lr_logz));
    kv("langevin", t.langevin.to_string());
    kv("lgv_clip", fmt_f(t.lgv_clip));
    kv("gfn_clip", fmt_f(t.gfn_clip));
    kv("zero_init", t.zero_init_last.to_string());
    kv("fl_bias", t.fl_bias.to_string());
    kv("subtb_lambda", fmt_f(t.subtb_lambda));
    kv("exploratory", t.exploration.is_some().to_string());
    if let Some(e) = &t.exploration {
        kv("exploration_factor", fmt_f(e.initial));
        kv("exploration_horizon", e.horizon.to_string());
    }
    kv("local_search", t.local_search.is_some().to_string());
    if let Some(ls) = &t.local_search {
        kv("ld_step", fmt_f(ls.mala.step_size));
        kv("ld_schedule", ls.mala.adaptive.to_string());
        kv("f_increase", fmt_f(ls.mala.f_increase));
        kv("f_decrease", fmt_f(ls.mala.f_decrease));
        kv("max_iter_ls", ls.mala.steps.to_string());
        kv("burn_in", ls.mala.burn_in.to_string());
        kv("target_acceptance_rate", fmt_f(ls.mala.target_acceptance));
        kv("beta_ls", fmt_f(ls.mala.beta_temp));
        kv("ls_period", ls.refresh_period.to_string());
    }
    kv("buffer_size", t.buffer_capacity.to_string());
    match t.prioritization {
        Prioritization::Uniform => kv("prioritized", "uniform".into()),
        Prioritization::Rank { k } => {
            kv("prioritized", "rank".into());
            kv("rank_weight", fmt_f(k));
        }
    }
    kv(
        "variance_mode",
        match t.variance_mode {
            VarianceMode::Fixed => "fixed".into(),
            VarianceMode::LearnedStateDependent => "learned".into(),
        },
    );
    match t.backward {
        BackwardKind::BrownianBridge => kv("backward", "bridge".into()),
        BackwardKind::VariancePreserving { beta_min, beta_max } => {
            kv("backward", "vp".into());
            kv("beta_min", fmt_f(beta_min));
            kv("beta_max", fmt_f(beta_max));
        }
    }
    kv("seed", t.seed.to_string());
    kv("eval_period", t.eval_period.to_string());
    kv("eval_samples", t.eval_samples.to_string());
    kv("w2_every", t.w2_every.to_string());
    kv("w2_samples", t.w2_samples.to_string());
    kv("mode_radius", fmt_f(t.mode_radius));
    kv("final_samples", r.final_samples.to_string());
    kv("timing", r.timing.to_string());
    s
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_benchmark_table() {
        // gmm25
        let r = resolve(&RawOpts::default()).unwrap();
        assert_eq!(r.train.t_scale, 5.0);
        assert_eq!(r.train.batch, 300);
        assert_eq!(r.train.t_steps, 100);
        assert_eq!(r.train.buffer_capacity, 600_000);
        assert_eq!(r.train.iterations, 5000);
        assert!(matches!(r.train.prioritization, Prioritization::Rank { k } if k == 0.01));
        // funnel / manywell get σ² = 1
        for e in ["funnel", "manywell"] {
            let o = RawOpts {
                energy: Some(e.into()),
                ..Default::default()
            };
            assert_eq!(resolve(&o).unwrap().train.t_scale, 1.0);
        }
        // local-search defaults
        let o = RawOpts {
            local_search: true,
            exploratory: true,
            ..Default::default()
        };
        let r = resolve(&o).unwrap();
        let ls = r.train.local_search.unwrap();
        assert_eq!(ls.mala.step_size, 0.01);
        assert_eq!(ls.mala.target_acceptance, 0.574);
        assert_eq!(ls.mala.steps, 200);
        assert_eq!(ls.mala.burn_in, 100);
        assert_eq!(ls.refresh_period, 100);
        let expl = r.train.exploration.unwrap();
        assert_eq!(expl.initial, 0.2);
        assert_eq!(expl.horizon, 2500);
        // langevin halves the default run length
        let o = RawOpts {
            langevin: true,
            ..Default::default()
        };
        assert_eq!(resolve(&o).unwrap().train.iterations, 2000);
    }

    #[test]
    fn manifest_round_trips_through_the_config_parser() {
        let o = RawOpts {
            energy: Some("manywell".into()),
            dim: Some(8),
            local_search: true,
            exploratory: true,
            seed: Some(7),
            ..Default::default()
        };
        let r = resolve(&o).unwrap();
        let body = to_manifest_body(&r);
        let dir = std::env::temp_dir().join(format!("opts_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.cfg");
        std::fs::write(&path, &body).unwrap();
        let parsed = RawOpts::from_config_file(&path).unwrap();
        let r2 = resolve(&parsed).unwrap();
        assert_eq!(r.train, r2.train);
        assert_eq!(to_manifest_body(&r2), body);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn cli_overrides_file() {
        let dir = std::env::temp_dir().join(format!("opts_test2_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("base.cfg");
        std::fs::write(&path, "batch = 64\nseed = 5\n").unwrap();
        let mut cli = RawOpts {
            batch: Some(128),
            ..Default::default()
        };
        let file = RawOpts::from_config_file(&path).unwrap();
        cli.merge_under(&file);
        let r = resolve(&cli).unwrap();
        assert_eq!(r.train.batch, 128); // flag wins
        assert_eq!(r.train.seed, 5); // file fills the gap
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = std::env::temp_dir().join(format!("opts_test3_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.cfg");
        std::fs::write(&path, "no_such_flag = 3\n").unwrap();
        assert!(RawOpts::from_config_file(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
