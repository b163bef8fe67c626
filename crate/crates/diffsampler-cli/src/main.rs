//! diffsampler: train and evaluate neural samplers for unnormalized
//! target densities.
//!
//! Exit codes: 0 success, 2 flag/config errors, 1 runtime failures.

mod opts;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use diffsampler::evalx::log_z_estimates;
use diffsampler::exec::Parallelism;
use diffsampler::rngs::{stream, Domain};
use diffsampler::trainer::{EvalRow, RunReport, Trainer};

use opts::{resolve, RawOpts, Resolved};
use outputs::OutDir;

#[derive(Parser)]
#[command(name = "diffsampler", version, about, rename_all = "snake_case")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[command(rename_all = "snake_case")]
enum Command {
    /// Train a sampler and write metrics, samples, and a checkpoint.
    Train {
        /// Read defaults from a `key = value` config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        opts: RawOpts,
    },
    /// Evaluate a finished run directory (manifest + checkpoint).
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run_dir: PathBuf,
        /// Where to write evaluation outputs (defaults to the run directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the evaluation sample count.
        #[arg(long)]
        eval_samples: Option<usize>,
        /// Evaluation seed stream index.
        #[arg(long, default_value_t = 0)]
        eval_index: u64,
    },
    /// Train a named benchmark preset (desk-scale defaults).
    Reproduce {
        /// One of: gmm25-tb, gmm25-tb-expl, gmm25-tb-expl-ls, funnel-tb,
        /// manywell-tb-expl-ls, manywell8-tb-expl, manywell8-tb-expl-lp,
        /// gauss1d-tb
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the preset's iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // configuration problems exit 2, runtime failures exit 1
            if e.downcast_ref::<diffsampler::Error>().map_or_else(
                || e.to_string().starts_with("config"),
                |de| matches!(de, diffsampler::Error::Config(_)),
            ) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out_dir,
            mut opts,
        } => {
            if let Some(path) = config {
                let file = RawOpts::from_config_file(&path).map_err(config_err)?;
                opts.merge_under(&file);
            }
            let resolved = resolve(&opts).map_err(config_err)?;
            train_run(&resolved, &out_dir)
        }
        Command::Eval {
            run_dir,
            out_dir,
            eval_samples,
            eval_index,
        } => {
            let manifest = run_dir.join("manifest.txt");
            let file = RawOpts::from_config_file(&manifest).map_err(config_err)?;
            let resolved = resolve(&file).map_err(config_err)?;
            let k = eval_samples.unwrap_or(resolved.train.eval_samples);
            eval_run(
                &resolved,
                &run_dir,
                out_dir.as_deref().unwrap_or(&run_dir),
                eval_index,
                k,
            )
        }
        Command::Reproduce {
            preset,
            out_dir,
            seed,
            iterations,
        } => {
            let mut opts = preset_opts(&preset).map_err(config_err)?;
            opts.seed = seed.or(opts.seed);
            opts.iterations = iterations.or(opts.iterations);
            let resolved = resolve(&opts).map_err(config_err)?;
            train_run(&resolved, &out_dir)
        }
    }
}

/// Mark an error as a configuration problem (exit code 2).
fn config_err(e: anyhow::Error) -> anyhow::Error {
    match e.downcast::<diffsampler::Error>() {
        Ok(de) => anyhow::Error::from(match de {
            diffsampler::Error::Config(msg) => diffsampler::Error::Config(msg),
            other => diffsampler::Error::Config(other.to_string()),
        }),
        Err(e) => anyhow::Error::from(diffsampler::Error::Config(format!("{e:#}"))),
    }
}

fn preset_opts(name: &str) -> Result<RawOpts> {
    let mut o = RawOpts::default();
    match name {
        "gmm25-tb" => {
            o.energy = Some("gmm25".into());
        }
        "gmm25-tb-expl" => {
            o.energy = Some("gmm25".into());
            o.exploratory = true;
        }
        "gmm25-tb-expl-ls" => {
            o.energy = Some("gmm25".into());
            o.exploratory = true;
            o.local_search = true;
        }
        "funnel-tb" => {
            o.energy = Some("funnel".into());
        }
        "manywell-tb-expl-ls" => {
            o.energy = Some("manywell".into());
            o.exploratory = true;
            o.local_search = true;
        }
        "manywell8-tb-expl" => {
            o.energy = Some("manywell".into());
            o.dim = Some(8);
            o.exploratory = true;
        }
        "manywell8-tb-expl-lp" => {
            o.energy = Some("manywell".into());
            o.dim = Some(8);
            o.exploratory = true;
            o.langevin = true;
        }
        "gauss1d-tb" => {
            o.energy = Some("gauss1d".into());
            o.iterations = Some(2000);
            o.batch = Some(64);
        }
        other => return Err(anyhow!("unknown preset '{other}' (see --help)")),
    }
    Ok(o)
}

fn train_run(resolved: &Resolved, out_dir: &std::path::Path) -> Result<()> {
    let out = OutDir::create(out_dir)?;
    let body = opts::to_manifest_body(resolved);
    out.write("manifest.txt", outputs::manifest_text(&body).as_bytes())?;

    let mut trainer = Trainer::new(resolved.train.clone()).map_err(anyhow::Error::from)?;
    eprintln!(
        "training {} / {} on '{}' for {} iterations (T={}, batch={}, seed={})",
        resolved.train.objective.name(),
        if resolved.train.local_search.is_some() {
            "local-search"
        } else {
            "forward"
        },
        resolved.train.energy,
        resolved.train.iterations,
        resolved.train.t_steps,
        resolved.train.batch,
        resolved.train.seed,
    );
    trainer.progress = Some(Box::new(log_row));
    let report = trainer.run().map_err(anyhow::Error::from)?;

    emit_outputs(&out, &report, &trainer, resolved)?;
    trainer
        .save_checkpoint(&out.path("run.ckpt"))
        .map_err(anyhow::Error::from)?;
    eprintln!("wrote {}", out.dir.display());
    Ok(())
}

fn log_row(row: &EvalRow) {
    eprintln!(
        "iter {:>6}  loss {:>12.5}  logZ̃ {}  logẐ {:>9.4}  logẐ_RW {:>9.4}  modes {}  drops {}  [{} ms]",
        row.iteration,
        row.loss,
        row.log_z_theta.map_or("    -".into(), |v| format!("{v:>9.4}")),
        row.log_z_hat,
        row.log_z_rw,
        row.mode_count.map_or("-".into(), |v| v.to_string()),
        row.nan_drops,
        row.wall_ms,
    );
}

/// Final artifacts: metrics.csv, samples.bin, scatter.svg.
fn emit_outputs(
    out: &OutDir,
    report: &RunReport,
    trainer: &Trainer,
    resolved: &Resolved,
) -> Result<()> {
    out.write(
        "metrics.csv",
        outputs::metrics_csv(report, resolved.timing).as_bytes(),
    )?;
    // final samples from the trained policy, drawn from the one-past-end
    // evaluation stream so they never collide with training draws
    let mut rng = stream(
        resolved.train.seed,
        Domain::Eval,
        resolved.train.iterations as u64,
    );
    let (_, _, samples) = log_z_estimates(
        &trainer.policy,
        &trainer.backward,
        &trainer.energy,
        &trainer.grid,
        resolved.final_samples,
        &mut rng,
        Parallelism::auto(),
    )
    .map_err(anyhow::Error::from)?;
    out.write("samples.bin", &outputs::samples_bin(&samples))?;
    out.write("scatter.svg", outputs::scatter_svg(&samples).as_bytes())?;
    Ok(())
}

fn eval_run(
    resolved: &Resolved,
    run_dir: &std::path::Path,
    out_dir: &std::path::Path,
    eval_index: u64,
    eval_samples: usize,
) -> Result<()> {
    let trainer = Trainer::restore_checkpoint(resolved.train.clone(), &run_dir.join("run.ckpt"))
        .map_err(anyhow::Error::from)?;
    let out = OutDir::create(out_dir)?;
    let mut rng = stream(
        resolved.train.seed,
        Domain::Eval,
        resolved.train.iterations as u64 + 1 + eval_index,
    );
    let started = std::time::Instant::now();
    let (lb, rw, samples) = log_z_estimates(
        &trainer.policy,
        &trainer.backward,
        &trainer.energy,
        &trainer.grid,
        eval_samples,
        &mut rng,
        Parallelism::auto(),
    )
    .map_err(anyhow::Error::from)?;
    let mode_count = trainer
        .energy
        .mode_centers()
        .map(|c| diffsampler::evalx::mode_coverage(&samples, &c, resolved.train.mode_radius));
    let n = resolved.train.w2_samples.min(samples.rows);
    let mut xrng = stream(
        resolved.train.seed,
        Domain::ExactSampler,
        u64::MAX - eval_index,
    );
    let w2_sq = trainer
        .energy
        .sample_exact(n, &mut xrng)
        .map(|reference| diffsampler::evalx::wasserstein2_sq(&samples.slice_rows(0, n), &reference))
        .transpose()
        .map_err(anyhow::Error::from)?;
    let row = EvalRow {
        iteration: trainer.iteration(),
        wall_ms: started.elapsed().as_millis() as u64,
        loss: f64::NAN,
        log_z_theta: trainer.log_z_value(),
        log_z_hat: lb,
        log_z_rw: rw,
        w2_sq,
        mode_count,
        nan_drops: 0,
        eta: 0.0,
        buffer_len: 0,
        ls_buffer_len: 0,
    };
    log_row(&row);
    if let Some(lz) = trainer.energy.log_z() {
        eprintln!(
            "true log Z = {lz:.6}; Δlog Ẑ = {:.4}, Δlog Ẑ_RW = {:.4}",
            (lb - lz).abs(),
            (rw - lz).abs()
        );
    }
    let report = RunReport {
        rows: vec![row],
        ..Default::default()
    };
    out.write(
        "metrics.csv",
        outputs::metrics_csv(&report, resolved.timing).as_bytes(),
    )?;
    out.write("samples.bin", &outputs::samples_bin(&samples))?;
    out.write("scatter.svg", outputs::scatter_svg(&samples).as_bytes())?;
    let _ = Arc::strong_count(&trainer.energy);
    Ok(())
}
