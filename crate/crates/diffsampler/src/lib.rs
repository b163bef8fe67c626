//! Diffusion-structured samplers for unnormalized target densities.
//!
//! A sampler is a discretized neural SDE: a Gaussian forward policy driven
//! by a learned drift (optionally a Langevin-parametrized one) simulated by
//! Euler–Maruyama against a fixed noising process (discretized Brownian
//! bridge or variance-preserving schedule). Training objectives include
//! trajectory balance, VarGrad, subtrajectory balance with forward-looking
//! flows, and the on-policy reverse-KL (PIS) objective, with off-policy
//! exploration via variance noise and local search (adaptive parallel MALA
//! feeding a rank-prioritized replay buffer).
//!
//! The compute-heavy loops run data-parallel over batch chunks behind the
//! `parallel` feature (rayon), with a bit-identical sequential fallback.

pub mod dynamics;
pub mod energies;
pub mod error;
pub mod evalx;
pub mod exec;
pub mod explore;
pub mod linalg;
pub mod ndgrad;
pub mod objectives;
pub mod rngs;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
