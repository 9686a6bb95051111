//! Exact behavioral metrics (bisimulation, policy bisimulation, MICo) on finite
//! exogenous block MDPs, metric-learning losses with analytic gradients, and
//! the denoising-factor evaluation of learned encoders.
//!
//! The crate is organized bottom-up:
//!
//! * [`mdp`] finite EX-BMDPs, policies, grounded dynamics, stationary
//!   distributions and value iteration.
//! * [`noise`] emission-layer noise: random projections, sampling, OOD shifts.
//! * [`transport`] and [`kernels`] the exact 1-Wasserstein solver and every
//!   primitive distance used by the metrics and the losses.
//! * [`exact`] fixed-point computation of BSM, PBSM and MICo.
//! * [`learn`] encoders, latent models, replay buffer, losses and training.
//! * [`eval`] positive/negative scores and the denoising factor.
//! * [`verify`] numeric certificates for the denoising propositions.
//! * [`experiment`] seeded batch runs, isolated metric estimation, reports.

pub mod error;
pub mod eval;
pub mod exact;
pub mod experiment;
pub mod kernels;
pub mod learn;
pub mod linalg;
pub mod mdp;
pub mod noise;
pub mod rng;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
