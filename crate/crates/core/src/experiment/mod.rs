//! Seeded experiment runs, sweeps, isolated metric estimation and aggregate
//! reports. A [`RunConfig`] fully determines every output byte.

mod isolated;
mod report;
mod run;

pub use isolated::{isolated_run, run_isolated, AgentObjective, IsolatedSpec, IsolationLog};
pub use report::{report, t_interval, write_report_csv, ReportRow};
pub use run::{evaluate_encoder, run_experiment, train_run, RunOutput, RunReport, RunSummary, SweepEntry, SweepIndex};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{DfConfig, RepDistance};
use crate::learn::{metric_bound, Encoder, LatentModels, LossConfig, Normalization, OptimConfig, TrainState};
use crate::mdp::{random_exbmdp, sparsify_transitions, value_iteration, EmissionMode, ExBmdp, NoiseEmission, NoiseFamily, Policy};
use crate::noise::{build_projection, DEFAULT_MAX_RETRIES};
use crate::rng::{derive_seed, stream};

/// Salts for the independent random streams of one run.
pub(crate) mod streams {
    pub const INSTANCE: u64 = 1;
    pub const ENCODER: u64 = 2;
    pub const MODELS: u64 = 3;
    pub const ROLLOUT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const OOD: u64 = 7;
    pub const METRIC_ENCODER: u64 = 8;
    pub const METRIC_MODELS: u64 = 9;
    pub const METRIC_TRAIN: u64 = 10;
    pub const PROJECTION: u64 = 11;
    pub const METRIC_ROLLOUT: u64 = 12;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmissionConfig {
    pub mode: EmissionMode,
    pub noise: NoiseEmission,
    pub mu_a: f64,
    pub sigma_a: f64,
}

impl Default for EmissionConfig {
    fn default() -> Self {
        Self {
            mode: EmissionMode::Feature,
            noise: NoiseEmission::EmbedDiscrete { scale: 1.0 },
            mu_a: 0.0,
            sigma_a: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceConfig {
    /// Load the instance from a file instead of generating it.
    pub path: Option<PathBuf>,
    /// Generator seed; derived from the master seed when absent.
    pub seed: Option<u64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_noise: usize,
    pub noise: NoiseFamily,
    /// Successors kept per transition row; dense when absent.
    pub branching: Option<usize>,
    pub emission: EmissionConfig,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            path: None,
            seed: None,
            n_states: 6,
            n_actions: 2,
            n_noise: 8,
            noise: NoiseFamily::IidDiscrete,
            branching: None,
            emission: EmissionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum PolicySpec {
    Uniform,
    /// Uniform over the optimal actions of each task state, mixed with
    /// probability `eps` into the uniform policy. Always exo-free.
    EpsOptimal { eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum NormConfig {
    None,
    /// `c` defaults to the metric bound `c_R / (1 - c_T) * (R_max - R_min)`.
    MaxNorm { p: f64, c: Option<f64> },
    L2,
    LayerNorm { eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub normalization: NormConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden: vec![32], latent_dim: 8, normalization: NormConfig::None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 32, buffer_capacity: 10_000, optim: OptimConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Evaluate at step 0, every `every` steps and after the last step.
    pub every: u64,
    /// Use exact enumeration when emissions are deterministic.
    pub exact: bool,
    pub n_anchors: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub distance: RepDistance,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 1000, exact: true, n_anchors: 256, n_pos: 16, n_neg: 16, distance: RepDistance::L2 }
    }
}

impl EvalConfig {
    pub(crate) fn df_config(&self, seed: u64) -> DfConfig {
        DfConfig { n_anchors: self.n_anchors, n_pos: self.n_pos, n_neg: self.n_neg, distance: self.distance, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Noise scales: the Gaussian standard deviation, or the scale of an embedded discrete noise.
    pub sigmas: Vec<f64>,
    /// Gaussian noise dimensions.
    pub noise_dims: Vec<usize>,
    /// Master seeds; one run per seed.
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty() && self.noise_dims.is_empty() && self.seeds.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodConfig {
    pub shift_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub instance: InstanceConfig,
    pub policy: PolicySpec,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub ood: Option<OodConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            instance: InstanceConfig::default(),
            policy: PolicySpec::Uniform,
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            ood: None,
        }
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Field-by-field validation; the first violation is reported by name.
    pub fn check(&self) -> Result<()> {
        let i = &self.instance;
        if i.path.is_none() {
            for (name, v) in [("instance.n_states", i.n_states), ("instance.n_actions", i.n_actions), ("instance.n_noise", i.n_noise)] {
                if v == 0 {
                    return Err(config_err(name, "must be at least 1"));
                }
            }
        }
        if i.branching == Some(0) {
            return Err(config_err("instance.branching", "must be at least 1"));
        }
        match i.emission.noise {
            NoiseEmission::Gaussian { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => {
                return Err(config_err("instance.emission.noise.sigma", format!("must be finite and nonnegative, got {sigma}")))
            }
            NoiseEmission::EmbedDiscrete { scale } if !scale.is_finite() => {
                return Err(config_err("instance.emission.noise.scale", "must be finite"))
            }
            _ => {}
        }
        if let PolicySpec::EpsOptimal { eps } = self.policy {
            if !(0.0..=1.0).contains(&eps) {
                return Err(config_err("policy.eps", format!("must lie in [0, 1], got {eps}")));
            }
        }
        if self.encoder.latent_dim == 0 || self.encoder.hidden.contains(&0) {
            return Err(config_err("encoder", "layer widths must be positive"));
        }
        self.loss.check()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(config_err("train.batch_size", "must be positive"));
        }
        if t.buffer_capacity < t.batch_size {
            return Err(config_err("train.buffer_capacity", "must hold at least one batch"));
        }
        if !(t.optim.lr >= 0.0 && t.optim.lr.is_finite()) {
            return Err(config_err("train.optim.lr", "must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&t.optim.momentum) {
            return Err(config_err("train.optim.momentum", "must lie in [0, 1)"));
        }
        if self.eval.every == 0 {
            return Err(config_err("eval.every", "must be positive"));
        }
        if self.eval.n_anchors == 0 || self.eval.n_pos == 0 || self.eval.n_neg == 0 {
            return Err(config_err("eval", "sample counts must be positive"));
        }
        if self.sweep.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(config_err("sweep.sigmas", "entries must be finite and nonnegative"));
        }
        if !self.sweep.noise_dims.is_empty() && !matches!(i.emission.noise, NoiseEmission::Gaussian { .. }) {
            return Err(config_err("sweep.noise_dims", "needs Gaussian emission noise"));
        }
        Ok(())
    }

    pub(crate) fn stream_seed(&self, salt: u64) -> u64 {
        derive_seed(self.seed, salt)
    }

    /// The world this run trains in.
    pub fn build_instance(&self) -> Result<ExBmdp> {
        let i = &self.instance;
        if let Some(path) = &i.path {
            return ExBmdp::from_json(&std::fs::read_to_string(path)?);
        }
        let seed = i.seed.unwrap_or_else(|| self.stream_seed(streams::INSTANCE));
        let mut m = random_exbmdp(seed, i.n_states, i.n_actions, i.n_noise, i.noise);
        if let Some(b) = i.branching {
            sparsify_transitions(&mut m.task, b);
        }
        m.emission.mode = i.emission.mode;
        m.emission.noise = i.emission.noise;
        if i.emission.mode == EmissionMode::Projected {
            let n = m.emission.feature_dim();
            let k = m.emission.noise_dim(m.noise.n_noise);
            let pseed = derive_seed(seed, streams::PROJECTION);
            m.emission.projection = Some(build_projection(pseed, n, k, i.emission.mu_a, i.emission.sigma_a, DEFAULT_MAX_RETRIES)?);
        }
        Ok(m)
    }

    pub fn build_policy(&self, m: &ExBmdp) -> Result<Policy> {
        match self.policy {
            PolicySpec::Uniform => Ok(Policy::uniform(m.n_obs(), m.task.n_actions)),
            PolicySpec::EpsOptimal { eps } => eps_optimal_policy(m, eps),
        }
    }

    pub fn normalization(&self, m: &ExBmdp) -> Result<Normalization> {
        Ok(match self.encoder.normalization {
            NormConfig::None => Normalization::None,
            NormConfig::L2 => Normalization::L2,
            NormConfig::LayerNorm { eps } => Normalization::LayerNorm { eps },
            NormConfig::MaxNorm { p, c } => {
                let c = match c {
                    Some(c) => c,
                    None => {
                        let rewards = m.task.reward.iter().flatten();
                        let (lo, hi) = rewards.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));
                        metric_bound(self.loss.c_r, self.loss.c_t, lo, hi)
                    }
                };
                if !(c > 0.0) {
                    return Err(config_err("encoder.normalization.c", format!("resolved to {c}; needs a positive bound")));
                }
                Normalization::MaxNorm { c, p }
            }
        })
    }

    /// Fresh encoder and latent models from the given stream salts.
    pub(crate) fn init_state(&self, m: &ExBmdp, enc_salt: u64, model_salt: u64) -> Result<TrainState> {
        let mut dims = vec![m.obs_dim()];
        dims.extend(&self.encoder.hidden);
        dims.push(self.encoder.latent_dim);
        let enc = Encoder::new(dims, self.normalization(m)?, &mut stream(self.seed, enc_salt))?;
        let models = LatentModels::new(self.encoder.latent_dim, m.task.n_actions, &mut stream(self.seed, model_salt))?;
        Ok(TrainState::new(enc, models))
    }
}

/// `eps`-soft version of the optimal policy, identical across noise values.
pub fn eps_optimal_policy(m: &ExBmdp, eps: f64) -> Result<Policy> {
    let vi = value_iteration(&m.task, 1e-12)?;
    let na = m.task.n_actions;
    let per_state: Vec<Vec<f64>> = vi
        .optimal_actions
        .iter()
        .map(|best| {
            (0..na)
                .map(|a| eps / na as f64 + if best.contains(&a) { (1.0 - eps) / best.len() as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(Policy::from_state_table(m, &per_state))
}

pub(crate) fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
