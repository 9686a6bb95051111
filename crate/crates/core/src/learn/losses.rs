//! Metric, latent self-prediction (ZP) and reward-prediction (RP) losses with
//! analytic gradients.
//!
//! Every loss is a batch mean. Bootstrapped targets are computed with the
//! target encoder and treated as constants; gradients flow only through the
//! online encoder and the latent models on the prediction side.

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    cosine_distance, cosine_distance_grad, dbc_transition_dist, dbcn_transition_dist, huber_scalar, huber_scalar_grad,
    mico_u, mico_u_grad, reward_distance, scaled_huber, scaled_huber_grad, RewardDistance,
};

use super::buffer::Transition;
use super::encoder::Encoder;
use super::models::LatentModels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricVariant {
    Dbc,
    DbcNormed,
    Mico,
    Simsr,
    Rap,
    None,
}

impl MetricVariant {
    pub const ALL: [MetricVariant; 5] = [Self::Dbc, Self::DbcNormed, Self::Mico, Self::Simsr, Self::Rap];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dbc => "dbc",
            Self::DbcNormed => "dbc-normed",
            Self::Mico => "mico",
            Self::Simsr => "simsr",
            Self::Rap => "rap",
            Self::None => "none",
        }
    }

    pub fn default_outer(&self) -> OuterLoss {
        match self {
            Self::Dbc | Self::DbcNormed => OuterLoss::Mse,
            _ => OuterLoss::Huber,
        }
    }
}

impl std::str::FromStr for MetricVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dbc" => Self::Dbc,
            "dbc-normed" => Self::DbcNormed,
            "mico" => Self::Mico,
            "simsr" => Self::Simsr,
            "rap" => Self::Rap,
            "none" => Self::None,
            other => return Err(Error::Invalid(format!("unknown metric variant `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterLoss {
    Mse,
    Huber,
}

impl OuterLoss {
    fn value_grad(&self, delta: f64) -> (f64, f64) {
        match self {
            Self::Mse => (delta * delta, 2.0 * delta),
            Self::Huber => (huber_scalar(delta), huber_scalar_grad(delta)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub variant: MetricVariant,
    /// Overrides the variant's own outer loss when set.
    pub outer_loss: Option<OuterLoss>,
    pub lambda_m: f64,
    pub lambda_zp: f64,
    pub lambda_rp: f64,
    pub c_r: f64,
    pub c_t: f64,
    pub use_target_trick: bool,
    pub tau: f64,
    pub beta_mico: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: MetricVariant::Dbc,
            outer_loss: None,
            lambda_m: 0.5,
            lambda_zp: 1.0,
            lambda_rp: 1.0,
            c_r: 1.0,
            c_t: 0.99,
            use_target_trick: true,
            tau: 0.05,
            beta_mico: 0.1,
        }
    }
}

impl LossConfig {
    pub fn outer(&self) -> OuterLoss {
        self.outer_loss.unwrap_or_else(|| self.variant.default_outer())
    }

    pub fn check(&self) -> Result<()> {
        let field = |name: &str, reason: String| Error::Config { field: name.into(), reason };
        for (name, v) in [
            ("lambda_m", self.lambda_m),
            ("lambda_zp", self.lambda_zp),
            ("lambda_rp", self.lambda_rp),
            ("c_r", self.c_r),
            ("beta_mico", self.beta_mico),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be finite and nonnegative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.c_t) {
            return Err(field("c_t", format!("must lie in [0, 1), got {}", self.c_t)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(field("tau", format!("must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// Columns of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Vec<f64>>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Self {
        Self {
            obs: ts.iter().map(|t| t.obs.clone()).collect(),
            actions: ts.iter().map(|t| t.action).collect(),
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_obs: ts.iter().map(|t| t.next_obs.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Randomness consumed by one metric-loss evaluation, drawn up front so the
/// loss is a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPlan {
    /// Sample `i` is paired with sample `perm[i]`.
    pub perm: Vec<usize>,
    /// Standard normal draws for sampled next latents, one row per sample.
    pub eps: Vec<Vec<f64>>,
}

impl PairPlan {
    pub fn draw<R: rand::Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let eps = (0..n).map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect()).collect();
        Self { perm, eps }
    }

    pub fn identity(n: usize, k: usize) -> Self {
        Self { perm: (0..n).collect(), eps: vec![vec![0.0; k]; n] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub encoder: Vec<f64>,
    pub models: Vec<f64>,
}

impl Grads {
    pub fn zeros(enc: &Encoder, models: &LatentModels) -> Self {
        Self { encoder: vec![0.0; enc.n_params()], models: vec![0.0; models.n_params()] }
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            *a += s * b;
        }
        for (a, b) in self.models.iter_mut().zip(&other.models) {
            *a += s * b;
        }
    }

    pub fn encoder_norm(&self) -> f64 {
        self.encoder.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Grads,
}

fn check_batch(batch: &Batch, enc: &Encoder, models: &LatentModels) -> Result<()> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    if batch.actions.len() != n || batch.rewards.len() != n || batch.next_obs.len() != n {
        return Err(Error::Shape("batch columns differ in length".into()));
    }
    if enc.latent_dim() != models.latent_dim {
        return Err(Error::Shape(format!(
            "encoder latent dim {} but models expect {}",
            enc.latent_dim(),
            models.latent_dim
        )));
    }
    if let Some(&a) = batch.actions.iter().find(|&&a| a >= models.n_actions) {
        return Err(Error::Invalid(format!("action {a} out of range")));
    }
    Ok(())
}

fn encode_all(enc: &Encoder, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    xs.iter().map(|x| enc.encode(x)).collect()
}

/// `J_M`: mean outer loss between the representation distance of each pair and
/// its bootstrapped target. RAP adds the reward-moment negative log-likelihood.
///
/// Targets read `target` and `target_models`, both treated as constants; in
/// training `target_models` is the live model set, seen through a detach.
pub fn metric_loss(
    online: &Encoder,
    target: &Encoder,
    models: &LatentModels,
    target_models: &LatentModels,
    batch: &Batch,
    plan: &PairPlan,
    cfg: &LossConfig,
) -> Result<LossValue> {
    if cfg.variant == MetricVariant::None {
        return Err(Error::Config { field: "variant".into(), reason: "metric loss requested with variant none".into() });
    }
    check_batch(batch, online, models)?;
    let n = batch.len();
    if plan.perm.len() != n || plan.eps.len() != n {
        return Err(Error::Shape(format!("pair plan covers {} samples, batch has {n}", plan.perm.len())));
    }
    let k = online.latent_dim();
    let traces = batch.obs.iter().map(|x| online.forward(x)).collect::<Result<Vec<_>>>()?;
    let psi: Vec<&[f64]> = traces.iter().map(|t| t.out.as_slice()).collect();
    let bar = encode_all(target, &batch.obs)?;
    let needs_next = matches!(cfg.variant, MetricVariant::Mico);
    let bar_next = if needs_next { encode_all(target, &batch.next_obs)? } else { Vec::new() };
    let preds: Vec<_> = (0..n).map(|i| target_models.transition(&bar[i], batch.actions[i])).collect();

    let outer = cfg.outer();
    let mut g_psi = vec![vec![0.0; k]; n];
    let mut grads = Grads::zeros(online, models);
    let mut total = 0.0;
    for i in 0..n {
        let j = plan.perm[i];
        let (r1, r2) = (batch.rewards[i], batch.rewards[j]);
        let (pred, gi, gj) = match cfg.variant {
            MetricVariant::Dbc | MetricVariant::DbcNormed => (
                scaled_huber(psi[i], psi[j])?,
                scaled_huber_grad(psi[i], psi[j]),
                scaled_huber_grad(psi[j], psi[i]),
            ),
            MetricVariant::Mico | MetricVariant::Rap => (
                mico_u(psi[i], psi[j], cfg.beta_mico)?,
                mico_u_grad(psi[i], psi[j], cfg.beta_mico),
                mico_u_grad(psi[j], psi[i], cfg.beta_mico),
            ),
            MetricVariant::Simsr => (
                cosine_distance(psi[i], psi[j]),
                cosine_distance_grad(psi[i], psi[j]),
                cosine_distance_grad(psi[j], psi[i]),
            ),
            MetricVariant::None => unreachable!(),
        };
        let (si, sj) = (preds[i].sigma(), preds[j].sigma());
        let target_value = match cfg.variant {
            MetricVariant::Dbc => {
                cfg.c_r * reward_distance(r1, r2, RewardDistance::Huber)
                    + cfg.c_t * dbc_transition_dist(&preds[i].mu, &si, &preds[j].mu, &sj)?
            }
            MetricVariant::DbcNormed => {
                cfg.c_r * reward_distance(r1, r2, RewardDistance::Huber)
                    + cfg.c_t * dbcn_transition_dist(&preds[i].mu, &si, &preds[j].mu, &sj)?
            }
            MetricVariant::Mico => {
                cfg.c_r * reward_distance(r1, r2, RewardDistance::Abs)
                    + cfg.c_t * mico_u(&bar_next[i], &bar_next[j], cfg.beta_mico)?
            }
            MetricVariant::Simsr => {
                let sample = |p: &super::models::GaussianPrediction, s: &[f64], e: &[f64]| -> Vec<f64> {
                    (0..k).map(|d| p.mu[d] + s[d] * e[d]).collect()
                };
                let (yi, yj) = (sample(&preds[i], &si, &plan.eps[i]), sample(&preds[j], &sj, &plan.eps[j]));
                cfg.c_r * reward_distance(r1, r2, RewardDistance::Abs) + cfg.c_t * cosine_distance(&yi, &yj)
            }
            MetricVariant::Rap => {
                let (var1, var2) = (target_models.reward_moments(&bar[i]).1.exp(), target_models.reward_moments(&bar[j]).1.exp());
                cfg.c_r * reward_distance(r1, r2, RewardDistance::Rap { var1, var2 })
                    + cfg.c_t * dbc_transition_dist(&preds[i].mu, &si, &preds[j].mu, &sj)?
            }
            MetricVariant::None => unreachable!(),
        };
        let (l, dl) = outer.value_grad(pred - target_value);
        total += l / n as f64;
        let s = dl / n as f64;
        for d in 0..k {
            g_psi[i][d] += s * gi[d];
            g_psi[j][d] += s * gj[d];
        }
    }

    if cfg.variant == MetricVariant::Rap {
        // Gaussian NLL of the observed reward under the online reward-moment head.
        for i in 0..n {
            let (mean, logvar) = models.reward_moments(psi[i]);
            let resid = batch.rewards[i] - mean;
            let inv = (-logvar).exp();
            total += 0.5 * (logvar + resid * resid * inv) / n as f64;
            let g_mean = -resid * inv / n as f64;
            let g_logvar = 0.5 * (1.0 - resid * resid * inv) / n as f64;
            let gp = models.reward_moments_backward(psi[i], g_mean, g_logvar, &mut grads.models);
            for d in 0..k {
                g_psi[i][d] += gp[d];
            }
        }
    }

    for (t, g) in traces.iter().zip(&g_psi) {
        online.backward(t, g, &mut grads.encoder);
    }
    Ok(LossValue { value: total, grads })
}

/// `J_ZP`: negative Gaussian log-likelihood of the target encoding of the next
/// observation under the transition model applied to the online encoding.
/// With `detach_encoder` the encoder receives no gradient at all.
pub fn zp_loss(
    online: &Encoder,
    target: &Encoder,
    models: &LatentModels,
    batch: &Batch,
    detach_encoder: bool,
) -> Result<LossValue> {
    check_batch(batch, online, models)?;
    let n = batch.len() as f64;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut grads = Grads::zeros(online, models);
    let mut total = 0.0;
    for i in 0..batch.len() {
        let trace = online.forward(&batch.obs[i])?;
        let y = target.encode(&batch.next_obs[i])?;
        let a = batch.actions[i];
        let p = models.transition(&trace.out, a);
        let mut g_mu = Vec::with_capacity(y.len());
        let mut g_ls = Vec::with_capacity(y.len());
        for d in 0..y.len() {
            let inv = (-p.log_sigma[d]).exp();
            let z = (y[d] - p.mu[d]) * inv;
            total += (p.log_sigma[d] + half_log_2pi + 0.5 * z * z) / n;
            g_mu.push(-z * inv / n);
            g_ls.push((1.0 - z * z) / n);
        }
        let g_psi = models.transition_backward(&trace.out, a, &p, &g_mu, &g_ls, &mut grads.models);
        if !detach_encoder {
            online.backward(&trace, &g_psi, &mut grads.encoder);
        }
    }
    Ok(LossValue { value: total, grads })
}

/// `J_RP`: mean squared reward-prediction error.
pub fn rp_loss(online: &Encoder, models: &LatentModels, batch: &Batch) -> Result<LossValue> {
    check_batch(batch, online, models)?;
    let n = batch.len() as f64;
    let mut grads = Grads::zeros(online, models);
    let mut total = 0.0;
    for i in 0..batch.len() {
        let trace = online.forward(&batch.obs[i])?;
        let a = batch.actions[i];
        let resid = models.reward(&trace.out, a) - batch.rewards[i];
        total += resid * resid / n;
        let g_psi = models.reward_backward(&trace.out, a, 2.0 * resid / n, &mut grads.models);
        online.backward(&trace, &g_psi, &mut grads.encoder);
    }
    Ok(LossValue { value: total, grads })
}
