//! Latent transition, reward and reward-variance models.
//!
//! All three heads are affine in the latent and share one flat parameter
//! vector. The transition head outputs a factorized Gaussian whose standard
//! deviation is `exp` of a clamped log-scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_SIGMA_MIN: f64 = -5.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModels {
    pub latent_dim: usize,
    pub n_actions: usize,
    pub params: Vec<f64>,
}

/// Gaussian prediction for the next latent.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    /// Which log-scales sit inside the clamp (and so carry gradient).
    active: Vec<bool>,
}

impl GaussianPrediction {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }
}

impl LatentModels {
    pub fn new<R: rand::Rng + ?Sized>(latent_dim: usize, n_actions: usize, rng: &mut R) -> Result<Self> {
        if latent_dim == 0 || n_actions == 0 {
            return Err(Error::Invalid("latent models need positive latent dim and action count".into()));
        }
        let k = latent_dim;
        let scale = 1.0 / (k as f64).sqrt();
        let mut m = Self { latent_dim, n_actions, params: vec![0.0; Self::count(k, n_actions)] };
        for a in 0..n_actions {
            let (mw, _, sw, _) = m.trans_offsets(a);
            for i in 0..k * k {
                // Start near the identity so the initial predictor is not degenerate.
                let diag = if i / k == i % k { 1.0 } else { 0.0 };
                m.params[mw + i] = diag + 0.1 * scale * rng.random_range(-1.0..1.0);
                m.params[sw + i] = 0.1 * scale * rng.random_range(-1.0..1.0);
            }
            let (rw, _) = m.reward_offsets(a);
            for i in 0..k {
                m.params[rw + i] = scale * rng.random_range(-1.0..1.0);
            }
        }
        let (mw, _, lw, _) = m.rap_offsets();
        for i in 0..k {
            m.params[mw + i] = scale * rng.random_range(-1.0..1.0);
            m.params[lw + i] = 0.1 * scale * rng.random_range(-1.0..1.0);
        }
        Ok(m)
    }

    fn count(k: usize, a: usize) -> usize {
        a * (2 * k * k + 2 * k) + a * (k + 1) + 2 * (k + 1)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// `(mu_w, mu_b, log_sigma_w, log_sigma_b)` offsets for action `a`.
    fn trans_offsets(&self, a: usize) -> (usize, usize, usize, usize) {
        let k = self.latent_dim;
        let base = a * (2 * k * k + 2 * k);
        (base, base + k * k, base + k * k + k, base + 2 * k * k + k)
    }

    fn reward_offsets(&self, a: usize) -> (usize, usize) {
        let k = self.latent_dim;
        let base = self.n_actions * (2 * k * k + 2 * k) + a * (k + 1);
        (base, base + k)
    }

    /// `(mean_w, mean_b, logvar_w, logvar_b)` of the reward-variance head.
    fn rap_offsets(&self) -> (usize, usize, usize, usize) {
        let k = self.latent_dim;
        let base = self.n_actions * (2 * k * k + 2 * k) + self.n_actions * (k + 1);
        (base, base + k, base + k + 1, base + 2 * k + 1)
    }

    fn affine(&self, w: usize, b: usize, rows: usize, psi: &[f64]) -> Vec<f64> {
        let k = self.latent_dim;
        (0..rows)
            .map(|o| self.params[b + o] + (0..k).map(|i| self.params[w + o * k + i] * psi[i]).sum::<f64>())
            .collect()
    }

    /// Accumulate parameter gradients of `out = W psi + b` and return `d/dpsi`.
    fn affine_backward(&self, w: usize, b: usize, rows: usize, psi: &[f64], g: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let k = self.latent_dim;
        let mut g_psi = vec![0.0; k];
        for o in 0..rows {
            if g[o] == 0.0 {
                continue;
            }
            grad[b + o] += g[o];
            for i in 0..k {
                grad[w + o * k + i] += g[o] * psi[i];
                g_psi[i] += g[o] * self.params[w + o * k + i];
            }
        }
        g_psi
    }

    pub fn transition(&self, psi: &[f64], a: usize) -> GaussianPrediction {
        let k = self.latent_dim;
        let (mw, mb, sw, sb) = self.trans_offsets(a);
        let mu = self.affine(mw, mb, k, psi);
        let raw = self.affine(sw, sb, k, psi);
        let active = raw.iter().map(|v| (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(v)).collect();
        let log_sigma = raw.iter().map(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)).collect();
        GaussianPrediction { mu, log_sigma, active }
    }

    pub fn transition_backward(
        &self,
        psi: &[f64],
        a: usize,
        pred: &GaussianPrediction,
        g_mu: &[f64],
        g_log_sigma: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let k = self.latent_dim;
        let (mw, mb, sw, sb) = self.trans_offsets(a);
        let g_raw: Vec<f64> = g_log_sigma
            .iter()
            .zip(&pred.active)
            .map(|(g, &on)| if on { *g } else { 0.0 })
            .collect();
        let mut g_psi = self.affine_backward(mw, mb, k, psi, g_mu, grad);
        for (a, b) in g_psi.iter_mut().zip(self.affine_backward(sw, sb, k, psi, &g_raw, grad)) {
            *a += b;
        }
        g_psi
    }

    pub fn reward(&self, psi: &[f64], a: usize) -> f64 {
        let (w, b) = self.reward_offsets(a);
        self.affine(w, b, 1, psi)[0]
    }

    pub fn reward_backward(&self, psi: &[f64], a: usize, g: f64, grad: &mut [f64]) -> Vec<f64> {
        let (w, b) = self.reward_offsets(a);
        self.affine_backward(w, b, 1, psi, &[g], grad)
    }

    /// Reward mean and log-variance predicted from the latent alone.
    pub fn reward_moments(&self, psi: &[f64]) -> (f64, f64) {
        let (mw, mb, lw, lb) = self.rap_offsets();
        (self.affine(mw, mb, 1, psi)[0], self.affine(lw, lb, 1, psi)[0])
    }

    pub fn reward_moments_backward(&self, psi: &[f64], g_mean: f64, g_logvar: f64, grad: &mut [f64]) -> Vec<f64> {
        let (mw, mb, lw, lb) = self.rap_offsets();
        let mut g = self.affine_backward(mw, mb, 1, psi, &[g_mean], grad);
        for (a, b) in g.iter_mut().zip(self.affine_backward(lw, lb, 1, psi, &[g_logvar], grad)) {
            *a += b;
        }
        g
    }
}
