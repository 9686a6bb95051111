//! Positive score, negative score and the denoising factor.
//!
//! Anchors come from the stationary distribution of the latent chain under the
//! policy. Positives keep the anchor's task state and redraw the noise from the
//! chain's resampling distribution; negatives are independent draws from the
//! same stationary distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::Encoder;
use crate::linalg::one_hot;
use crate::mdp::{stationary_distribution, ExBmdp, Policy};
use crate::rng::{sample_index, stream, Rng};

/// `pos + neg` below this gives `df = 0`.
pub const DF_EPS: f64 = 1e-12;

/// A map from a latent pair `(s, xi)` to a representation. Implementations
/// that stand for learned encoders must only look at the emitted observation.
pub trait Representation: Sync {
    fn embed(&self, m: &ExBmdp, state: usize, noise: usize, rng: &mut Rng) -> Result<Vec<f64>>;
}

/// `phi*` as a one-hot vector over task states.
pub struct Oracle;

impl Representation for Oracle {
    fn embed(&self, m: &ExBmdp, state: usize, _noise: usize, _rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(one_hot(m.task.n_states, state))
    }
}

pub struct Constant(pub Vec<f64>);

impl Representation for Constant {
    fn embed(&self, _m: &ExBmdp, _s: usize, _xi: usize, _rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// Reads only the noise block of the unprojected observation.
pub struct NoiseOnly;

impl Representation for NoiseOnly {
    fn embed(&self, m: &ExBmdp, state: usize, noise: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let z = m.latent_vector(state, noise, rng);
        Ok(z[m.emission.feature_dim()..].to_vec())
    }
}

/// Fixed embedding per observation index.
pub struct Table(pub Vec<Vec<f64>>);

impl Representation for Table {
    fn embed(&self, m: &ExBmdp, state: usize, noise: usize, _rng: &mut Rng) -> Result<Vec<f64>> {
        self.0
            .get(m.obs_index(state, noise))
            .cloned()
            .ok_or_else(|| Error::Shape(format!("table has {} rows, needs {}", self.0.len(), m.n_obs())))
    }
}

/// `c * phi`.
pub struct Scaled<'a>(pub f64, pub &'a dyn Representation);

impl Representation for Scaled<'_> {
    fn embed(&self, m: &ExBmdp, state: usize, noise: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.1.embed(m, state, noise, rng)?.into_iter().map(|v| self.0 * v).collect())
    }
}

impl Representation for Encoder {
    fn embed(&self, m: &ExBmdp, state: usize, noise: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        self.encode(&m.observation_vector(state, noise, rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepDistance {
    L2,
    L1,
}

impl RepDistance {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Self::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::L2 => "l2",
            Self::L1 => "l1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DfConfig {
    pub n_anchors: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub distance: RepDistance,
    pub seed: u64,
}

impl Default for DfConfig {
    fn default() -> Self {
        Self { n_anchors: 256, n_pos: 16, n_neg: 16, distance: RepDistance::L2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pos: f64,
    pub neg: f64,
    pub df: f64,
    pub n_anchors: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub d_psi_kind: String,
    /// True when the scores are exact expectations rather than sample means.
    pub exact: bool,
}

impl EvalReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(self)?;
        w.flush()?;
        Ok(())
    }
}

/// `(neg - pos) / (neg + pos)`, or 0 when both vanish.
pub fn df_from_scores(pos: f64, neg: f64) -> f64 {
    if pos + neg < DF_EPS {
        0.0
    } else {
        (neg - pos) / (neg + pos)
    }
}

/// Stationary distribution over latent indices `x = s * n_noise + xi`.
pub fn anchor_distribution(m: &ExBmdp, pi: &Policy) -> Result<Vec<f64>> {
    let report = pi.validate(m.n_obs(), m.task.n_actions);
    if !report.is_empty() {
        return Err(Error::Invalid(report.issues.join("; ")));
    }
    let p = m.latent_transition();
    let n = m.n_obs();
    let chain: Vec<Vec<f64>> = (0..n)
        .map(|x| {
            let mut row = vec![0.0; n];
            for (a, &w) in pi.table[x].iter().enumerate() {
                if w > 0.0 {
                    for (r, v) in row.iter_mut().zip(&p[x][a]) {
                        *r += w * v;
                    }
                }
            }
            row
        })
        .collect();
    stationary_distribution(&chain, 1e-13, 1_000_000)
}

fn check_noise(m: &ExBmdp) -> Result<()> {
    let continuous = matches!(m.emission.noise, crate::mdp::NoiseEmission::Gaussian { dim, .. } if dim > 0)
        && m.emission.mode != crate::mdp::EmissionMode::Tabular;
    if m.noise.n_noise < 2 && !continuous {
        return Err(Error::Precondition("the denoising factor needs at least two noise values".into()));
    }
    Ok(())
}

fn make_report(pos: f64, neg: f64, cfg: &DfConfig, exact: bool) -> EvalReport {
    EvalReport {
        pos,
        neg,
        df: df_from_scores(pos, neg),
        n_anchors: cfg.n_anchors,
        n_pos: cfg.n_pos,
        n_neg: cfg.n_neg,
        d_psi_kind: cfg.distance.name().to_string(),
        exact,
    }
}

/// Monte Carlo scores. Anchor `i` draws from its own stream of `cfg.seed`, so
/// the result does not depend on thread scheduling.
pub fn denoising_factor(rep: &dyn Representation, m: &ExBmdp, pi: &Policy, cfg: &DfConfig) -> Result<EvalReport> {
    if cfg.n_anchors == 0 || cfg.n_pos == 0 || cfg.n_neg == 0 {
        return Err(Error::Invalid("anchor, positive and negative counts must be positive".into()));
    }
    check_noise(m)?;
    let rho = anchor_distribution(m, pi)?;
    let per_anchor: Vec<(f64, f64)> = (0..cfg.n_anchors)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, i as u64);
            let (s, xi) = m.split(sample_index(&rho, &mut rng));
            let anchor = rep.embed(m, s, xi, &mut rng)?;
            let mut pos = 0.0;
            for _ in 0..cfg.n_pos {
                let xi2 = sample_index(&m.noise.resample, &mut rng);
                pos += cfg.distance.eval(&anchor, &rep.embed(m, s, xi2, &mut rng)?);
            }
            let mut neg = 0.0;
            for _ in 0..cfg.n_neg {
                let (s2, xi2) = m.split(sample_index(&rho, &mut rng));
                neg += cfg.distance.eval(&anchor, &rep.embed(m, s2, xi2, &mut rng)?);
            }
            Ok((pos, neg))
        })
        .collect::<Result<_>>()?;
    let (pos, neg) = per_anchor.iter().fold((0.0, 0.0), |(p, n), (a, b)| (p + a, n + b));
    let pos = pos / (cfg.n_anchors * cfg.n_pos) as f64;
    let neg = neg / (cfg.n_anchors * cfg.n_neg) as f64;
    Ok(make_report(pos, neg, cfg, false))
}

pub fn positive_score(rep: &dyn Representation, m: &ExBmdp, pi: &Policy, cfg: &DfConfig) -> Result<f64> {
    Ok(denoising_factor(rep, m, pi, cfg)?.pos)
}

pub fn negative_score(rep: &dyn Representation, m: &ExBmdp, pi: &Policy, cfg: &DfConfig) -> Result<f64> {
    Ok(denoising_factor(rep, m, pi, cfg)?.neg)
}

/// Exact expectations by enumeration; requires observations that are a
/// deterministic function of `(s, xi)`.
pub fn denoising_factor_exact(rep: &dyn Representation, m: &ExBmdp, pi: &Policy, distance: RepDistance) -> Result<EvalReport> {
    if !m.emission.is_deterministic() {
        return Err(Error::Precondition("exact scores need deterministic emissions".into()));
    }
    check_noise(m)?;
    let rho = anchor_distribution(m, pi)?;
    let n = m.n_obs();
    let mut rng = stream(0, 0);
    let table: Vec<Vec<f64>> = (0..n)
        .map(|x| {
            let (s, xi) = m.split(x);
            rep.embed(m, s, xi, &mut rng)
        })
        .collect::<Result<_>>()?;
    let (mut pos, mut neg) = (0.0, 0.0);
    for x in 0..n {
        if rho[x] == 0.0 {
            continue;
        }
        let (s, _) = m.split(x);
        for (xi2, &w) in m.noise.resample.iter().enumerate() {
            if w > 0.0 {
                pos += rho[x] * w * distance.eval(&table[x], &table[m.obs_index(s, xi2)]);
            }
        }
        for y in 0..n {
            if rho[y] > 0.0 {
                neg += rho[x] * rho[y] * distance.eval(&table[x], &table[y]);
            }
        }
    }
    let cfg = DfConfig { n_anchors: n, n_pos: m.noise.n_noise, n_neg: n, distance, seed: 0 };
    Ok(make_report(pos, neg, &cfg, true))
}

/// One row of a df-over-training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub pos: f64,
    pub neg: f64,
    pub df: f64,
}

pub fn write_curve_csv<W: std::io::Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_exbmdp, EmissionSpec, FiniteLatentMdp, NoiseChain, NoiseFamily};

    fn two_state_uniform() -> ExBmdp {
        let task = FiniteLatentMdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![vec![vec![0.5, 0.5]]; 2],
            reward: vec![vec![0.0]; 2],
            gamma: 0.9,
            initial: vec![0.5, 0.5],
        };
        ExBmdp { task, noise: NoiseChain::iid(vec![0.5, 0.5]), emission: EmissionSpec::tabular(2) }
    }

    #[test]
    fn oracle_negative_score_by_enumeration() {
        let m = two_state_uniform();
        let pi = Policy::uniform(4, 1);
        let r = denoising_factor_exact(&Oracle, &m, &pi, RepDistance::L2).unwrap();
        assert_eq!(r.pos, 0.0);
        assert!((r.neg - 0.5 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 1.0);
    }

    #[test]
    fn identity_table_positive_score_by_enumeration() {
        // One-hot per observation: same-state pairs with different noise are sqrt(2) apart.
        let m = two_state_uniform();
        let pi = Policy::uniform(4, 1);
        let table = (0..4).map(|x| one_hot(4, x)).collect();
        let r = denoising_factor_exact(&Table(table), &m, &pi, RepDistance::L2).unwrap();
        assert!((r.pos - 0.5 * 2f64.sqrt()).abs() < 1e-12);
        assert!((r.neg - 0.75 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_encoder_is_degenerate() {
        let m = random_exbmdp(2, 3, 2, 3, NoiseFamily::IidDiscrete);
        let pi = Policy::uniform(m.n_obs(), 2);
        let r = denoising_factor(&Constant(vec![1.0, 2.0]), &m, &pi, &DfConfig::default()).unwrap();
        assert_eq!((r.pos, r.neg, r.df), (0.0, 0.0, 0.0));
    }

    #[test]
    fn sampled_scores_are_reproducible() {
        let m = random_exbmdp(2, 3, 2, 3, NoiseFamily::IidDiscrete);
        let pi = Policy::uniform(m.n_obs(), 2);
        let a = denoising_factor(&NoiseOnly, &m, &pi, &DfConfig::default()).unwrap();
        let b = denoising_factor(&NoiseOnly, &m, &pi, &DfConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_noise_value_is_rejected() {
        let m = random_exbmdp(2, 3, 2, 1, NoiseFamily::IidDiscrete);
        let pi = Policy::uniform(m.n_obs(), 2);
        assert!(matches!(denoising_factor(&Oracle, &m, &pi, &DfConfig::default()), Err(Error::Precondition(_))));
    }
}
