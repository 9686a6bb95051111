//! Central finite-difference checks of the analytic loss gradients.

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::encoder::Encoder;
use super::losses::{metric_loss, rp_loss, zp_loss, Batch, Grads, LossConfig, MetricVariant, PairPlan};
use super::models::LatentModels;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Central differences at step 1e-5
/// carry absolute errors near 1e-10 (truncation) and 1e-11 (round-off), so
/// components smaller than this are compared on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Metric(MetricVariant),
    Zp,
    Rp,
}

impl LossKind {
    pub fn all() -> Vec<LossKind> {
        let mut v: Vec<LossKind> = MetricVariant::ALL.iter().map(|&m| LossKind::Metric(m)).collect();
        v.extend([LossKind::Zp, LossKind::Rp]);
        v
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Metric(m) => m.name(),
            Self::Zp => "zp",
            Self::Rp => "rp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: String,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Index into the concatenated (encoder, models) parameters.
    pub worst_param: usize,
}

/// Everything a loss reads besides the parameters under test.
pub struct LossInputs<'a> {
    pub target: &'a Encoder,
    pub target_models: &'a LatentModels,
    pub batch: &'a Batch,
    pub plan: &'a PairPlan,
    pub cfg: &'a LossConfig,
}

pub fn evaluate(kind: LossKind, online: &Encoder, models: &LatentModels, inp: &LossInputs) -> Result<(f64, Grads)> {
    let v = match kind {
        LossKind::Metric(variant) => {
            let cfg = LossConfig { variant, ..*inp.cfg };
            metric_loss(online, inp.target, models, inp.target_models, inp.batch, inp.plan, &cfg)?
        }
        LossKind::Zp => zp_loss(online, inp.target, models, inp.batch, false)?,
        LossKind::Rp => rp_loss(online, models, inp.batch)?,
    };
    Ok((v.value, v.grads))
}

/// Compare analytic gradients against central differences over every
/// encoder and model parameter, with the target side held fixed.
pub fn check_gradients(kind: LossKind, online: &Encoder, models: &LatentModels, inp: &LossInputs) -> Result<GradCheckReport> {
    let (_, grads) = evaluate(kind, online, models, inp)?;
    let analytic: Vec<f64> = grads.encoder.iter().chain(&grads.models).copied().collect();
    let ne = online.n_params();
    let mut enc = online.clone();
    let mut mdl = models.clone();
    let mut report = GradCheckReport {
        loss: kind.name().to_string(),
        n_params: analytic.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: 0,
    };
    for (idx, &a) in analytic.iter().enumerate() {
        let slot = |e: &mut Encoder, m: &mut LatentModels, delta: f64| {
            if idx < ne {
                e.params[idx] += delta;
            } else {
                m.params[idx - ne] += delta;
            }
        };
        slot(&mut enc, &mut mdl, FD_STEP);
        let up = evaluate(kind, &enc, &mdl, inp)?.0;
        slot(&mut enc, &mut mdl, -2.0 * FD_STEP);
        let down = evaluate(kind, &enc, &mdl, inp)?.0;
        slot(&mut enc, &mut mdl, FD_STEP);
        if idx < ne {
            enc.params[idx] = online.params[idx];
        } else {
            mdl.params[idx - ne] = models.params[idx - ne];
        }
        let fd = (up - down) / (2.0 * FD_STEP);
        let abs = (a - fd).abs();
        let rel = abs / a.abs().max(fd.abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = idx;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::buffer::collect_rollouts;
    use crate::learn::encoder::Normalization;
    use crate::mdp::{random_exbmdp, EmissionSpec, NoiseEmission, NoiseFamily, Policy};
    use crate::rng::seeded;

    #[test]
    fn every_loss_matches_finite_differences() {
        let mut m = random_exbmdp(11, 4, 2, 3, NoiseFamily::IidDiscrete);
        m.emission = EmissionSpec::feature(4, NoiseEmission::Gaussian { mu: 0.0, sigma: 0.5, dim: 2 });
        let pi = Policy::uniform(m.n_obs(), 2);
        let buf = collect_rollouts(&m, &pi, 64, seeded(1)).unwrap();
        let mut rng = seeded(2);
        let batch = Batch::from_transitions(&buf.sample(8, &mut rng).unwrap());
        let plan = PairPlan::draw(8, 3, &mut rng);
        for kind in LossKind::all() {
            let norm = match kind {
                LossKind::Metric(MetricVariant::Simsr) => Normalization::L2,
                LossKind::Metric(MetricVariant::DbcNormed) => Normalization::MaxNorm { c: 3.0, p: 2.0 },
                _ => Normalization::LayerNorm { eps: 1e-3 },
            };
            let online = Encoder::new(vec![m.obs_dim(), 6, 3], norm, &mut rng).unwrap();
            let target = Encoder::new(vec![m.obs_dim(), 6, 3], norm, &mut rng).unwrap();
            let models = LatentModels::new(3, 2, &mut rng).unwrap();
            let cfg = LossConfig::default();
            let inp = LossInputs { target: &target, target_models: &models, batch: &batch, plan: &plan, cfg: &cfg };
            let r = check_gradients(kind, &online, &models, &inp).unwrap();
            println!("{r:?}");
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
