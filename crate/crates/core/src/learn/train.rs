use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::buffer::ReplayBuffer;
use super::encoder::{Encoder, Normalization};
use super::losses::{metric_loss, rp_loss, zp_loss, Batch, Grads, LossConfig, MetricVariant, PairPlan};
use super::models::LatentModels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Rescale the joint gradient onto this 2-norm ball before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, max_grad_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub online: Encoder,
    /// Shadow encoder for bootstrapped targets; mirrors `online` when the
    /// target trick is off.
    pub target: Encoder,
    pub models: LatentModels,
    velocity: Grads,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub j_m: f64,
    pub j_zp: f64,
    pub j_rp: f64,
    pub total: f64,
}

impl TrainState {
    pub fn new(online: Encoder, models: LatentModels) -> Self {
        let velocity = Grads::zeros(&online, &models);
        Self { target: online.clone(), online, models, velocity, step: 0 }
    }

    /// Loss terms and the weighted total gradient on one batch.
    pub fn losses(&self, batch: &Batch, plan: &PairPlan, cfg: &LossConfig) -> Result<(LossRecord, Grads)> {
        let target = if cfg.use_target_trick { &self.target } else { &self.online };
        let mut grads = Grads::zeros(&self.online, &self.models);
        let mut rec = LossRecord { step: self.step, j_m: 0.0, j_zp: 0.0, j_rp: 0.0, total: 0.0 };
        if cfg.variant != MetricVariant::None {
            let m = metric_loss(&self.online, target, &self.models, &self.models, batch, plan, cfg)?;
            rec.j_m = m.value;
            grads.add_scaled(&m.grads, cfg.lambda_m);
        }
        if cfg.lambda_zp > 0.0 {
            let z = zp_loss(&self.online, target, &self.models, batch, false)?;
            rec.j_zp = z.value;
            grads.add_scaled(&z.grads, cfg.lambda_zp);
        }
        if cfg.lambda_rp > 0.0 {
            let r = rp_loss(&self.online, &self.models, batch)?;
            rec.j_rp = r.value;
            grads.add_scaled(&r.grads, cfg.lambda_rp);
        }
        let lm = if cfg.variant == MetricVariant::None { 0.0 } else { cfg.lambda_m };
        rec.total = lm * rec.j_m + cfg.lambda_zp * rec.j_zp + cfg.lambda_rp * rec.j_rp;
        Ok((rec, grads))
    }

    /// SGD with momentum on both parameter groups, after optional clipping
    /// of the joint gradient norm.
    pub fn apply(&mut self, grads: &Grads, opt: &OptimConfig) {
        let scale = match opt.max_grad_norm {
            Some(max) => {
                let norm = grads.encoder.iter().chain(&grads.models).map(|g| g * g).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let update = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                v[i] = opt.momentum * v[i] + scale * g[i];
                p[i] -= opt.lr * v[i];
            }
        };
        update(&mut self.online.params, &mut self.velocity.encoder, &grads.encoder);
        update(&mut self.models.params, &mut self.velocity.models, &grads.models);
    }

    pub fn update_target(&mut self, cfg: &LossConfig) {
        if cfg.use_target_trick {
            for (t, o) in self.target.params.iter_mut().zip(&self.online.params) {
                *t = cfg.tau * o + (1.0 - cfg.tau) * *t;
            }
        } else {
            self.target.params.clone_from(&self.online.params);
        }
    }
}

/// Sample a batch, take one optimizer step and soft-update the target.
pub fn train_step<R: rand::Rng + ?Sized>(
    state: &mut TrainState,
    buffer: &ReplayBuffer,
    cfg: &LossConfig,
    opt: &OptimConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<LossRecord> {
    let batch = Batch::from_transitions(&buffer.sample(batch_size, rng)?);
    let plan = PairPlan::draw(batch.len(), state.online.latent_dim(), rng);
    let (rec, grads) = state.losses(&batch, &plan, cfg)?;
    if !rec.total.is_finite() || grads.encoder.iter().chain(&grads.models).any(|g| !g.is_finite()) {
        return Err(Error::Invalid(format!("non-finite loss or gradient at step {}", state.step)));
    }
    state.apply(&grads, opt);
    state.update_target(cfg);
    state.step += 1;
    Ok(rec)
}

pub fn write_loss_csv<W: std::io::Write>(records: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub encoder_dims: Vec<usize>,
    pub normalization: Normalization,
    pub n_actions: usize,
    pub arrays: Vec<NamedArray>,
}

fn encoder_arrays(prefix: &str, e: &Encoder, out: &mut Vec<NamedArray>) {
    let mut off = 0;
    for (l, w) in e.dims.windows(2).enumerate() {
        let (din, dout) = (w[0], w[1]);
        out.push(NamedArray {
            name: format!("{prefix}.layer{l}.weight"),
            shape: vec![dout, din],
            values: e.params[off..off + din * dout].to_vec(),
        });
        off += din * dout;
        out.push(NamedArray { name: format!("{prefix}.layer{l}.bias"), shape: vec![dout], values: e.params[off..off + dout].to_vec() });
        off += dout;
    }
    if off < e.params.len() {
        let k = e.latent_dim();
        out.push(NamedArray { name: format!("{prefix}.norm.gain"), shape: vec![k], values: e.params[off..off + k].to_vec() });
        out.push(NamedArray { name: format!("{prefix}.norm.bias"), shape: vec![k], values: e.params[off + k..].to_vec() });
    }
}

fn gather(arrays: &[NamedArray], prefix: &str) -> Vec<f64> {
    arrays
        .iter()
        .filter(|a| a.name.starts_with(prefix))
        .flat_map(|a| a.values.iter().copied())
        .collect()
}

impl TrainState {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        encoder_arrays("online", &self.online, &mut arrays);
        encoder_arrays("target", &self.target, &mut arrays);
        arrays.push(NamedArray {
            name: "models.params".into(),
            shape: vec![self.models.n_params()],
            values: self.models.params.clone(),
        });
        Checkpoint {
            step: self.step,
            encoder_dims: self.online.dims.clone(),
            normalization: self.online.normalization,
            n_actions: self.models.n_actions,
            arrays,
        }
    }

    /// Rebuild parameters from a checkpoint; optimizer momentum restarts at zero.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let k = *c.encoder_dims.last().ok_or_else(|| Error::Invalid("checkpoint without encoder dims".into()))?;
        let mut rng = crate::rng::seeded(0);
        let mut online = Encoder::new(c.encoder_dims.clone(), c.normalization, &mut rng)?;
        let mut models = LatentModels::new(k, c.n_actions, &mut rng)?;
        let mut target = online.clone();
        for (prefix, params) in [("online.", &mut online.params), ("target.", &mut target.params), ("models.", &mut models.params)] {
            let values = gather(&c.arrays, prefix);
            if values.len() != params.len() {
                return Err(Error::Shape(format!("checkpoint `{prefix}` has {} values, expected {}", values.len(), params.len())));
            }
            *params = values;
        }
        let velocity = Grads::zeros(&online, &models);
        Ok(Self { online, target, models, velocity, step: c.step })
    }
}
