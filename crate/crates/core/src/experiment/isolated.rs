//! Metric estimation on the side of an unrelated agent.
//!
//! Both encoders see the same transitions. The metric encoder is updated by
//! the metric loss alone; its transition model learns from a latent
//! prediction loss whose encoder gradient is cut, and every step checks that
//! the cut holds.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::evaluate_encoder;
use super::{streams, write_json, NormConfig, PolicySpec, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{write_curve_csv, CurvePoint, EvalReport};
use crate::learn::{metric_loss, zp_loss, Batch, LossConfig, MetricVariant, PairPlan, ReplayBuffer, Rollout, TrainState};
use crate::rng::{derive_seed, stream};

pub const ISOLATED_SCHEMA: &str = "isolated-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentObjective {
    /// Latent prediction only.
    Zp,
    /// Latent and reward prediction.
    ZpRp,
    /// The agent encoder stays at its initialization.
    None,
}

impl std::str::FromStr for AgentObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zp" => Ok(Self::Zp),
            "zp-rp" => Ok(Self::ZpRp),
            "none" => Ok(Self::None),
            other => Err(Error::Invalid(format!("unknown agent objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsolatedSpec {
    pub agent: AgentObjective,
    /// Loss of the metric encoder; `none` leaves it at its initialization.
    pub metric: MetricVariant,
    /// Output normalization of the metric encoder; the run's encoder setting when absent.
    pub metric_normalization: Option<NormConfig>,
    /// Both encoders train on one transition stream; otherwise the metric
    /// encoder gets its own rollout of the same behavior policy.
    pub shared_data: bool,
    /// Exploration rate of the fixed behavior policy.
    pub eps: f64,
    /// Negative control: let the prediction loss reach the metric encoder.
    pub inject_leak: bool,
}

impl Default for IsolatedSpec {
    fn default() -> Self {
        Self {
            agent: AgentObjective::Zp,
            metric: MetricVariant::Mico,
            metric_normalization: None,
            shared_data: true,
            eps: 0.1,
            inject_leak: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationLog {
    pub schema: String,
    pub agent: AgentObjective,
    pub variant: String,
    pub steps: u64,
    /// Number of metric updates whose non-metric encoder gradient was checked.
    pub checks: u64,
    pub max_leak_norm: f64,
    pub agent_final: EvalReport,
    pub metric_final: EvalReport,
    #[serde(skip)]
    pub agent_curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub metric_curve: Vec<CurvePoint>,
}

fn agent_loss(cfg: &LossConfig, agent: AgentObjective) -> LossConfig {
    LossConfig {
        variant: MetricVariant::None,
        lambda_zp: 1.0,
        lambda_rp: if agent == AgentObjective::ZpRp { 1.0 } else { 0.0 },
        ..cfg.clone()
    }
}

/// One metric update: metric loss on encoder and models, plus a prediction
/// loss that may only touch the models. Returns the leaked encoder gradient norm.
fn metric_step(state: &mut TrainState, buffer: &ReplayBuffer, cfg: &RunConfig, leak: bool, rng: &mut crate::rng::Rng) -> Result<f64> {
    let loss = &cfg.loss;
    let batch = Batch::from_transitions(&buffer.sample(cfg.train.batch_size, rng)?);
    let plan = PairPlan::draw(batch.len(), state.online.latent_dim(), rng);
    let target = if loss.use_target_trick { &state.target } else { &state.online };
    let m = metric_loss(&state.online, target, &state.models, &state.models, &batch, &plan, loss)?;
    let z = zp_loss(&state.online, target, &state.models, &batch, !leak)?;
    let leak_norm = z.grads.encoder_norm();
    if leak_norm > 0.0 {
        return Err(Error::IsolationViolated { step: state.step, norm: leak_norm });
    }
    if !(m.value.is_finite() && z.value.is_finite()) {
        return Err(Error::Invalid(format!("non-finite metric or prediction loss at step {}", state.step)));
    }
    let mut grads = m.grads;
    grads.encoder.iter_mut().for_each(|g| *g *= loss.lambda_m);
    grads.models.iter_mut().for_each(|g| *g *= loss.lambda_m);
    grads.add_scaled(&z.grads, 1.0);
    state.apply(&grads, &cfg.train.optim);
    state.update_target(loss);
    state.step += 1;
    Ok(leak_norm)
}

/// Run the isolated protocol in memory.
pub fn isolated_run(cfg: &RunConfig, spec: &IsolatedSpec) -> Result<IsolationLog> {
    let mut cfg = cfg.clone();
    cfg.policy = PolicySpec::EpsOptimal { eps: spec.eps };
    cfg.loss.variant = spec.metric;
    cfg.check()?;
    let m = cfg.build_instance()?;
    let pi = cfg.build_policy(&m)?;
    let mut agent = cfg.init_state(&m, streams::ENCODER, streams::MODELS)?;
    let mut metric_cfg = cfg.clone();
    if let Some(norm) = spec.metric_normalization {
        metric_cfg.encoder.normalization = norm;
    }
    let mut metric = metric_cfg.init_state(&m, streams::METRIC_ENCODER, streams::METRIC_MODELS)?;
    let agent_cfg = agent_loss(&cfg.loss, spec.agent);
    let mut rollout = Rollout::new(&m, &pi, stream(cfg.seed, streams::ROLLOUT))?;
    let mut own_rollout = match spec.shared_data {
        true => None,
        false => Some(Rollout::new(&m, &pi, stream(cfg.seed, streams::METRIC_ROLLOUT))?),
    };
    let mut agent_rng = stream(cfg.seed, streams::TRAIN);
    let mut metric_rng = stream(cfg.seed, streams::METRIC_TRAIN);
    let mut buffer = ReplayBuffer::new(cfg.train.buffer_capacity);
    let mut own_buffer = ReplayBuffer::new(cfg.train.buffer_capacity);

    let eval = |enc: &crate::learn::Encoder, step: u64| evaluate_encoder(enc, &m, &pi, &cfg, derive_seed(streams::EVAL, step));
    let point = |step, r: &EvalReport| CurvePoint { step, pos: r.pos, neg: r.neg, df: r.df };
    let mut agent_final = eval(&agent.online, 0)?;
    let mut metric_final = eval(&metric.online, 0)?;
    let mut agent_curve = vec![point(0, &agent_final)];
    let mut metric_curve = vec![point(0, &metric_final)];
    let (mut checks, mut max_leak) = (0u64, 0.0f64);
    for t in 1..=cfg.train.steps {
        buffer.push(rollout.step());
        if let Some(r) = &mut own_rollout {
            own_buffer.push(r.step());
        }
        if buffer.len() >= cfg.train.batch_size && spec.agent != AgentObjective::None {
            crate::learn::train_step(&mut agent, &buffer, &agent_cfg, &cfg.train.optim, cfg.train.batch_size, &mut agent_rng)?;
        }
        let metric_data = if spec.shared_data { &buffer } else { &own_buffer };
        if metric_data.len() >= cfg.train.batch_size && spec.metric != MetricVariant::None {
            max_leak = max_leak.max(metric_step(&mut metric, metric_data, &cfg, spec.inject_leak, &mut metric_rng)?);
            checks += 1;
        }
        if t % cfg.eval.every == 0 || t == cfg.train.steps {
            agent_final = eval(&agent.online, t)?;
            metric_final = eval(&metric.online, t)?;
            agent_curve.push(point(t, &agent_final));
            metric_curve.push(point(t, &metric_final));
        }
    }
    Ok(IsolationLog {
        schema: ISOLATED_SCHEMA.into(),
        agent: spec.agent,
        variant: spec.metric.name().into(),
        steps: cfg.train.steps,
        checks,
        max_leak_norm: max_leak,
        agent_final,
        metric_final,
        agent_curve,
        metric_curve,
    })
}

/// Run the isolated protocol and write `config.json`, `df_agent.csv`,
/// `df_metric.csv` and `isolation.json` into `out`.
pub fn run_isolated(cfg: &RunConfig, spec: &IsolatedSpec, out: &Path) -> Result<IsolationLog> {
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &(cfg, spec))?;
    let log = isolated_run(cfg, spec)?;
    write_curve_csv(&log.agent_curve, BufWriter::new(File::create(out.join("df_agent.csv"))?))?;
    write_curve_csv(&log.metric_curve, BufWriter::new(File::create(out.join("df_metric.csv"))?))?;
    write_json(&out.join("isolation.json"), &log)?;
    Ok(log)
}
