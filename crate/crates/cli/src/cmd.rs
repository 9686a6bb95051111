use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use bmetrics::eval::{denoising_factor, denoising_factor_exact, Constant, DfConfig, NoiseOnly, Oracle, RepDistance, Representation};
use bmetrics::exact::metric_fixed_point;
use bmetrics::experiment::{
    eps_optimal_policy, evaluate_encoder, report as aggregate, run_experiment, run_isolated, write_report_csv, AgentObjective,
    IsolatedSpec, NormConfig, OodConfig, RunConfig,
};
use bmetrics::kernels::{MetricKind, MetricSpec};
use bmetrics::learn::{Checkpoint, MetricVariant, TrainState};
use bmetrics::mdp::{EmissionMode, ExBmdp, NoiseEmission, NoiseFamily, Policy};
use bmetrics::noise::ood_variant;
use bmetrics::verify::standard_certificates;

use crate::{EvalDfArgs, ExactArgs, GenArgs, IsolatedArgs, PolicyArgs, ReportArgs, RunOverrides, TrainArgs, VerifyArgs};

pub enum Outcome {
    Ok,
    /// A certificate or check did not hold.
    Failed,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_instance(path: &Path) -> Result<ExBmdp> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExBmdp::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Parse a kebab-case enum through its serde representation.
fn parse_kebab<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.into())).with_context(|| format!("unknown {what} `{s}`"))
}

fn parse_norm(s: &str) -> Result<NormConfig> {
    Ok(match s {
        "none" => NormConfig::None,
        "l2" => NormConfig::L2,
        "layer-norm" => NormConfig::LayerNorm { eps: 1e-5 },
        "max-norm" => NormConfig::MaxNorm { p: 2.0, c: None },
        other => bail!("unknown normalization `{other}`"),
    })
}

fn policy(m: &ExBmdp, p: &PolicyArgs) -> Result<Policy> {
    Ok(match p.eps {
        Some(eps) => eps_optimal_policy(m, eps)?,
        None => Policy::uniform(m.n_obs(), m.task.n_actions),
    })
}

pub fn gen(a: &GenArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::default();
    let i = &mut cfg.instance;
    i.seed = Some(a.seed);
    i.n_states = a.n_states;
    i.n_actions = a.n_actions;
    i.n_noise = a.n_noise;
    i.noise = a.noise.parse::<NoiseFamily>()?;
    i.branching = a.branching;
    i.emission.mode = parse_kebab::<EmissionMode>("emission mode", &a.emission)?;
    i.emission.noise = match a.sigma {
        Some(sigma) => NoiseEmission::Gaussian { mu: 0.0, sigma, dim: a.noise_dim },
        None => NoiseEmission::EmbedDiscrete { scale: a.noise_scale },
    };
    cfg.check()?;
    let mut text = cfg.build_instance()?.to_json()?;
    text.push('\n');
    match &a.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct ExactSummary {
    #[serde(flatten)]
    inner: bmetrics::exact::DistanceSummary,
    max_entry: f64,
    triangle_violation: f64,
    asymmetry: f64,
    contraction_excess: f64,
}

pub fn exact(a: &ExactArgs) -> Result<Outcome> {
    let m = read_instance(&a.instance)?;
    let kind: MetricKind = a.metric.parse()?;
    let spec = MetricSpec::new(kind, a.c_r, a.c_t.unwrap_or(m.task.gamma))?;
    let pi = match kind {
        MetricKind::Bsm => None,
        _ => Some(policy(&m, &a.policy)?),
    };
    let d = metric_fixed_point(&m, pi.as_ref(), spec, a.tol, a.max_iters)?;
    d.write_csv(BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?))?;
    print_json(&ExactSummary {
        inner: d.summary(),
        max_entry: d.values.iter().flatten().fold(0.0, |acc: f64, v| acc.max(*v)),
        triangle_violation: d.triangle_violation(),
        asymmetry: d.asymmetry(),
        contraction_excess: d.contraction_excess(),
    })?;
    Ok(Outcome::Ok)
}

/// Config file (or defaults) with the command-line overrides applied.
pub fn load_config(o: &RunOverrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &o.name {
        cfg.name = v.clone();
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.instance {
        cfg.instance.path = Some(v.clone());
    }
    if let Some(v) = o.instance_seed {
        cfg.instance.seed = Some(v);
    }
    if let Some(v) = o.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.train.optim.lr = v;
    }
    if let Some(v) = &o.variant {
        cfg.loss.variant = v.parse::<MetricVariant>()?;
    }
    if let Some(v) = &o.normalization {
        cfg.encoder.normalization = parse_norm(v)?;
    }
    if let Some(v) = o.eval_every {
        cfg.eval.every = v;
    }
    if let Some(v) = &o.sigmas {
        cfg.sweep.sigmas = v.clone();
    }
    if let Some(v) = &o.noise_dims {
        cfg.sweep.noise_dims = v.clone();
    }
    if let Some(v) = &o.seeds {
        cfg.sweep.seeds = v.clone();
    }
    if let Some(v) = o.ood_shift_seed {
        cfg.ood = Some(OodConfig { shift_seed: v });
    }
    cfg.check()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    name: &'a str,
    runs: Vec<serde_json::Value>,
}

pub fn train(a: &TrainArgs) -> Result<Outcome> {
    let cfg = load_config(&a.run)?;
    let summary = run_experiment(&cfg, &a.out)?;
    let runs = summary
        .runs
        .iter()
        .map(|(dir, r)| {
            serde_json::json!({
                "dir": dir,
                "seed": r.seed,
                "variant": r.variant,
                "sigma": r.sigma,
                "noise_dim": r.noise_dim,
                "initial_df": r.initial.df,
                "final_df": r.last.df,
                "ood_df": r.ood.as_ref().map(|o| o.df),
            })
        })
        .collect();
    print_json(&TrainSummary { name: &cfg.name, runs })?;
    Ok(Outcome::Ok)
}

fn df_config(a: &EvalDfArgs) -> Result<DfConfig> {
    Ok(DfConfig {
        n_anchors: a.n_anchors,
        n_pos: a.n_pos,
        n_neg: a.n_neg,
        distance: parse_kebab::<RepDistance>("distance", &a.distance)?,
        seed: a.seed,
    })
}

pub fn eval_df(a: &EvalDfArgs) -> Result<Outcome> {
    let df = df_config(a)?;
    let report = if let Some(dir) = &a.run {
        let mut cfg = RunConfig::from_json(&std::fs::read_to_string(dir.join("config.json")).context("reading run config")?)?;
        if !cfg.sweep.is_empty() {
            bail!("{} is a sweep; pass one of its child directories", dir.display());
        }
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(dir.join("checkpoint.json")).context("reading checkpoint")?)?;
        let state = TrainState::from_checkpoint(&ckpt)?;
        cfg.eval.exact = !a.sampled;
        cfg.eval.n_anchors = df.n_anchors;
        cfg.eval.n_pos = df.n_pos;
        cfg.eval.n_neg = df.n_neg;
        cfg.eval.distance = df.distance;
        let mut m = cfg.build_instance()?;
        if a.ood {
            let shift = cfg.ood.map(|o| o.shift_seed).context("run config has no ood section")?;
            m = ood_variant(&m, shift);
        }
        let pi = cfg.build_policy(&m)?;
        evaluate_encoder(&state.online, &m, &pi, &cfg, a.seed)?
    } else {
        let path = a.instance.as_ref().context("pass --run or --instance with --encoder")?;
        let m = read_instance(path)?;
        let pi = policy(&m, &a.policy)?;
        let constant = Constant(vec![0.0]);
        let rep: &dyn Representation = match a.encoder.as_deref().unwrap_or("oracle") {
            "oracle" => &Oracle,
            "noise-only" => &NoiseOnly,
            "constant" => &constant,
            other => bail!("unknown reference encoder `{other}`"),
        };
        if !a.sampled && m.emission.is_deterministic() {
            denoising_factor_exact(rep, &m, &pi, df.distance)?
        } else {
            denoising_factor(rep, &m, &pi, &df)?
        }
    };
    if let Some(path) = &a.csv {
        report.write_csv(BufWriter::new(File::create(path)?))?;
    }
    print_json(&report)?;
    Ok(Outcome::Ok)
}

pub fn isolated(a: &IsolatedArgs) -> Result<Outcome> {
    let cfg = load_config(&a.run)?;
    let spec = IsolatedSpec {
        agent: a.agent.parse::<AgentObjective>()?,
        metric: a.metric.parse::<MetricVariant>()?,
        metric_normalization: a.metric_normalization.as_deref().map(parse_norm).transpose()?,
        shared_data: !a.separate_data,
        eps: a.eps,
        inject_leak: a.inject_leak,
    };
    let log = run_isolated(&cfg, &spec, &a.out)?;
    print_json(&log)?;
    Ok(Outcome::Ok)
}

pub fn verify(a: &VerifyArgs) -> Result<Outcome> {
    let mut instances = Vec::new();
    for path in &a.instances {
        instances.push((path.display().to_string(), read_instance(path)?));
    }
    for k in 0..a.random {
        let seed = a.seed + k;
        let m = bmetrics::mdp::random_exbmdp(seed, 4, 2, 3, NoiseFamily::IidDiscrete);
        instances.push((format!("random-{seed}"), m));
    }
    if instances.is_empty() {
        bail!("nothing to verify: pass --instance or --random");
    }
    let mut failed = false;
    let mut out = std::io::stdout().lock();
    for (name, m) in &instances {
        for cert in standard_certificates(m, name, a.tol)? {
            failed |= !cert.passed;
            serde_json::to_writer(&mut out, &cert)?;
            writeln!(out)?;
        }
    }
    Ok(if failed { Outcome::Failed } else { Outcome::Ok })
}

pub fn report(a: &ReportArgs) -> Result<Outcome> {
    let rows = aggregate(&a.dirs)?;
    if let Some(path) = &a.csv {
        write_report_csv(&rows, BufWriter::new(File::create(path)?))?;
    }
    print_json(&rows)?;
    Ok(Outcome::Ok)
}
