use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{streams, write_json, RunConfig, SweepConfig};
use crate::error::Result;
use crate::eval::{denoising_factor, denoising_factor_exact, CurvePoint, EvalReport};
use crate::learn::{train_step, write_loss_csv, Encoder, LossRecord, ReplayBuffer, Rollout, TrainState};
use crate::mdp::{ExBmdp, NoiseEmission, Policy};
use crate::noise::ood_variant;
use crate::rng::{derive_seed, stream};

pub const RUN_SCHEMA: &str = "run-report/1";

/// Summary written to `report.json` of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub name: String,
    pub seed: u64,
    pub variant: String,
    pub sigma: Option<f64>,
    pub noise_dim: Option<usize>,
    pub steps: u64,
    pub initial: EvalReport,
    #[serde(rename = "final")]
    pub last: EvalReport,
    pub ood: Option<EvalReport>,
    pub last_loss: Option<LossRecord>,
}

/// In-memory result of one training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: TrainState,
    pub losses: Vec<LossRecord>,
    pub curve: Vec<CurvePoint>,
    pub ood_curve: Vec<CurvePoint>,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub dir: String,
    pub seed: u64,
    pub sigma: Option<f64>,
    pub noise_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub name: String,
    pub children: Vec<SweepEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// `(directory, report)` per completed run, in sweep order.
    pub runs: Vec<(PathBuf, RunReport)>,
}

/// Denoising factor of an encoder: exact when the emission allows it and the
/// config asks for it, sampled otherwise.
pub fn evaluate_encoder(enc: &Encoder, m: &ExBmdp, pi: &Policy, cfg: &RunConfig, salt: u64) -> Result<EvalReport> {
    if cfg.eval.exact && m.emission.is_deterministic() {
        denoising_factor_exact(enc, m, pi, cfg.eval.distance)
    } else {
        denoising_factor(enc, m, pi, &cfg.eval.df_config(cfg.stream_seed(salt)))
    }
}

fn point(step: u64, r: &EvalReport) -> CurvePoint {
    CurvePoint { step, pos: r.pos, neg: r.neg, df: r.df }
}

fn noise_labels(cfg: &RunConfig) -> (Option<f64>, Option<usize>) {
    match cfg.instance.emission.noise {
        NoiseEmission::Gaussian { sigma, dim, .. } => (Some(sigma), Some(dim)),
        NoiseEmission::EmbedDiscrete { scale } => (Some(scale), None),
    }
}

/// Train one configuration in memory. Sweep settings are ignored.
pub fn train_run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.check()?;
    let m = cfg.build_instance()?;
    let pi = cfg.build_policy(&m)?;
    let ood = match cfg.ood {
        Some(o) => {
            let shifted = ood_variant(&m, o.shift_seed);
            let pi_ood = cfg.build_policy(&shifted)?;
            Some((shifted, pi_ood))
        }
        None => None,
    };
    let mut state = cfg.init_state(&m, streams::ENCODER, streams::MODELS)?;
    let mut rollout = Rollout::new(&m, &pi, stream(cfg.seed, streams::ROLLOUT))?;
    let mut train_rng = stream(cfg.seed, streams::TRAIN);
    let mut buffer = ReplayBuffer::new(cfg.train.buffer_capacity);

    let mut curve = Vec::new();
    let mut ood_curve = Vec::new();
    let mut losses = Vec::new();
    let record = |step: u64, state: &TrainState, curve: &mut Vec<CurvePoint>, ood_curve: &mut Vec<CurvePoint>| -> Result<(EvalReport, Option<EvalReport>)> {
        let id = evaluate_encoder(&state.online, &m, &pi, cfg, derive_seed(streams::EVAL, step))?;
        curve.push(point(step, &id));
        let od = match &ood {
            Some((mo, po)) => {
                let r = evaluate_encoder(&state.online, mo, po, cfg, derive_seed(streams::OOD, step))?;
                ood_curve.push(point(step, &r));
                Some(r)
            }
            None => None,
        };
        Ok((id, od))
    };

    let (initial, mut last_ood) = record(0, &state, &mut curve, &mut ood_curve)?;
    let mut last = initial.clone();
    for t in 1..=cfg.train.steps {
        buffer.push(rollout.step());
        if buffer.len() >= cfg.train.batch_size {
            let mut rec = train_step(&mut state, &buffer, &cfg.loss, &cfg.train.optim, cfg.train.batch_size, &mut train_rng)?;
            rec.step = t;
            losses.push(rec);
        }
        if t % cfg.eval.every == 0 || t == cfg.train.steps {
            (last, last_ood) = record(t, &state, &mut curve, &mut ood_curve)?;
        }
    }
    let (sigma, noise_dim) = noise_labels(cfg);
    let report = RunReport {
        schema: RUN_SCHEMA.into(),
        name: cfg.name.clone(),
        seed: cfg.seed,
        variant: cfg.loss.variant.name().into(),
        sigma,
        noise_dim,
        steps: cfg.train.steps,
        initial,
        last,
        ood: last_ood,
        last_loss: losses.last().copied(),
    };
    Ok(RunOutput { state, losses, curve, ood_curve, report })
}

fn write_curves(path: &Path, id: &[CurvePoint], ood: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    if ood.is_empty() {
        w.write_record(["step", "pos", "neg", "df"])?;
    } else {
        w.write_record(["step", "pos", "neg", "df", "ood_pos", "ood_neg", "ood_df"])?;
    }
    for (i, p) in id.iter().enumerate() {
        let mut row = vec![p.step.to_string(), p.pos.to_string(), p.neg.to_string(), p.df.to_string()];
        if let Some(o) = ood.get(i) {
            row.extend([o.pos.to_string(), o.neg.to_string(), o.df.to_string()]);
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_run(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let run = train_run(cfg)?;
    write_json(&out.join("checkpoint.json"), &run.state.checkpoint())?;
    let mut loss_file = BufWriter::new(File::create(out.join("loss.csv"))?);
    if run.losses.is_empty() {
        use std::io::Write;
        writeln!(loss_file, "step,j_m,j_zp,j_rp,total")?;
    } else {
        write_loss_csv(&run.losses, &mut loss_file)?;
    }
    write_curves(&out.join("df.csv"), &run.curve, &run.ood_curve)?;
    write_json(&out.join("report.json"), &run.report)?;
    Ok(run.report)
}

fn sweep_children(cfg: &RunConfig) -> Vec<(String, RunConfig, SweepEntry)> {
    let s = &cfg.sweep;
    let opt = |v: Vec<Option<f64>>| if v.is_empty() { vec![None] } else { v };
    let sigmas = opt(s.sigmas.iter().map(|&v| Some(v)).collect());
    let dims: Vec<Option<usize>> = if s.noise_dims.is_empty() { vec![None] } else { s.noise_dims.iter().map(|&d| Some(d)).collect() };
    let seeds: Vec<Option<u64>> = if s.seeds.is_empty() { vec![None] } else { s.seeds.iter().map(|&d| Some(d)).collect() };
    let mut out = Vec::new();
    for sigma in &sigmas {
        for dim in &dims {
            for seed in &seeds {
                let mut child = cfg.clone();
                child.sweep = SweepConfig::default();
                let mut parts = Vec::new();
                if let Some(v) = sigma {
                    match &mut child.instance.emission.noise {
                        NoiseEmission::Gaussian { sigma, .. } => *sigma = *v,
                        NoiseEmission::EmbedDiscrete { scale } => *scale = *v,
                    }
                    parts.push(format!("sigma-{v}"));
                }
                if let Some(d) = dim {
                    if let NoiseEmission::Gaussian { dim, .. } = &mut child.instance.emission.noise {
                        *dim = *d;
                    }
                    parts.push(format!("dim-{d}"));
                }
                if let Some(sd) = seed {
                    child.seed = *sd;
                    parts.push(format!("seed-{sd}"));
                }
                let dir = parts.join("_");
                child.name = format!("{}/{dir}", cfg.name);
                let (sigma, noise_dim) = noise_labels(&child);
                let entry = SweepEntry { dir: dir.clone(), seed: child.seed, sigma, noise_dim };
                out.push((dir, child, entry));
            }
        }
    }
    out
}

/// Run a configuration into `out`. Sweeps write one subdirectory per point
/// plus `index.json`; all outputs are byte-identical across reruns.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.check()?;
    if cfg.sweep.is_empty() {
        let report = write_run(cfg, out)?;
        return Ok(RunSummary { runs: vec![(out.to_path_buf(), report)] });
    }
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let children = sweep_children(cfg);
    let runs = children
        .par_iter()
        .map(|(dir, child, _)| {
            let path = out.join(dir);
            Ok((path.clone(), write_run(child, &path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let index = SweepIndex { name: cfg.name.clone(), children: children.into_iter().map(|(_, _, e)| e).collect() };
    write_json(&out.join("index.json"), &index)?;
    Ok(RunSummary { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::MetricVariant;

    fn small(steps: u64) -> RunConfig {
        let mut c = RunConfig::default();
        c.instance.n_states = 3;
        c.instance.n_noise = 3;
        c.train.steps = steps;
        c.train.batch_size = 8;
        c.eval.every = 10;
        c.encoder.hidden = vec![8];
        c.encoder.latent_dim = 4;
        c.loss.variant = MetricVariant::Mico;
        c
    }

    #[test]
    fn zero_steps_gives_single_curve_row() {
        let run = train_run(&small(0)).unwrap();
        assert_eq!(run.curve.len(), 1);
        assert!(run.losses.is_empty());
        assert_eq!(run.report.initial, run.report.last);
    }

    #[test]
    fn schedule_includes_last_step() {
        let run = train_run(&small(25)).unwrap();
        let steps: Vec<u64> = run.curve.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
        assert_eq!(run.losses.first().unwrap().step, 8);
    }

    #[test]
    fn sweep_expands_product() {
        let mut c = small(0);
        c.sweep.sigmas = vec![0.5, 1.0];
        c.sweep.seeds = vec![1, 2, 3];
        let kids = sweep_children(&c);
        assert_eq!(kids.len(), 6);
        assert_eq!(kids[0].0, "sigma-0.5_seed-1");
        assert!(kids.iter().all(|(_, k, _)| k.sweep.is_empty()));
    }
}
