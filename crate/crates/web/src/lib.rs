//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported function takes plain numbers or strings and returns a JSON
//! document; the `*_json` functions are the native versions the bindings wrap.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use bmetrics::eval::{denoising_factor, DfConfig, NoiseOnly, Oracle};
use bmetrics::exact::{metric_fixed_point, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use bmetrics::experiment::{train_run, RunConfig};
use bmetrics::kernels::{MetricKind, MetricSpec};
use bmetrics::learn::MetricVariant;
use bmetrics::mdp::{random_exbmdp, EmissionMode, NoiseEmission, NoiseFamily, Policy};

/// Largest instance the page will solve exactly.
pub const MAX_OBS: usize = 64;
/// Training budget cap so the page stays responsive.
pub const MAX_STEPS: u64 = 3000;

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Heatmap {
    kind: String,
    n_states: usize,
    n_noise: usize,
    values: Vec<Vec<f64>>,
    iterations: usize,
    residual: f64,
    /// Largest distance between two observations of the same latent state.
    max_same_state: f64,
}

pub fn metric_heatmap_json(seed: u64, n_states: usize, n_noise: usize, kind: &str, c_t: f64) -> Result<String, String> {
    if n_states == 0 || n_noise == 0 || n_states * n_noise > MAX_OBS {
        return Err(format!("need 1 <= states * noise values <= {MAX_OBS}"));
    }
    let kind: MetricKind = kind.parse().map_err(|e: bmetrics::Error| e.to_string())?;
    let m = random_exbmdp(seed, n_states, 2, n_noise, NoiseFamily::IidDiscrete);
    let spec = MetricSpec::new(kind, 1.0, c_t).map_err(|e| e.to_string())?;
    let pi = Policy::uniform(m.n_obs(), m.task.n_actions);
    let pi = (kind != MetricKind::Bsm).then_some(&pi);
    let d = metric_fixed_point(&m, pi, spec, DEFAULT_TOL, DEFAULT_MAX_ITERS).map_err(|e| e.to_string())?;
    let mut max_same_state: f64 = 0.0;
    for x in 0..m.n_obs() {
        for y in 0..m.n_obs() {
            if m.split(x).0 == m.split(y).0 {
                max_same_state = max_same_state.max(d.get(x, y));
            }
        }
    }
    to_json(&Heatmap {
        kind: format!("{kind:?}").to_lowercase(),
        n_states,
        n_noise,
        iterations: d.iterations,
        residual: d.final_residual,
        values: d.values,
        max_same_state,
    })
}

#[derive(Serialize)]
struct NoisePoint {
    sigma: f64,
    oracle: f64,
    noise_only: f64,
    random_encoder: f64,
}

/// Denoising factor of three encoders as the Gaussian emission noise grows.
pub fn df_vs_noise_json(seed: u64, sigmas: &[f64], noise_dim: usize) -> Result<String, String> {
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.instance.emission.mode = EmissionMode::Feature;
        cfg.instance.emission.noise = NoiseEmission::Gaussian { mu: 0.0, sigma, dim: noise_dim };
        cfg.train.steps = 0;
        cfg.eval.n_anchors = 128;
        let run = train_run(&cfg).map_err(|e| e.to_string())?;
        let m = cfg.build_instance().map_err(|e| e.to_string())?;
        let pi = cfg.build_policy(&m).map_err(|e| e.to_string())?;
        let df_cfg = DfConfig { n_anchors: 128, seed, ..Default::default() };
        let oracle = denoising_factor(&Oracle, &m, &pi, &df_cfg).map_err(|e| e.to_string())?.df;
        let noise_only = denoising_factor(&NoiseOnly, &m, &pi, &df_cfg).map_err(|e| e.to_string())?.df;
        rows.push(NoisePoint { sigma, oracle, noise_only, random_encoder: run.report.initial.df });
    }
    to_json(&rows)
}

#[derive(Serialize)]
struct Curve {
    variant: String,
    steps: Vec<u64>,
    df: Vec<f64>,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

/// Train a small encoder and return its denoising-factor curve.
pub fn train_curve_json(seed: u64, variant: &str, steps: u64, every: u64) -> Result<String, String> {
    let variant: MetricVariant = variant.parse().map_err(|e: bmetrics::Error| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.instance.seed = Some(7);
    cfg.loss.variant = variant;
    cfg.loss.c_t = 0.9;
    cfg.train.steps = steps.min(MAX_STEPS);
    cfg.eval.every = every.max(1);
    let run = train_run(&cfg).map_err(|e| e.to_string())?;
    to_json(&Curve {
        variant: variant.name().into(),
        steps: run.curve.iter().map(|p| p.step).collect(),
        df: run.curve.iter().map(|p| p.df).collect(),
        pos: run.curve.iter().map(|p| p.pos).collect(),
        neg: run.curve.iter().map(|p| p.neg).collect(),
    })
}

#[wasm_bindgen]
pub fn metric_heatmap(seed: u32, n_states: u32, n_noise: u32, kind: &str, c_t: f64) -> Result<String, JsValue> {
    metric_heatmap_json(seed.into(), n_states as usize, n_noise as usize, kind, c_t).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn df_vs_noise(seed: u32, sigmas: Vec<f64>, noise_dim: u32) -> Result<String, JsValue> {
    df_vs_noise_json(seed.into(), &sigmas, noise_dim as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn train_curve(seed: u32, variant: &str, steps: u32, every: u32) -> Result<String, JsValue> {
    train_curve_json(seed.into(), variant, steps.into(), every.into()).map_err(|e| JsValue::from_str(&e))
}
