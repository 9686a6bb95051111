use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::isolated::{AgentObjective, IsolationLog, ISOLATED_SCHEMA};
use super::run::{RunReport, SweepIndex, RUN_SCHEMA};
use crate::error::{Error, Result};

/// Aggregate over the runs sharing one group key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub variant: String,
    pub sigma: Option<f64>,
    pub noise_dim: Option<usize>,
    pub n: usize,
    pub df_mean: f64,
    pub df_ci95: f64,
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub ood_df_mean: Option<f64>,
    pub ood_df_ci95: Option<f64>,
}

/// Mean and 95% Student-t half width. One sample gives a zero half width.
pub fn t_interval(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 || xs.iter().all(|x| *x == xs[0]) {
        return (if n == 1 { xs[0] } else { mean }, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive dof").inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn label<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

fn agent_name(a: AgentObjective) -> &'static str {
    match a {
        AgentObjective::Zp => "zp",
        AgentObjective::ZpRp => "zp-rp",
        AgentObjective::None => "none",
    }
}

enum Found {
    Run(RunReport),
    Isolated(IsolationLog),
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn schema_of(path: &Path) -> Result<String> {
    let v: serde_json::Value = read_json(path)?;
    v.get("schema")
        .and_then(|s| s.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Invalid(format!("{}: missing schema field", path.display())))
}

fn collect(dir: &Path, out: &mut Vec<Found>) -> Result<()> {
    let index = dir.join("index.json");
    if index.exists() {
        let idx: SweepIndex = read_json(&index)?;
        for child in idx.children {
            collect(&dir.join(child.dir), out)?;
        }
        return Ok(());
    }
    for (file, schema) in [("report.json", RUN_SCHEMA), ("isolation.json", ISOLATED_SCHEMA)] {
        let path = dir.join(file);
        if path.exists() {
            let found = schema_of(&path)?;
            if found != schema {
                return Err(Error::Invalid(format!("{}: schema `{found}`, expected `{schema}`", path.display())));
            }
            out.push(if schema == RUN_SCHEMA { Found::Run(read_json(&path)?) } else { Found::Isolated(read_json(&path)?) });
            return Ok(());
        }
    }
    Err(Error::Invalid(format!("{}: no run outputs found", dir.display())))
}

/// Aggregate final denoising factors of the runs under `dirs`, grouped by
/// variant and noise level (or by agent objective for isolated runs).
pub fn report(dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut found = Vec::new();
    for d in dirs {
        collect(d, &mut found)?;
    }
    let runs = found.iter().filter(|f| matches!(f, Found::Run(_))).count();
    if runs != 0 && runs != found.len() {
        return Err(Error::Invalid("cannot aggregate training runs together with isolated runs".into()));
    }
    // Grouping keys sort lexicographically; the numeric labels ride along.
    let mut groups: BTreeMap<String, (String, Option<f64>, Option<usize>, Vec<&Found>)> = BTreeMap::new();
    for f in &found {
        let (key, variant, sigma, dim) = match f {
            Found::Run(r) => (
                format!("{}|sigma={}|dim={}", r.variant, label(r.sigma), label(r.noise_dim)),
                r.variant.clone(),
                r.sigma,
                r.noise_dim,
            ),
            Found::Isolated(l) => (format!("{}|agent={}", l.variant, agent_name(l.agent)), l.variant.clone(), None, None),
        };
        groups.entry(key).or_insert_with(|| (variant, sigma, dim, Vec::new())).3.push(f);
    }
    let rows = groups
        .into_iter()
        .map(|(group, (variant, sigma, noise_dim, members))| {
            let finals: Vec<_> = members
                .iter()
                .map(|f| match f {
                    Found::Run(r) => (&r.last, r.ood.as_ref()),
                    Found::Isolated(l) => (&l.metric_final, None),
                })
                .collect();
            let df: Vec<f64> = finals.iter().map(|(r, _)| r.df).collect();
            let (df_mean, df_ci95) = t_interval(&df);
            let ood: Vec<f64> = finals.iter().filter_map(|(_, o)| o.map(|r| r.df)).collect();
            let (ood_df_mean, ood_df_ci95) = if ood.len() == finals.len() && !ood.is_empty() {
                let (m, c) = t_interval(&ood);
                (Some(m), Some(c))
            } else {
                (None, None)
            };
            ReportRow {
                group,
                variant,
                sigma,
                noise_dim,
                n: finals.len(),
                df_mean,
                df_ci95,
                pos_mean: mean(finals.iter().map(|(r, _)| r.pos)),
                neg_mean: mean(finals.iter().map(|(r, _)| r.neg)),
                ood_df_mean,
                ood_df_ci95,
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_report_csv<W: std::io::Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "variant", "sigma", "noise_dim", "n", "df_mean", "df_ci95", "pos_mean", "neg_mean", "ood_df_mean", "ood_df_ci95"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.variant.clone(),
            opt(r.sigma.map(|v| v.to_string())),
            opt(r.noise_dim.map(|v| v.to_string())),
            r.n.to_string(),
            r.df_mean.to_string(),
            r.df_ci95.to_string(),
            r.pos_mean.to_string(),
            r.neg_mean.to_string(),
            opt(r.ood_df_mean.map(|v| v.to_string())),
            opt(r.ood_df_ci95.map(|v| v.to_string())),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_known_values() {
        let (m, h) = t_interval(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        // t_{0.975, 2} = 4.302652729...
        assert!((h - 4.302652729911275 / 3f64.sqrt()).abs() < 1e-9);
        assert_eq!(t_interval(&[0.4, 0.4, 0.4]).1, 0.0);
        assert_eq!(t_interval(&[0.7]), (0.7, 0.0));
    }
}
