//! Exact behavioral metrics on finite observation sets by fixed-point
//! iteration of their defining operators, started from the zero matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{MetricKind, MetricSpec};
use crate::mdp::{grounded_transition, policy_chain, ExBmdp, GroundedMdp, Policy, PolicyChain};
use crate::transport::w1_value;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub values: Vec<Vec<f64>>,
    pub spec: MetricSpec,
    pub iterations: usize,
    pub final_residual: f64,
    /// Sup-norm change of every iteration.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub kind: MetricKind,
    pub c_r: f64,
    pub c_t: f64,
    pub n_obs: usize,
    pub iterations: usize,
    pub residual: f64,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Largest violation of `d(x,z) <= d(x,y) + d(y,z)` (0 when none).
    pub fn triangle_violation(&self) -> f64 {
        let n = self.n();
        let d = &self.values;
        let mut worst = 0.0_f64;
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    worst = worst.max(d[x][z] - d[x][y] - d[y][z]);
                }
            }
        }
        worst
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.n();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.values[i][j] - self.values[j][i]).abs());
            }
        }
        worst
    }

    /// Largest ratio excess over `c_T` on the iteration trace:
    /// `max_t (delta_{t+1} - c_T delta_t)`.
    pub fn contraction_excess(&self) -> f64 {
        self.trace
            .windows(2)
            .map(|w| w[1] - self.spec.c_t * w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "value"])?;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                w.write_record([i.to_string(), j.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> DistanceSummary {
        DistanceSummary {
            kind: self.spec.kind,
            c_r: self.spec.c_r,
            c_t: self.spec.c_t,
            n_obs: self.n(),
            iterations: self.iterations,
            residual: self.final_residual,
        }
    }
}

/// Everything the operators read, precomputed once per run.
struct OperatorInputs<'a> {
    g: &'a GroundedMdp,
    chain: Option<PolicyChain>,
    spec: MetricSpec,
}

impl<'a> OperatorInputs<'a> {
    fn new(g: &'a GroundedMdp, pi: Option<&Policy>, spec: MetricSpec) -> Result<Self> {
        spec.check()?;
        let chain = match spec.kind {
            MetricKind::Bsm => None,
            MetricKind::Pbsm | MetricKind::Mico => {
                let pi = pi.ok_or_else(|| Error::Precondition(format!("{:?} needs a policy", spec.kind)))?;
                Some(policy_chain(g, pi)?)
            }
        };
        Ok(Self { g, chain, spec })
    }

    fn apply(&self, d: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.g.n_obs;
        let spec = &self.spec;
        match spec.kind {
            MetricKind::Mico => {
                let c = self.chain.as_ref().expect("policy chain built for MICo");
                // u' = c_R |dR| + c_T P u P^T
                let pu = crate::linalg::matmul(&c.matrix, d);
                let pupt = crate::linalg::matmul(&pu, &crate::linalg::transpose(&c.matrix));
                Ok((0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| spec.c_r * (c.reward[i] - c.reward[j]).abs() + spec.c_t * pupt[i][j])
                            .collect()
                    })
                    .collect())
            }
            MetricKind::Bsm | MetricKind::Pbsm => {
                let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
                let values: Vec<f64> = pairs
                    .par_iter()
                    .map(|&(i, j)| self.pair_value(d, i, j))
                    .collect::<Result<_>>()?;
                let mut out = vec![vec![0.0; n]; n];
                for (&(i, j), v) in pairs.iter().zip(values) {
                    out[i][j] = v;
                    out[j][i] = v;
                }
                Ok(out)
            }
        }
    }

    fn pair_value(&self, d: &[Vec<f64>], i: usize, j: usize) -> Result<f64> {
        let OperatorInputs { g, spec, .. } = self;
        match spec.kind {
            MetricKind::Bsm => {
                let mut best = f64::NEG_INFINITY;
                for a in 0..g.n_actions {
                    let r = spec.c_r * (g.reward[i][a] - g.reward[j][a]).abs();
                    let t = w1_value(d, &g.transition[i][a], &g.transition[j][a])?;
                    best = best.max(r + spec.c_t * t);
                }
                Ok(best)
            }
            MetricKind::Pbsm => {
                let c = self.chain.as_ref().expect("policy chain built for PBSM");
                let r = spec.c_r * (c.reward[i] - c.reward[j]).abs();
                let t = w1_value(d, &c.matrix[i], &c.matrix[j])?;
                Ok(r + spec.c_t * t)
            }
            MetricKind::Mico => unreachable!("MICo is applied in matrix form"),
        }
    }
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// One application of the metric operator to `d`.
pub fn apply_operator(g: &GroundedMdp, pi: Option<&Policy>, spec: MetricSpec, d: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    OperatorInputs::new(g, pi, spec)?.apply(d)
}

/// `sup |F(d) - d|`: how far `d` is from being the operator's fixed point.
pub fn operator_residual(g: &GroundedMdp, pi: Option<&Policy>, dm: &DistanceMatrix) -> Result<f64> {
    let next = apply_operator(g, pi, dm.spec, &dm.values)?;
    Ok(sup_diff(&next, &dm.values))
}

/// Fixed point on a grounded model; BSM ignores `pi`, PBSM and MICo require it.
pub fn metric_fixed_point_grounded(
    g: &GroundedMdp,
    pi: Option<&Policy>,
    spec: MetricSpec,
    tol: f64,
    max_iters: usize,
) -> Result<DistanceMatrix> {
    let op = OperatorInputs::new(g, pi, spec)?;
    let n = g.n_obs;
    let mut d = vec![vec![0.0; n]; n];
    let mut trace = Vec::new();
    loop {
        let next = op.apply(&d)?;
        let delta = sup_diff(&next, &d);
        trace.push(delta);
        d = next;
        if delta <= tol {
            return Ok(DistanceMatrix {
                values: d,
                spec,
                iterations: trace.len(),
                final_residual: delta,
                trace,
            });
        }
        if trace.len() >= max_iters {
            return Err(Error::Convergence { iterations: trace.len(), residual: delta, trace });
        }
    }
}

/// Fixed point on a tabular EX-BMDP.
pub fn metric_fixed_point(
    m: &ExBmdp,
    pi: Option<&Policy>,
    spec: MetricSpec,
    tol: f64,
    max_iters: usize,
) -> Result<DistanceMatrix> {
    let g = grounded_transition(m)?;
    metric_fixed_point_grounded(&g, pi, spec, tol, max_iters)
}

/// SimSR distance with the true transition model: the MICo recursion itself.
pub fn simsr_exact(m: &ExBmdp, pi: &Policy, c_r: f64, c_t: f64, tol: f64, max_iters: usize) -> Result<DistanceMatrix> {
    metric_fixed_point(m, Some(pi), MetricSpec::new(MetricKind::Mico, c_r, c_t)?, tol, max_iters)
}

/// Unordered same-state, different-noise observation pairs of a tabular EX-BMDP.
pub fn anchor_positive_pairs(m: &ExBmdp) -> Result<Vec<(usize, usize)>> {
    Ok(grounded_transition(m)?.anchor_positive_pairs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_exbmdp, EmissionSpec, FiniteLatentMdp, NoiseChain, NoiseFamily};

    fn uniform_chain_instance() -> ExBmdp {
        ExBmdp {
            task: FiniteLatentMdp {
                n_states: 2,
                n_actions: 1,
                transition: vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
                reward: vec![vec![0.0], vec![1.0]],
                gamma: 0.5,
                initial: vec![0.5, 0.5],
            },
            noise: NoiseChain::trivial(),
            emission: EmissionSpec::tabular(2),
        }
    }

    #[test]
    fn bisimilar_pair_is_at_zero() {
        let mut m = random_exbmdp(3, 3, 2, 1, NoiseFamily::IidDiscrete);
        m.task.reward[2] = m.task.reward[1].clone();
        m.task.transition[2] = m.task.transition[1].clone();
        let d = metric_fixed_point(&m, None, MetricSpec::new(MetricKind::Bsm, 1.0, 0.9).unwrap(), 1e-10, 10_000).unwrap();
        assert!(d.get(1, 2) < 1e-12, "{}", d.get(1, 2));
    }

    #[test]
    fn pbsm_uniform_chain() {
        let m = uniform_chain_instance();
        let pi = Policy::uniform(2, 1);
        let d = metric_fixed_point(&m, Some(&pi), MetricSpec::new(MetricKind::Pbsm, 1.0, 0.5).unwrap(), 1e-12, 1000).unwrap();
        assert_eq!(d.values, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn mico_uniform_chain_solves_linear_system() {
        let m = uniform_chain_instance();
        let pi = Policy::uniform(2, 1);
        let d = metric_fixed_point(&m, Some(&pi), MetricSpec::new(MetricKind::Mico, 1.0, 0.5).unwrap(), 1e-13, 1000).unwrap();
        assert!((d.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((d.get(1, 1) - 0.5).abs() < 1e-12);
        assert!((d.get(0, 1) - 1.5).abs() < 1e-12);
        let alias = simsr_exact(&m, &pi, 1.0, 0.5, 1e-13, 1000).unwrap();
        assert_eq!(alias, d);
    }

    #[test]
    fn mico_deterministic_chain_has_zero_diagonal() {
        let mut m = uniform_chain_instance();
        m.task.transition = vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]];
        let pi = Policy::uniform(2, 1);
        let d = metric_fixed_point(&m, Some(&pi), MetricSpec::new(MetricKind::Mico, 1.0, 0.5).unwrap(), 1e-12, 1000).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
        assert!(d.get(0, 1) > 0.0);
    }

    #[test]
    fn policy_metrics_need_policy() {
        let m = uniform_chain_instance();
        let spec = MetricSpec::new(MetricKind::Pbsm, 1.0, 0.5).unwrap();
        assert!(matches!(metric_fixed_point(&m, None, spec, 1e-10, 10), Err(Error::Precondition(_))));
    }

    #[test]
    fn iteration_cap_reports_trace() {
        let m = random_exbmdp(4, 3, 2, 2, NoiseFamily::IidDiscrete);
        let spec = MetricSpec::new(MetricKind::Bsm, 1.0, 0.9).unwrap();
        match metric_fixed_point(&m, None, spec, 1e-10, 3) {
            Err(Error::Convergence { iterations: 3, trace, .. }) => assert_eq!(trace.len(), 3),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn anchor_pair_counts() {
        assert!(anchor_positive_pairs(&random_exbmdp(1, 3, 2, 1, NoiseFamily::IidDiscrete)).unwrap().is_empty());
        assert_eq!(anchor_positive_pairs(&random_exbmdp(1, 2, 2, 2, NoiseFamily::IidDiscrete)).unwrap().len(), 2);
        let pairs = anchor_positive_pairs(&random_exbmdp(1, 3, 2, 3, NoiseFamily::Custom)).unwrap();
        assert_eq!(pairs.len(), 9);
        let m = random_exbmdp(1, 3, 2, 3, NoiseFamily::Custom);
        for (x, y) in pairs {
            assert_eq!(m.split(x).0, m.split(y).0);
            assert_ne!(m.split(x).1, m.split(y).1);
        }
    }

    #[test]
    fn bsm_is_pseudometric_and_contracts() {
        let m = random_exbmdp(8, 3, 2, 2, NoiseFamily::Custom);
        let d = metric_fixed_point(&m, None, MetricSpec::new(MetricKind::Bsm, 1.0, 0.9).unwrap(), 1e-10, 10_000).unwrap();
        assert!(d.asymmetry() < 1e-12);
        assert!(d.triangle_violation() < 1e-8);
        assert!(d.values.iter().enumerate().all(|(i, r)| r[i] == 0.0));
        assert!(d.contraction_excess() <= 1e-12);
        let g = grounded_transition(&m).unwrap();
        assert!(operator_residual(&g, None, &d).unwrap() < 1e-9);
    }

    #[test]
    fn csv_export_has_header() {
        let m = uniform_chain_instance();
        let pi = Policy::uniform(2, 1);
        let d = metric_fixed_point(&m, Some(&pi), MetricSpec::new(MetricKind::Pbsm, 1.0, 0.5).unwrap(), 1e-12, 100).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "row,col,value");
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("0,1,1\n"));
    }
}
