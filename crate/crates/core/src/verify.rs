//! Numeric certificates for the denoising properties of behavioral metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{metric_fixed_point_grounded, DistanceMatrix, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::kernels::{MetricKind, MetricSpec};
use crate::mdp::{
    grounded_transition, policy_chain, policy_value, value_iteration, EmissionSpec, ExBmdp, FiniteLatentMdp, GroundedMdp,
    NoiseChain, Policy,
};
use crate::transport::w1_value;

/// Pairs at or below this PBSM value are merged into one quotient class.
pub const MERGE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">")]
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub claim: String,
    pub instance: String,
    pub measured: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
}

impl Certificate {
    pub fn new(claim: &str, instance: &str, measured: f64, relation: Relation, threshold: f64) -> Self {
        let passed = match relation {
            Relation::AtMost => measured <= threshold,
            Relation::Above => measured > threshold,
        };
        Self {
            claim: claim.into(),
            instance: instance.into(),
            measured,
            relation,
            threshold,
            passed,
            details: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.into(), value);
        self
    }
}

fn max_over_pairs(d: &DistanceMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(x, y)| d.get(x, y)).fold(0.0, f64::max)
}

fn fixed_point(g: &GroundedMdp, pi: Option<&Policy>, kind: MetricKind, c_r: f64, c_t: f64) -> Result<DistanceMatrix> {
    metric_fixed_point_grounded(g, pi, MetricSpec::new(kind, c_r, c_t)?, DEFAULT_TOL, DEFAULT_MAX_ITERS)
}

/// Largest BSM value over same-state pairs, on an arbitrary grounded model.
pub fn verify_bsm_denoising_grounded(g: &GroundedMdp, instance: &str, c_r: f64, c_t: f64, tol: f64) -> Result<Certificate> {
    let pairs = g.anchor_positive_pairs();
    let d = fixed_point(g, None, MetricKind::Bsm, c_r, c_t)?;
    Ok(Certificate::new("bsm-denoising", instance, max_over_pairs(&d, &pairs), Relation::AtMost, tol)
        .with("pairs", pairs.len() as f64)
        .with("iterations", d.iterations as f64))
}

pub fn verify_bsm_denoising(m: &ExBmdp, instance: &str, c_r: f64, c_t: f64, tol: f64) -> Result<Certificate> {
    verify_bsm_denoising_grounded(&grounded_transition(m)?, instance, c_r, c_t, tol)
}

/// Negative control: make the reward depend on the noise value, which breaks
/// the exogenous structure the denoising property rests on.
pub fn inject_noise_reward(g: &mut GroundedMdp, scale: f64) {
    for x in 0..g.n_obs {
        for r in &mut g.reward[x] {
            *r += scale * g.noise_of[x] as f64;
        }
    }
}

pub fn verify_pbsm_exofree(m: &ExBmdp, pi: &Policy, instance: &str, c_r: f64, c_t: f64, tol: f64) -> Result<Certificate> {
    let g = grounded_transition(m)?;
    if !pi.is_exo_free(&g.state_of) {
        return Err(Error::Precondition("policy depends on the noise".into()));
    }
    let pairs = g.anchor_positive_pairs();
    let d = fixed_point(&g, Some(pi), MetricKind::Pbsm, c_r, c_t)?;
    Ok(Certificate::new("pbsm-exo-free-denoising", instance, max_over_pairs(&d, &pairs), Relation::AtMost, tol)
        .with("pairs", pairs.len() as f64))
}

/// Outcome of the counterexample construction.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub exbmdp: ExBmdp,
    /// Optimal, noise-dependent policy.
    pub policy: Policy,
    /// The same optimal actions, tie broken by the task state only.
    pub exo_free_policy: Policy,
    pub certificate: Certificate,
}

/// Three task states, two actions, two i.i.d. noise values, discount 0.5.
///
/// From `s0`, action 0 earns 1 and moves to the absorbing zero-reward `s1`;
/// action 1 earns 0 and moves to `s2`, which earns 2 on its way into `s1`.
/// Both actions are optimal at `s0` (value 1). The policy takes action 0 on
/// `(s0, xi0)` and action 1 on `(s0, xi1)`, so these two same-state
/// observations receive different rewards under it.
pub fn construct_pbsm_counterexample() -> Result<Counterexample> {
    let task = FiniteLatentMdp {
        n_states: 3,
        n_actions: 2,
        transition: vec![
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]],
        ],
        reward: vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![2.0, 2.0]],
        gamma: 0.5,
        initial: vec![1.0, 0.0, 0.0],
    };
    let m = ExBmdp { task, noise: NoiseChain::iid(vec![0.5, 0.5]), emission: EmissionSpec::tabular(3) };
    let g = grounded_transition(&m)?;
    let vi = value_iteration(&m.task, 1e-13)?;

    let (x, x_plus) = (m.obs_index(0, 0), m.obs_index(0, 1));
    let mut actions = vec![0usize; m.n_obs()];
    actions[x_plus] = 1;
    let policy = Policy::deterministic(&m, &actions);
    let exo_free_policy = Policy::deterministic(&m, &vec![0; m.n_obs()]);

    // Optimality: V^pi equals V* everywhere, and every chosen action is in the argmax set.
    let v_pi = policy_value(&g, &policy)?;
    let value_gap = (0..m.n_obs()).map(|y| (v_pi[y] - vi.v[g.state_of[y]]).abs()).fold(0.0, f64::max);
    let chosen_optimal = (0..m.n_obs()).all(|y| vi.optimal_actions[g.state_of[y]].contains(&actions[y]));
    let exo_dependent = !policy.is_exo_free(&g.state_of);

    let c_t = m.task.gamma;
    let d = fixed_point(&g, Some(&policy), MetricKind::Pbsm, 1.0, c_t)?;
    let d_free = fixed_point(&g, Some(&exo_free_policy), MetricKind::Pbsm, 1.0, c_t)?;
    let measured = d.get(x, x_plus);
    let mut certificate = Certificate::new("pbsm-counterexample", "built-in counterexample", measured, Relation::Above, 0.01)
        .with("value_gap", value_gap)
        .with("chosen_optimal", f64::from(u8::from(chosen_optimal)))
        .with("exo_dependent", f64::from(u8::from(exo_dependent)))
        .with("exo_free_distance", d_free.get(x, x_plus));
    certificate.passed &= value_gap <= 1e-9 && chosen_optimal && exo_dependent;
    Ok(Counterexample { exbmdp: m, policy, exo_free_policy, certificate })
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

/// Observation classes of the PBSM quotient: connected components of pairs at
/// distance at most `merge_tol`. Classes are numbered by first appearance.
pub fn quotient_classes(d: &DistanceMatrix, merge_tol: f64) -> Vec<usize> {
    let n = d.n();
    let mut parent: Vec<usize> = (0..n).collect();
    for x in 0..n {
        for y in x + 1..n {
            if d.get(x, y) <= merge_tol {
                let (a, b) = (find(&mut parent, x), find(&mut parent, y));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|x| {
            let r = find(&mut parent, x);
            if label[r] == usize::MAX {
                label[r] = next;
                next += 1;
            }
            label[r]
        })
        .collect()
}

fn pushforward(p: &[f64], class: &[usize], n_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_classes];
    for (x, &w) in p.iter().enumerate() {
        out[class[x]] += w;
    }
    out
}

fn independent(cost: &[Vec<f64>], p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        for (j, &qj) in q.iter().enumerate() {
            total += pi * qj * cost[i][j];
        }
    }
    total
}

/// Transition distances are preserved by the PBSM quotient map: both the
/// optimal-coupling and the independent-coupling expectations agree before
/// and after pushing next-observation distributions onto quotient classes.
pub fn verify_isometry_preservation(m: &ExBmdp, pi: &Policy, instance: &str, c_r: f64, c_t: f64, tol: f64) -> Result<Certificate> {
    let g = grounded_transition(m)?;
    let d = fixed_point(&g, Some(pi), MetricKind::Pbsm, c_r, c_t)?;
    let class = quotient_classes(&d, MERGE_TOL);
    let n_classes = class.iter().max().map_or(0, |c| c + 1);
    let n = g.n_obs;

    // Induced distance on classes; must not depend on the representatives.
    let mut rep = vec![usize::MAX; n_classes];
    for x in 0..n {
        if rep[class[x]] == usize::MAX {
            rep[class[x]] = x;
        }
    }
    let dq: Vec<Vec<f64>> = (0..n_classes).map(|a| (0..n_classes).map(|b| d.get(rep[a], rep[b])).collect()).collect();
    let inconsistency = (0..n)
        .flat_map(|x| (0..n).map(move |y| (x, y)))
        .map(|(x, y)| (d.get(x, y) - dq[class[x]][class[y]]).abs())
        .fold(0.0, f64::max);
    if inconsistency > 2.0 * MERGE_TOL {
        return Err(Error::Precondition(format!(
            "quotient distance is not well defined (representatives disagree by {inconsistency:e})"
        )));
    }

    let chain = policy_chain(&g, pi)?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|x| (x + 1..n).map(move |y| (x, y))).collect();
    let gaps: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|&(x, y)| {
            let (p, q) = (&chain.matrix[x], &chain.matrix[y]);
            let (pp, pq) = (pushforward(p, &class, n_classes), pushforward(q, &class, n_classes));
            let w_gap = (w1_value(&d.values, p, q)? - w1_value(&dq, &pp, &pq)?).abs();
            let i_gap = (independent(&d.values, p, q) - independent(&dq, &pp, &pq)).abs();
            Ok((w_gap, i_gap))
        })
        .collect::<Result<_>>()?;
    let w_gap = gaps.iter().map(|g| g.0).fold(0.0, f64::max);
    let i_gap = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    Ok(Certificate::new("isometry-preservation", instance, w_gap.max(i_gap), Relation::AtMost, tol)
        .with("w1_gap", w_gap)
        .with("independent_gap", i_gap)
        .with("n_obs", n as f64)
        .with("n_classes", n_classes as f64)
        .with("inconsistency", inconsistency))
}

/// MICo self-distances: zero on deterministic policy chains and when all
/// policy rewards agree; positive somewhere on stochastic chains with
/// distinct rewards.
pub fn verify_mico_self_distance(m: &ExBmdp, pi: &Policy, instance: &str, c_r: f64, c_t: f64) -> Result<Certificate> {
    let g = grounded_transition(m)?;
    verify_mico_self_distance_grounded(&g, pi, instance, c_r, c_t)
}

pub fn verify_mico_self_distance_grounded(g: &GroundedMdp, pi: &Policy, instance: &str, c_r: f64, c_t: f64) -> Result<Certificate> {
    let chain = policy_chain(g, pi)?;
    let deterministic = chain.matrix.iter().flatten().all(|&p| p.abs() < 1e-12 || (p - 1.0).abs() < 1e-12);
    let r0 = chain.reward.first().copied().unwrap_or(0.0);
    let equal_rewards = chain.reward.iter().all(|r| (r - r0).abs() < 1e-12);
    let d = fixed_point(g, Some(pi), MetricKind::Mico, c_r, c_t)?;
    let diag = (0..d.n()).map(|x| d.get(x, x)).fold(0.0, f64::max);
    let cert = if deterministic || equal_rewards {
        Certificate::new("mico-zero-self-distance", instance, diag, Relation::AtMost, 1e-8)
    } else {
        Certificate::new("mico-positive-self-distance", instance, diag, Relation::Above, 1e-3)
    };
    Ok(cert
        .with("deterministic_chain", f64::from(u8::from(deterministic)))
        .with("equal_rewards", f64::from(u8::from(equal_rewards))))
}

/// The standard certificate set on one tabular instance under the uniform
/// policy, plus the built-in counterexample. Certificates run in parallel and
/// come back in a fixed order.
pub fn standard_certificates(m: &ExBmdp, instance: &str, tol: f64) -> Result<Vec<Certificate>> {
    let pi = Policy::uniform(m.n_obs(), m.task.n_actions);
    let c_t = m.task.gamma;
    let jobs: Vec<Box<dyn Fn() -> Result<Certificate> + Sync + '_>> = vec![
        Box::new(|| verify_bsm_denoising(m, instance, 1.0, c_t, tol)),
        Box::new(|| verify_pbsm_exofree(m, &pi, instance, 1.0, c_t, tol)),
        Box::new(|| verify_isometry_preservation(m, &pi, instance, 1.0, c_t, 1e-9)),
        Box::new(|| verify_mico_self_distance(m, &pi, instance, 1.0, c_t)),
        Box::new(|| construct_pbsm_counterexample().map(|c| c.certificate)),
    ];
    jobs.par_iter().map(|job| job()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_exbmdp, NoiseFamily};

    #[test]
    fn bsm_denoising_holds_and_negative_control_fails() {
        let m = random_exbmdp(4, 3, 2, 3, NoiseFamily::IidDiscrete);
        assert!(verify_bsm_denoising(&m, "r", 1.0, 0.9, 1e-8).unwrap().passed);
        let mut g = grounded_transition(&m).unwrap();
        inject_noise_reward(&mut g, 0.5);
        assert!(!verify_bsm_denoising_grounded(&g, "control", 1.0, 0.9, 1e-8).unwrap().passed);
    }

    #[test]
    fn single_noise_value_is_vacuous() {
        let m = random_exbmdp(4, 3, 2, 1, NoiseFamily::IidDiscrete);
        let c = verify_bsm_denoising(&m, "r", 1.0, 0.9, 1e-8).unwrap();
        assert!(c.passed);
        assert_eq!(c.details["pairs"], 0.0);
    }

    #[test]
    fn exo_dependent_policy_is_rejected() {
        let m = random_exbmdp(4, 2, 2, 2, NoiseFamily::IidDiscrete);
        let pi = Policy::deterministic(&m, &[0, 1, 0, 0]);
        assert!(matches!(verify_pbsm_exofree(&m, &pi, "r", 1.0, 0.9, 1e-8), Err(Error::Precondition(_))));
    }

    #[test]
    fn counterexample_checks() {
        let c = construct_pbsm_counterexample().unwrap();
        assert!(c.certificate.passed, "{:?}", c.certificate);
        assert!(c.certificate.measured >= 1.0);
        assert!(c.certificate.details["exo_free_distance"] <= 1e-12);
    }

    #[test]
    fn quotient_without_zero_pairs_is_identity() {
        let m = random_exbmdp(8, 3, 2, 1, NoiseFamily::IidDiscrete);
        let pi = Policy::uniform(3, 2);
        let c = verify_isometry_preservation(&m, &pi, "r", 1.0, 0.9, 1e-9).unwrap();
        assert_eq!(c.details["n_classes"], 3.0);
        assert!(c.passed);
    }
}
