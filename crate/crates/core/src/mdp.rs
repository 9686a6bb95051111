//! Finite exogenous block MDPs and the exact probabilistic machinery built on
//! them: grounded transitions, policy-induced chains, stationary
//! distributions and value iteration.
//!
//! Latent states are pairs `z = (s, xi)` of a task-relevant state `s` and a
//! noise value `xi`. They are flattened to a single observation index
//! `x = s * n_noise + xi`, which is also the index used by tabular policies
//! and by every exact metric.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::noise::ProjectionMatrix;
use crate::rng;

/// Row-stochastic tolerance used by every validator in this module.
pub const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteLatentMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    /// Initial task-state distribution `p(s_0)`.
    pub initial: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Every row of the noise transition is the same distribution.
    IidDiscrete,
    /// `xi' = (xi + 1) mod frames`, a looping video.
    FrameIndex { frames: usize },
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseChain {
    pub n_noise: usize,
    /// `transition[xi][xi']`
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    #[serde(flatten)]
    pub kind: NoiseKind,
    /// Distribution used to resample the noise of positive examples.
    pub resample: Vec<f64>,
}

impl NoiseChain {
    /// A single noise value: the EX-BMDP degenerates to its task MDP.
    pub fn trivial() -> Self {
        Self::iid(vec![1.0])
    }

    pub fn iid(row: Vec<f64>) -> Self {
        let n = row.len();
        Self {
            n_noise: n,
            transition: vec![row.clone(); n],
            initial: row.clone(),
            kind: NoiseKind::IidDiscrete,
            resample: row,
        }
    }

    /// Frame-index noise of a looping video with `frames` frames.
    pub fn frame_index(frames: usize) -> Self {
        let transition = (0..frames)
            .map(|f| linalg::one_hot(frames, (f + 1) % frames))
            .collect();
        let uniform = vec![1.0 / frames as f64; frames];
        Self {
            n_noise: frames,
            transition,
            initial: uniform.clone(),
            kind: NoiseKind::FrameIndex { frames },
            resample: uniform,
        }
    }

    /// A fixed background per run: the noise never changes once drawn.
    pub fn stationary(initial: Vec<f64>) -> Self {
        let n = initial.len();
        Self {
            n_noise: n,
            transition: (0..n).map(|i| linalg::one_hot(n, i)).collect(),
            initial: initial.clone(),
            kind: NoiseKind::Custom,
            resample: initial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmissionMode {
    /// Observations are the index pair `(s, xi)`.
    Tabular,
    /// `x = concat(feature(s), noise_vector)`.
    Feature,
    /// `x = A * concat(feature(s), noise_vector)`.
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum NoiseEmission {
    /// The discrete noise value as a scaled one-hot block of length `n_noise`.
    EmbedDiscrete { scale: f64 },
    /// A fresh isotropic Gaussian draw of dimension `dim` on every emission.
    Gaussian { mu: f64, sigma: f64, dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionSpec {
    pub mode: EmissionMode,
    pub state_features: Vec<Vec<f64>>,
    pub noise: NoiseEmission,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<ProjectionMatrix>,
}

impl EmissionSpec {
    pub fn tabular(n_states: usize) -> Self {
        Self {
            mode: EmissionMode::Tabular,
            state_features: one_hot_features(n_states),
            noise: NoiseEmission::EmbedDiscrete { scale: 1.0 },
            projection: None,
        }
    }

    pub fn feature(n_states: usize, noise: NoiseEmission) -> Self {
        Self {
            mode: EmissionMode::Feature,
            state_features: one_hot_features(n_states),
            noise,
            projection: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.state_features.first().map_or(0, Vec::len)
    }

    /// Length of the noise block for a chain with `n_noise` values.
    pub fn noise_dim(&self, n_noise: usize) -> usize {
        match self.noise {
            NoiseEmission::EmbedDiscrete { .. } => n_noise,
            NoiseEmission::Gaussian { dim, .. } => dim,
        }
    }

    /// True when `(s, xi)` determines the emitted observation exactly.
    pub fn is_deterministic(&self) -> bool {
        self.mode == EmissionMode::Tabular
            || matches!(self.noise, NoiseEmission::EmbedDiscrete { .. })
            || matches!(self.noise, NoiseEmission::Gaussian { dim: 0, .. })
    }
}

pub fn one_hot_features(n_states: usize) -> Vec<Vec<f64>> {
    (0..n_states).map(|s| linalg::one_hot(n_states, s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExBmdp {
    pub task: FiniteLatentMdp,
    pub noise: NoiseChain,
    pub emission: EmissionSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Index { state: usize, noise: usize },
    Vector(Vec<f64>),
}

impl ExBmdp {
    pub fn n_obs(&self) -> usize {
        self.task.n_states * self.noise.n_noise
    }

    pub fn obs_index(&self, state: usize, noise: usize) -> usize {
        state * self.noise.n_noise + noise
    }

    /// Inverse of [`ExBmdp::obs_index`].
    pub fn split(&self, x: usize) -> (usize, usize) {
        (x / self.noise.n_noise, x % self.noise.n_noise)
    }

    /// Dimension of emitted observation vectors (feature and projected modes).
    pub fn obs_dim(&self) -> usize {
        self.emission.feature_dim() + self.emission.noise_dim(self.noise.n_noise)
    }

    /// Unprojected `concat(feature(s), noise_vector)`.
    pub fn latent_vector<R: rand::Rng + ?Sized>(&self, state: usize, noise: usize, rng: &mut R) -> Vec<f64> {
        let mut v = self.emission.state_features[state].clone();
        match self.emission.noise {
            NoiseEmission::EmbedDiscrete { scale } => {
                let mut block = vec![0.0; self.noise.n_noise];
                block[noise] = scale;
                v.extend(block);
            }
            NoiseEmission::Gaussian { mu, sigma, dim } => {
                let normal = rand_distr::Normal::new(mu, sigma).expect("sigma validated nonnegative");
                v.extend((0..dim).map(|_| rng.sample(normal)));
            }
        }
        v
    }

    /// The vector view of `(s, xi)`: the emitted observation in feature and
    /// projected modes, and the unprojected feature concatenation for tabular
    /// instances (the canonical input for learned encoders).
    pub fn observation_vector<R: rand::Rng + ?Sized>(&self, state: usize, noise: usize, rng: &mut R) -> Vec<f64> {
        let z = self.latent_vector(state, noise, rng);
        match (&self.emission.mode, &self.emission.projection) {
            (EmissionMode::Projected, Some(p)) => p.apply(&z),
            _ => z,
        }
    }

    /// Joint transition over flattened latent indices, built only from the
    /// two factors: `P[x][a][x'] = p(s'|s,a) * p(xi'|xi)`.
    pub fn latent_transition(&self) -> Vec<Vec<Vec<f64>>> {
        let n_obs = self.n_obs();
        let nn = self.noise.n_noise;
        (0..n_obs)
            .map(|x| {
                let (s, xi) = self.split(x);
                (0..self.task.n_actions)
                    .map(|a| {
                        let mut row = vec![0.0; n_obs];
                        for (s2, &ps) in self.task.transition[s][a].iter().enumerate() {
                            if ps == 0.0 {
                                continue;
                            }
                            for (xi2, &pn) in self.noise.transition[xi].iter().enumerate() {
                                row[s2 * nn + xi2] = ps * pn;
                            }
                        }
                        row
                    })
                    .collect()
            })
            .collect()
    }

    /// Initial distribution over flattened latent indices.
    pub fn latent_initial(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_obs());
        for &ps in &self.task.initial {
            for &pn in &self.noise.initial {
                out.push(ps * pn);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, msg: impl Into<String>) {
        self.issues.push(msg.into());
    }
}

fn check_distribution(report: &mut ValidationReport, what: &str, row: &[f64], len: usize) {
    if row.len() != len {
        report.push(format!("{what}: length {} (expected {len})", row.len()));
        return;
    }
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        report.push(format!("{what}: invalid entry {p}"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        report.push(format!("{what}: sums to {sum}"));
    }
}

/// Lists every violated invariant; an empty report means the instance is well formed.
pub fn validate(m: &ExBmdp) -> ValidationReport {
    let mut r = ValidationReport::default();
    let t = &m.task;
    if t.n_states == 0 || t.n_actions == 0 {
        r.push("task: counts must be at least 1");
    }
    if !(0.0..1.0).contains(&t.gamma) {
        r.push(format!("task: discount {} outside [0, 1)", t.gamma));
    }
    if t.transition.len() != t.n_states {
        r.push(format!("task.transition: {} state blocks (expected {})", t.transition.len(), t.n_states));
    }
    for (s, block) in t.transition.iter().enumerate() {
        if block.len() != t.n_actions {
            r.push(format!("task.transition[{s}]: {} actions (expected {})", block.len(), t.n_actions));
        }
        for (a, row) in block.iter().enumerate() {
            check_distribution(&mut r, &format!("task.transition[{s}][{a}]"), row, t.n_states);
        }
    }
    if t.reward.len() != t.n_states || t.reward.iter().any(|row| row.len() != t.n_actions) {
        r.push("task.reward: shape does not match n_states x n_actions");
    }
    for (s, row) in t.reward.iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            r.push(format!("task.reward[{s}]: non-finite value"));
        }
    }
    check_distribution(&mut r, "task.initial", &t.initial, t.n_states);

    let n = &m.noise;
    if n.n_noise == 0 {
        r.push("noise: n_noise must be at least 1");
    }
    if n.transition.len() != n.n_noise {
        r.push(format!("noise.transition: {} rows (expected {})", n.transition.len(), n.n_noise));
    }
    for (i, row) in n.transition.iter().enumerate() {
        check_distribution(&mut r, &format!("noise.transition[{i}]"), row, n.n_noise);
    }
    check_distribution(&mut r, "noise.initial", &n.initial, n.n_noise);
    check_distribution(&mut r, "noise.resample", &n.resample, n.n_noise);
    match n.kind {
        NoiseKind::FrameIndex { frames } => {
            if frames != n.n_noise {
                r.push(format!("noise: frame-index with {frames} frames but n_noise {}", n.n_noise));
            }
            for (i, row) in n.transition.iter().enumerate() {
                let next = (i + 1) % n.n_noise.max(1);
                if row.iter().enumerate().any(|(j, &p)| p != if j == next { 1.0 } else { 0.0 }) {
                    r.push(format!("noise.transition[{i}]: not the cyclic shift to {next}"));
                }
            }
        }
        NoiseKind::IidDiscrete => {
            if let Some(first) = n.transition.first() {
                if n.transition.iter().any(|row| max_abs_diff(row, first) > ROW_TOL) {
                    r.push("noise: iid-discrete rows differ");
                }
                if max_abs_diff(&n.resample, first) > ROW_TOL {
                    r.push("noise: iid-discrete resample distribution differs from the row distribution");
                }
            }
        }
        NoiseKind::Custom => {}
    }

    let e = &m.emission;
    if e.state_features.len() != t.n_states {
        r.push(format!("emission: {} feature vectors (expected {})", e.state_features.len(), t.n_states));
    }
    let fd = e.feature_dim();
    if e.state_features.iter().any(|f| f.len() != fd || f.iter().any(|v| !v.is_finite())) {
        r.push("emission: feature vectors must share one finite length");
    }
    if e.mode != EmissionMode::Tabular {
        'outer: for i in 0..e.state_features.len() {
            for j in 0..i {
                if max_abs_diff(&e.state_features[i], &e.state_features[j]) == 0.0 {
                    r.push(format!("emission: states {j} and {i} share a feature vector (block structure broken)"));
                    break 'outer;
                }
            }
        }
    }
    if let NoiseEmission::Gaussian { sigma, mu, .. } = e.noise {
        if !(sigma >= 0.0 && sigma.is_finite() && mu.is_finite()) {
            r.push(format!("emission: invalid gaussian parameters mu={mu} sigma={sigma}"));
        }
    }
    if e.mode == EmissionMode::Projected {
        match &e.projection {
            None => r.push("emission: projected mode without a projection matrix"),
            Some(p) => {
                let dim = fd + e.noise_dim(n.n_noise);
                if p.dim != dim {
                    r.push(format!("emission: projection dimension {} (expected {dim})", p.dim));
                } else if p.inverse_residual() > crate::noise::INVERSE_TOL {
                    r.push("emission: projection inverse residual too large");
                }
            }
        }
    }
    r
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

// ---------------------------------------------------------------------------
// Grounded dynamics

/// Dynamics of an EX-BMDP seen from its finite observation set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedMdp {
    pub n_obs: usize,
    pub n_actions: usize,
    /// `transition[x][a][x']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[x][a] = R(phi*(x), a)`
    pub reward: Vec<Vec<f64>>,
    /// `phi*(x)`
    pub state_of: Vec<usize>,
    pub noise_of: Vec<usize>,
    pub gamma: f64,
}

impl GroundedMdp {
    /// Unordered pairs `(x, x+)`, `x < x+`, sharing their task-relevant state.
    pub fn anchor_positive_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for x in 0..self.n_obs {
            for y in x + 1..self.n_obs {
                if self.state_of[x] == self.state_of[y] {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// `P(x'|x,a) = sum_z' p(z'|q^-1(x),a) q(x'|z')` for tabular emissions.
pub fn grounded_transition(m: &ExBmdp) -> Result<GroundedMdp> {
    if m.emission.mode != EmissionMode::Tabular {
        return Err(Error::UnsupportedMode(format!("{:?}", m.emission.mode).to_lowercase()));
    }
    Ok(ground(m))
}

/// Grounding over latent indices, valid whenever emission is injective on `(s, xi)`.
pub(crate) fn ground(m: &ExBmdp) -> GroundedMdp {
    let n_obs = m.n_obs();
    let (state_of, noise_of): (Vec<_>, Vec<_>) = (0..n_obs).map(|x| m.split(x)).unzip();
    let reward = state_of.iter().map(|&s| m.task.reward[s].clone()).collect();
    GroundedMdp {
        n_obs,
        n_actions: m.task.n_actions,
        transition: m.latent_transition(),
        reward,
        state_of,
        noise_of,
        gamma: m.task.gamma,
    }
}

// ---------------------------------------------------------------------------
// Policies

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// `table[x][a]`
    pub table: Vec<Vec<f64>>,
    pub exo_free: bool,
}

impl Policy {
    pub fn uniform(n_obs: usize, n_actions: usize) -> Self {
        Self {
            table: vec![vec![1.0 / n_actions as f64; n_actions]; n_obs],
            exo_free: true,
        }
    }

    /// Lift a per-task-state table to observations; the result is exo-free.
    pub fn from_state_table(m: &ExBmdp, per_state: &[Vec<f64>]) -> Self {
        let table = (0..m.n_obs()).map(|x| per_state[m.split(x).0].clone()).collect();
        Self { table, exo_free: true }
    }

    /// Deterministic policy from one action per observation. The exo-free flag
    /// is computed, not assumed.
    pub fn deterministic(m: &ExBmdp, actions: &[usize]) -> Self {
        let table = actions
            .iter()
            .map(|&a| linalg::one_hot(m.task.n_actions, a))
            .collect();
        let mut p = Self { table, exo_free: false };
        p.exo_free = p.is_exo_free(&(0..m.n_obs()).map(|x| m.split(x).0).collect::<Vec<_>>());
        p
    }

    /// True when observations with equal task state share their action distribution.
    pub fn is_exo_free(&self, state_of: &[usize]) -> bool {
        for x in 0..self.table.len() {
            for y in x + 1..self.table.len() {
                if state_of[x] == state_of[y] && max_abs_diff(&self.table[x], &self.table[y]) > ROW_TOL {
                    return false;
                }
            }
        }
        true
    }

    pub fn validate(&self, n_obs: usize, n_actions: usize) -> ValidationReport {
        let mut r = ValidationReport::default();
        if self.table.len() != n_obs {
            r.push(format!("policy: {} rows (expected {n_obs})", self.table.len()));
        }
        for (x, row) in self.table.iter().enumerate() {
            check_distribution(&mut r, &format!("policy[{x}]"), row, n_actions);
        }
        r
    }
}

/// Markov chain and expected reward induced by a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyChain {
    /// `matrix[x][x'] = E_{a~pi}[P(x'|x,a)]`
    pub matrix: Vec<Vec<f64>>,
    /// `reward[x] = E_{a~pi}[R(x,a)]`
    pub reward: Vec<f64>,
}

pub fn policy_chain(g: &GroundedMdp, pi: &Policy) -> Result<PolicyChain> {
    if pi.table.len() != g.n_obs || pi.table.iter().any(|r| r.len() != g.n_actions) {
        return Err(Error::Shape(format!(
            "policy is {}x{}, grounded model has {} observations and {} actions",
            pi.table.len(),
            pi.table.first().map_or(0, Vec::len),
            g.n_obs,
            g.n_actions
        )));
    }
    let mut matrix = vec![vec![0.0; g.n_obs]; g.n_obs];
    let mut reward = vec![0.0; g.n_obs];
    for x in 0..g.n_obs {
        for (a, &w) in pi.table[x].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            reward[x] += w * g.reward[x][a];
            for (m, p) in matrix[x].iter_mut().zip(&g.transition[x][a]) {
                *m += w * p;
            }
        }
    }
    Ok(PolicyChain { matrix, reward })
}

/// Stationary distribution of a row-stochastic matrix, started from uniform.
///
/// Iterates the lazy chain `(I + P) / 2`: it has the stationary vectors of `P`
/// and its powers converge to the same limit as Cesàro averages of `P^t`, but
/// geometrically, so periodic chains converge too.
pub fn stationary_distribution(chain: &[Vec<f64>], tol: f64, max_iters: usize) -> Result<Vec<f64>> {
    let n = chain.len();
    if n == 0 || chain.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("stationary_distribution needs a nonempty square matrix".into()));
    }
    let step = |rho: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (x, &w) in rho.iter().enumerate() {
            if w != 0.0 {
                for (o, p) in out.iter_mut().zip(&chain[x]) {
                    *o += w * p;
                }
            }
        }
        out
    };
    let residual = |rho: &[f64]| -> f64 {
        step(rho).iter().zip(rho).map(|(a, b)| (a - b).abs()).sum()
    };
    let mut rho = vec![1.0 / n as f64; n];
    let mut res = residual(&rho);
    let mut iters = 0;
    while res > tol {
        if iters >= max_iters {
            return Err(Error::Convergence { iterations: iters, residual: res, trace: vec![] });
        }
        let next = step(&rho);
        for (r, p) in rho.iter_mut().zip(&next) {
            *r = 0.5 * (*r + p);
        }
        let total: f64 = rho.iter().sum();
        rho.iter_mut().for_each(|r| *r /= total);
        res = residual(&rho);
        iters += 1;
    }
    Ok(rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSolution {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// Every action attaining the max in each state (ties are kept).
    pub optimal_actions: Vec<Vec<usize>>,
    pub iterations: usize,
    pub residual: f64,
}

const VI_MAX_ITERS: usize = 1_000_000;

pub fn value_iteration(mdp: &FiniteLatentMdp, tol: f64) -> Result<ValueSolution> {
    let backup = |v: &[f64]| -> Vec<Vec<f64>> {
        (0..mdp.n_states)
            .map(|s| {
                (0..mdp.n_actions)
                    .map(|a| mdp.reward[s][a] + mdp.gamma * linalg::dot(&mdp.transition[s][a], v))
                    .collect()
            })
            .collect()
    };
    let greedy = |q: &[Vec<f64>]| -> Vec<f64> {
        q.iter().map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect()
    };
    let mut v = vec![0.0; mdp.n_states];
    let mut iterations = 0;
    loop {
        let next = greedy(&backup(&v));
        let residual = next.iter().zip(&v).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        iterations += 1;
        if residual <= tol {
            let q = backup(&v);
            let v_final = greedy(&q);
            let residual = v_final.iter().zip(&v).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            let tie = 2.0 * tol / (1.0 - mdp.gamma) + 1e-12;
            let optimal_actions = q
                .iter()
                .zip(&v_final)
                .map(|(row, &best)| (0..row.len()).filter(|&a| row[a] >= best - tie).collect())
                .collect();
            return Ok(ValueSolution { q, v: v_final, optimal_actions, iterations, residual });
        }
        if iterations >= VI_MAX_ITERS {
            return Err(Error::Convergence { iterations, residual, trace: vec![] });
        }
    }
}

/// Exact `V^pi` on a grounded model by solving `(I - gamma P^pi) V = R^pi`.
pub fn policy_value(g: &GroundedMdp, pi: &Policy) -> Result<Vec<f64>> {
    let chain = policy_chain(g, pi)?;
    let n = g.n_obs;
    let a = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        (if i == j { 1.0 } else { 0.0 }) - g.gamma * chain.matrix[i][j]
    });
    let b = nalgebra::DVector::from_vec(chain.reward);
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Invalid("policy evaluation system is singular".into()))?;
    Ok(sol.iter().cloned().collect())
}

// ---------------------------------------------------------------------------
// Oracle encoder

/// `phi*(x)`: the task-relevant state that generated `obs`.
pub fn oracle_encode(m: &ExBmdp, obs: &Observation) -> Result<usize> {
    match obs {
        Observation::Index { state, noise } => {
            if *state >= m.task.n_states || *noise >= m.noise.n_noise {
                return Err(Error::Invalid(format!(
                    "observation ({state}, {noise}) outside a {}x{} emission support",
                    m.task.n_states, m.noise.n_noise
                )));
            }
            Ok(*state)
        }
        Observation::Vector(x) => {
            if x.len() != m.obs_dim() {
                return Err(Error::Shape(format!("observation has {} entries, expected {}", x.len(), m.obs_dim())));
            }
            let block = match (&m.emission.mode, &m.emission.projection) {
                (EmissionMode::Projected, Some(p)) => crate::noise::recover_state(p, x, m.emission.feature_dim())?,
                (EmissionMode::Projected, None) => {
                    return Err(Error::Invalid("projected mode without a projection matrix".into()))
                }
                _ => x[..m.emission.feature_dim()].to_vec(),
            };
            let (best, dist) = m
                .emission
                .state_features
                .iter()
                .enumerate()
                .map(|(s, f)| (s, f.iter().zip(&block).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            if dist.sqrt() > 1e-6 {
                return Err(Error::Invalid(format!(
                    "observation state block is {:.3e} away from every state feature",
                    dist.sqrt()
                )));
            }
            Ok(best)
        }
    }
}

// ---------------------------------------------------------------------------
// Random instances

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    IidDiscrete,
    FrameIndex,
    Custom,
}

impl std::str::FromStr for NoiseFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid-discrete" => Ok(Self::IidDiscrete),
            "frame-index" => Ok(Self::FrameIndex),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Invalid(format!("unknown noise kind `{other}`"))),
        }
    }
}

fn random_distribution<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // Exponential weights give a uniform draw from the simplex.
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
    let total: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|v| v / total).collect();
    // Put the rounding slack on the largest entry so the row sums to 1 exactly.
    let err = 1.0 - p.iter().sum::<f64>();
    let i = linalg::argmax(&p);
    p[i] += err;
    p
}

/// Keep the `branching` most likely successors of every transition row and
/// renormalize. Ties go to the lower state index.
pub fn sparsify_transitions(task: &mut FiniteLatentMdp, branching: usize) {
    let b = branching.max(1);
    for row in task.transition.iter_mut().flatten() {
        if b >= row.len() {
            continue;
        }
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        let keep = &order[..b];
        let total: f64 = keep.iter().map(|&i| row[i]).sum();
        let mut next = vec![0.0; row.len()];
        for &i in keep {
            next[i] = row[i] / total;
        }
        let err = 1.0 - next.iter().sum::<f64>();
        next[order[0]] += err;
        *row = next;
    }
}

/// Seeded tabular instance with dense random dynamics, rewards in `[0, 1)`,
/// discount 0.9 and one-hot state features.
pub fn random_exbmdp(seed: u64, n_states: usize, n_actions: usize, n_noise: usize, family: NoiseFamily) -> ExBmdp {
    assert!(n_states >= 1 && n_actions >= 1 && n_noise >= 1, "counts must be at least 1");
    let mut rng = rng::seeded(seed);
    let transition = (0..n_states)
        .map(|_| (0..n_actions).map(|_| random_distribution(n_states, &mut rng)).collect())
        .collect();
    let reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
        .collect();
    let task = FiniteLatentMdp {
        n_states,
        n_actions,
        transition,
        reward,
        gamma: 0.9,
        initial: vec![1.0 / n_states as f64; n_states],
    };
    let noise = match family {
        _ if n_noise == 1 => NoiseChain::trivial(),
        NoiseFamily::IidDiscrete => NoiseChain::iid(random_distribution(n_noise, &mut rng)),
        NoiseFamily::FrameIndex => NoiseChain::frame_index(n_noise),
        NoiseFamily::Custom => {
            let transition = (0..n_noise).map(|_| random_distribution(n_noise, &mut rng)).collect();
            let initial = vec![1.0 / n_noise as f64; n_noise];
            NoiseChain {
                n_noise,
                transition,
                initial: initial.clone(),
                kind: NoiseKind::Custom,
                resample: initial,
            }
        }
    };
    ExBmdp { task, noise, emission: EmissionSpec::tabular(n_states) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(p: Vec<Vec<Vec<f64>>>, reward: Vec<Vec<f64>>, noise: NoiseChain) -> ExBmdp {
        let n_states = p.len();
        ExBmdp {
            task: FiniteLatentMdp {
                n_states,
                n_actions: p[0].len(),
                transition: p,
                reward,
                gamma: 0.9,
                initial: vec![1.0 / n_states as f64; n_states],
            },
            noise,
            emission: EmissionSpec::tabular(n_states),
        }
    }

    #[test]
    fn validate_accepts_well_formed() {
        let m = two_state(
            vec![vec![vec![0.5, 0.5]], vec![vec![1.0, 0.0]]],
            vec![vec![0.0], vec![1.0]],
            NoiseChain::trivial(),
        );
        assert!(validate(&m).is_empty(), "{:?}", validate(&m));
    }

    #[test]
    fn validate_names_bad_row() {
        let m = two_state(
            vec![vec![vec![0.5, 0.4]], vec![vec![1.0, 0.0]]],
            vec![vec![0.0], vec![1.0]],
            NoiseChain::trivial(),
        );
        let r = validate(&m);
        assert_eq!(r.issues.len(), 1);
        assert!(r.issues[0].contains("task.transition[0][0]"), "{:?}", r);
    }

    #[test]
    fn validate_flags_discount_one() {
        let mut m = random_exbmdp(1, 2, 1, 1, NoiseFamily::IidDiscrete);
        m.task.gamma = 1.0;
        let r = validate(&m);
        assert!(r.issues.iter().any(|i| i.contains("discount")), "{:?}", r);
    }

    #[test]
    fn validate_flags_broken_cycle() {
        let mut m = random_exbmdp(1, 2, 1, 3, NoiseFamily::FrameIndex);
        m.noise.transition[0] = vec![1.0, 0.0, 0.0];
        assert!(validate(&m).issues.iter().any(|i| i.contains("cyclic")));
    }

    #[test]
    fn grounded_singleton() {
        let m = two_state(vec![vec![vec![1.0]]], vec![vec![0.0]], NoiseChain::trivial());
        let g = grounded_transition(&m).unwrap();
        assert_eq!(g.transition, vec![vec![vec![1.0]]]);
    }

    #[test]
    fn grounded_deterministic_product_is_one_hot() {
        let m = two_state(
            vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
            vec![vec![0.0], vec![1.0]],
            NoiseChain::frame_index(2),
        );
        let g = grounded_transition(&m).unwrap();
        for row in g.transition.iter().map(|r| &r[0]) {
            assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&p| p == 0.0).count(), 3);
        }
    }

    #[test]
    fn grounded_uniform_outer_product() {
        let m = two_state(
            vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            vec![vec![0.0], vec![0.0]],
            NoiseChain::iid(vec![0.5, 0.5]),
        );
        let g = grounded_transition(&m).unwrap();
        for x in 0..4 {
            assert_eq!(g.transition[x][0], vec![0.25; 4]);
        }
    }

    #[test]
    fn grounded_rejects_feature_mode() {
        let mut m = random_exbmdp(3, 2, 2, 2, NoiseFamily::IidDiscrete);
        m.emission.mode = EmissionMode::Feature;
        assert!(matches!(grounded_transition(&m), Err(Error::UnsupportedMode(_))));
    }

    #[test]
    fn factorization_marginals() {
        let m = random_exbmdp(11, 3, 2, 3, NoiseFamily::Custom);
        let g = grounded_transition(&m).unwrap();
        let nn = m.noise.n_noise;
        for x in 0..g.n_obs {
            let (s, xi) = m.split(x);
            for a in 0..g.n_actions {
                let row = &g.transition[x][a];
                for s2 in 0..m.task.n_states {
                    let marg: f64 = (0..nn).map(|k| row[s2 * nn + k]).sum();
                    assert!((marg - m.task.transition[s][a][s2]).abs() < 1e-12);
                }
                for xi2 in 0..nn {
                    let marg: f64 = (0..m.task.n_states).map(|k| row[k * nn + xi2]).sum();
                    assert!((marg - m.noise.transition[xi][xi2]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn policy_chain_cases() {
        let m = two_state(
            vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            NoiseChain::trivial(),
        );
        let g = grounded_transition(&m).unwrap();
        let det = Policy::deterministic(&m, &[1, 0]);
        let c = policy_chain(&g, &det).unwrap();
        assert_eq!(c.matrix, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(c.reward, vec![1.0, 0.0]);
        let uni = Policy::uniform(2, 2);
        let c = policy_chain(&g, &uni).unwrap();
        assert_eq!(c.matrix, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(policy_chain(&g, &Policy::uniform(3, 2)).is_err());
    }

    #[test]
    fn exo_free_chain_is_noise_consistent() {
        // Rows of same-s observations differ only by the noise factor.
        let m = two_state(
            vec![vec![vec![0.3, 0.7], vec![0.6, 0.4]], vec![vec![0.9, 0.1], vec![0.2, 0.8]]],
            vec![vec![0.0, 1.0], vec![0.5, 0.2]],
            NoiseChain::iid(vec![0.25, 0.75]),
        );
        let g = grounded_transition(&m).unwrap();
        let pi = Policy::from_state_table(&m, &[vec![0.4, 0.6], vec![1.0, 0.0]]);
        let c = policy_chain(&g, &pi).unwrap();
        // iid noise: both same-s rows are identical.
        assert_eq!(c.matrix[0], c.matrix[1]);
        assert_eq!(c.matrix[2], c.matrix[3]);
        // s-marginal of row 0 = 0.4*(0.3,0.7) + 0.6*(0.6,0.4)
        let s0: f64 = c.matrix[0][0] + c.matrix[0][1];
        assert!((s0 - (0.4 * 0.3 + 0.6 * 0.6)).abs() < 1e-12);
        assert!((c.matrix[0][0] - (0.4 * 0.3 + 0.6 * 0.6) * 0.25).abs() < 1e-12);
    }

    #[test]
    fn stationary_examples() {
        let s = stationary_distribution(&[vec![0.5, 0.5], vec![0.5, 0.5]], 1e-12, 100).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = stationary_distribution(&[vec![1.0, 0.0], vec![1.0, 0.0]], 1e-12, 1000).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        let s = stationary_distribution(&[vec![0.0, 1.0], vec![1.0, 0.0]], 1e-12, 100).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn stationary_periodic_three_cycle_with_bias() {
        // Periodic and not doubly stochastic from the start: 0 -> 1 -> 2 -> 0 except 2 splits.
        let p = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.5, 0.5, 0.0]];
        let s = stationary_distribution(&p, 1e-13, 100_000).unwrap();
        // Balance: rho0 = 0.5 rho2, rho1 = rho0 + 0.5 rho2, rho2 = rho1 -> (1, 2, 2)/5.
        for (a, b) in s.iter().zip([0.2, 0.4, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_reports_nonconvergence() {
        let p = vec![vec![0.999, 0.001], vec![0.001, 0.999]];
        let mut biased = p.clone();
        biased[0] = vec![0.9999, 0.0001];
        match stationary_distribution(&biased, 1e-15, 3) {
            Err(Error::Convergence { iterations, .. }) => assert_eq!(iterations, 3),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn value_iteration_examples() {
        let one = FiniteLatentMdp {
            n_states: 1,
            n_actions: 1,
            transition: vec![vec![vec![1.0]]],
            reward: vec![vec![1.0]],
            gamma: 0.5,
            initial: vec![1.0],
        };
        let sol = value_iteration(&one, 1e-12).unwrap();
        assert!((sol.v[0] - 2.0).abs() < 1e-11);

        let zero = random_exbmdp(5, 3, 2, 1, NoiseFamily::IidDiscrete);
        let mut zero = zero.task;
        zero.reward = vec![vec![0.0; 2]; 3];
        assert_eq!(value_iteration(&zero, 1e-12).unwrap().v, vec![0.0; 3]);

        let two = FiniteLatentMdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            reward: vec![vec![0.0], vec![1.0]],
            gamma: 0.9,
            initial: vec![0.5, 0.5],
        };
        let sol = value_iteration(&two, 1e-10).unwrap();
        assert!(sol.v[0].abs() < 1e-12);
        assert!((sol.v[1] - 10.0).abs() < 1e-8);
    }

    #[test]
    fn value_iteration_keeps_ties() {
        let m = FiniteLatentMdp {
            n_states: 1,
            n_actions: 3,
            transition: vec![vec![vec![1.0]; 3]],
            reward: vec![vec![1.0, 0.5, 1.0]],
            gamma: 0.5,
            initial: vec![1.0],
        };
        let sol = value_iteration(&m, 1e-12).unwrap();
        assert_eq!(sol.optimal_actions[0], vec![0, 2]);
    }

    #[test]
    fn reward_shift_moves_value_by_geometric_sum() {
        let m = random_exbmdp(9, 4, 3, 1, NoiseFamily::IidDiscrete).task;
        let base = value_iteration(&m, 1e-12).unwrap();
        let mut shifted = m.clone();
        shifted.reward.iter_mut().flatten().for_each(|r| *r += 0.7);
        let sol = value_iteration(&shifted, 1e-12).unwrap();
        for (a, b) in sol.v.iter().zip(&base.v) {
            assert!((a - b - 0.7 / (1.0 - m.gamma)).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_tabular() {
        let m = random_exbmdp(2, 4, 1, 8, NoiseFamily::FrameIndex);
        assert_eq!(oracle_encode(&m, &Observation::Index { state: 3, noise: 7 }).unwrap(), 3);
        assert!(oracle_encode(&m, &Observation::Index { state: 4, noise: 0 }).is_err());
    }

    #[test]
    fn random_instances() {
        let a = random_exbmdp(42, 3, 2, 2, NoiseFamily::IidDiscrete);
        let b = random_exbmdp(42, 3, 2, 2, NoiseFamily::IidDiscrete);
        assert_eq!(a, b);
        assert!(validate(&a).is_empty(), "{:?}", validate(&a));
        for fam in [NoiseFamily::IidDiscrete, NoiseFamily::FrameIndex, NoiseFamily::Custom] {
            let m = random_exbmdp(7, 3, 2, 4, fam);
            assert!(validate(&m).is_empty(), "{fam:?}: {:?}", validate(&m));
        }
        let noise_free = random_exbmdp(1, 3, 2, 1, NoiseFamily::Custom);
        assert_eq!(noise_free.n_obs(), 3);
        let g = grounded_transition(&noise_free).unwrap();
        assert_eq!(g.state_of, vec![0, 1, 2]);
    }

    #[test]
    fn json_round_trip_is_text_stable() {
        let m = random_exbmdp(123, 3, 2, 3, NoiseFamily::Custom);
        let text = m.to_json().unwrap();
        let back = ExBmdp::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), text);
    }
}
