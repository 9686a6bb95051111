//! Emission-layer noise: invertible random projections, observation sampling
//! and out-of-distribution noise shifts.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{EmissionMode, ExBmdp, NoiseChain, NoiseEmission, NoiseKind, Observation};
use crate::rng;

/// Elementwise bound on `A * A^-1 - I` for an accepted projection.
pub const INVERSE_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_RETRIES: usize = 8;

/// Full-rank square matrix with entries drawn from `N(mu_a, sigma_a^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    pub dim: usize,
    pub seed: u64,
    pub mu_a: f64,
    pub sigma_a: f64,
    pub matrix: Vec<Vec<f64>>,
    pub inverse: Vec<Vec<f64>>,
    /// 1-norm condition estimate `|A|_1 |A^-1|_1`.
    pub condition: f64,
    /// Rejected draws before this one.
    pub redraws: usize,
}

impl ProjectionMatrix {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.matrix.iter().map(|row| crate::linalg::dot(row, z)).collect()
    }

    pub fn apply_inverse(&self, x: &[f64]) -> Vec<f64> {
        self.inverse.iter().map(|row| crate::linalg::dot(row, x)).collect()
    }

    /// `max_ij |(A A^-1 - I)_ij|`
    pub fn inverse_residual(&self) -> f64 {
        inverse_residual(&self.matrix, &self.inverse)
    }

    /// Exact projection from a given matrix (tests and hand-built instances).
    pub fn from_matrix(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let dim = matrix.len();
        let (inverse, condition) = invert(&matrix)
            .ok_or(Error::SingularProjection(1))?;
        if inverse_residual(&matrix, &inverse) > INVERSE_TOL {
            return Err(Error::SingularProjection(1));
        }
        Ok(Self { dim, seed: 0, mu_a: f64::NAN, sigma_a: f64::NAN, matrix, inverse, condition, redraws: 0 })
    }
}

fn to_dmatrix(m: &[Vec<f64>]) -> DMatrix<f64> {
    let n = m.len();
    DMatrix::from_fn(n, n, |i, j| m[i][j])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn invert(m: &[Vec<f64>]) -> Option<(Vec<Vec<f64>>, f64)> {
    let a = to_dmatrix(m);
    let inv = a.clone().lu().try_inverse()?;
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let norm1 = |x: &DMatrix<f64>| {
        (0..x.ncols())
            .map(|j| x.column(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let cond = norm1(&a) * norm1(&inv);
    Some((from_dmatrix(&inv), cond))
}

fn inverse_residual(a: &[Vec<f64>], inv: &[Vec<f64>]) -> f64 {
    let prod = to_dmatrix(a) * to_dmatrix(inv);
    let mut worst = 0.0_f64;
    for i in 0..prod.nrows() {
        for j in 0..prod.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((prod[(i, j)] - target).abs());
        }
    }
    worst
}

/// Draw a `(n+m) x (n+m)` projection; redraw while the inverse residual
/// exceeds [`INVERSE_TOL`], up to `max_retries` draws in total.
pub fn build_projection(seed: u64, n: usize, m: usize, mu_a: f64, sigma_a: f64, max_retries: usize) -> Result<ProjectionMatrix> {
    let dim = n + m;
    if dim == 0 {
        return Err(Error::Invalid("projection dimension n + m must be at least 1".into()));
    }
    let normal = Normal::new(mu_a, sigma_a)
        .map_err(|e| Error::Invalid(format!("projection entry distribution: {e}")))?;
    let mut rng = rng::seeded(seed);
    for attempt in 0..max_retries.max(1) {
        let matrix: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| rng.sample(normal)).collect())
            .collect();
        if let Some((inverse, condition)) = invert(&matrix) {
            if inverse_residual(&matrix, &inverse) <= INVERSE_TOL {
                return Ok(ProjectionMatrix {
                    dim,
                    seed,
                    mu_a,
                    sigma_a,
                    matrix,
                    inverse,
                    condition,
                    redraws: attempt,
                });
            }
        }
    }
    Err(Error::SingularProjection(max_retries.max(1)))
}

/// Emit one observation of latent `(s, xi)`.
pub fn emit_observation<R: rand::Rng + ?Sized>(m: &ExBmdp, state: usize, noise: usize, rng: &mut R) -> Result<Observation> {
    if state >= m.task.n_states || noise >= m.noise.n_noise {
        return Err(Error::Invalid(format!(
            "latent ({state}, {noise}) outside {} states x {} noise values",
            m.task.n_states, m.noise.n_noise
        )));
    }
    Ok(match m.emission.mode {
        EmissionMode::Tabular => Observation::Index { state, noise },
        EmissionMode::Feature | EmissionMode::Projected => Observation::Vector(m.observation_vector(state, noise, rng)),
    })
}

/// First `n` entries of `A^-1 x`: the state feature block.
pub fn recover_state(p: &ProjectionMatrix, x: &[f64], n: usize) -> Result<Vec<f64>> {
    if x.len() != p.dim {
        return Err(Error::Shape(format!("observation has {} entries, projection is {}x{}", x.len(), p.dim, p.dim)));
    }
    if n > p.dim {
        return Err(Error::Shape(format!("state block of {n} exceeds projection dimension {}", p.dim)));
    }
    let mut z = p.apply_inverse(x);
    z.truncate(n);
    Ok(z)
}

/// Shifted noise chain with identical task factors. iid chains get a freshly
/// drawn row distribution, frame-index chains a new initial frame
/// distribution, and custom chains a permuted transition.
pub fn shift_noise_chain(chain: &NoiseChain, shift_seed: u64) -> NoiseChain {
    let mut rng = rng::seeded(rng::derive_seed(shift_seed, 0x00d));
    let n = chain.n_noise;
    let draw = |rng: &mut rng::Rng| -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let total: f64 = w.iter().sum();
        let mut p: Vec<f64> = w.iter().map(|v| v / total).collect();
        let err = 1.0 - p.iter().sum::<f64>();
        p[0] += err;
        p
    };
    match chain.kind {
        NoiseKind::IidDiscrete => {
            let mut row = chain.resample.clone();
            row.shuffle(&mut rng);
            let fresh = draw(&mut rng);
            // Mix a shuffled copy with a fresh draw so even uniform rows move.
            let mut mixed: Vec<f64> = row.iter().zip(&fresh).map(|(a, b)| 0.5 * (a + b)).collect();
            let err = 1.0 - mixed.iter().sum::<f64>();
            mixed[0] += err;
            NoiseChain::iid(mixed)
        }
        NoiseKind::FrameIndex { .. } => {
            let mut out = chain.clone();
            out.initial = draw(&mut rng);
            out
        }
        NoiseKind::Custom => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut out = chain.clone();
            out.transition = (0..n)
                .map(|i| (0..n).map(|j| chain.transition[perm[i]][perm[j]]).collect())
                .collect();
            out.initial = draw(&mut rng);
            out.resample = out.initial.clone();
            out
        }
    }
}

/// Shifted emission parameters: Gaussian noise gets twice the standard deviation.
pub fn shift_emission(spec: &crate::mdp::EmissionSpec) -> crate::mdp::EmissionSpec {
    let mut out = spec.clone();
    if let NoiseEmission::Gaussian { mu, sigma, dim } = spec.noise {
        out.noise = NoiseEmission::Gaussian { mu, sigma: 2.0 * sigma, dim };
    }
    out
}

/// OOD evaluation environment: same task block, shifted noise block.
pub fn ood_variant(m: &ExBmdp, shift_seed: u64) -> ExBmdp {
    ExBmdp {
        task: m.task.clone(),
        noise: if m.noise.n_noise > 1 { shift_noise_chain(&m.noise, shift_seed) } else { m.noise.clone() },
        emission: shift_emission(&m.emission),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_exbmdp, validate, EmissionSpec, NoiseFamily};

    #[test]
    fn scalar_projection_is_reciprocal() {
        let p = build_projection(3, 1, 0, 0.0, 1.0, 8).unwrap();
        assert!(p.matrix[0][0] != 0.0);
        assert!((p.inverse[0][0] - 1.0 / p.matrix[0][0]).abs() < 1e-15);
    }

    #[test]
    fn seeded_projection_inverts_and_repeats() {
        let p = build_projection(17, 2, 2, 0.0, 1.0, 8).unwrap();
        assert!(p.inverse_residual() < 1e-9);
        assert_eq!(p, build_projection(17, 2, 2, 0.0, 1.0, 8).unwrap());
        assert!(p.condition >= 1.0);
    }

    #[test]
    fn singular_draws_exhaust_retries() {
        match build_projection(1, 2, 1, 1.0, 0.0, 8) {
            Err(Error::SingularProjection(8)) => {}
            other => panic!("expected singular projection error, got {other:?}"),
        }
        assert!(build_projection(1, 0, 0, 0.0, 1.0, 8).is_err());
    }

    fn projected_instance(matrix: Vec<Vec<f64>>, sigma: f64, dim: usize) -> ExBmdp {
        let mut m = random_exbmdp(5, 2, 2, 1, NoiseFamily::IidDiscrete);
        m.emission = EmissionSpec::feature(2, NoiseEmission::Gaussian { mu: 0.0, sigma, dim });
        m.emission.mode = EmissionMode::Projected;
        m.emission.projection = Some(ProjectionMatrix::from_matrix(matrix).unwrap());
        m
    }

    #[test]
    fn emit_examples() {
        let m = random_exbmdp(5, 2, 2, 3, NoiseFamily::IidDiscrete);
        let mut rng = rng::seeded(0);
        assert_eq!(emit_observation(&m, 0, 2, &mut rng).unwrap(), Observation::Index { state: 0, noise: 2 });
        assert!(emit_observation(&m, 2, 0, &mut rng).is_err());

        let mut f = random_exbmdp(5, 2, 2, 1, NoiseFamily::IidDiscrete);
        f.emission = EmissionSpec::feature(2, NoiseEmission::Gaussian { mu: 0.0, sigma: 1.0, dim: 0 });
        assert_eq!(emit_observation(&f, 1, 0, &mut rng).unwrap(), Observation::Vector(vec![0.0, 1.0]));

        // A = 2I, one-hot s = (1, 0), noise vector (0.5) from N(0.5, 0).
        let mut p = projected_instance(vec![vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]], 0.0, 1);
        p.emission.noise = NoiseEmission::Gaussian { mu: 0.5, sigma: 0.0, dim: 1 };
        assert_eq!(emit_observation(&p, 0, 0, &mut rng).unwrap(), Observation::Vector(vec![2.0, 0.0, 1.0]));
    }

    #[test]
    fn recover_examples() {
        let id = ProjectionMatrix::from_matrix(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(recover_state(&id, &[0.3, 0.7, 9.0], 2).unwrap(), vec![0.3, 0.7]);
        assert_eq!(recover_state(&id, &[0.0; 3], 2).unwrap(), vec![0.0, 0.0]);
        assert!(recover_state(&id, &[0.0; 2], 2).is_err());

        let p = build_projection(99, 2, 2, 0.0, 1.0, 8).unwrap();
        let mut m = projected_instance(vec![vec![1.0; 1]], 1.0, 2);
        m.emission.projection = Some(p.clone());
        let mut rng = rng::seeded(4);
        for s in 0..2 {
            let z = m.latent_vector(s, 0, &mut rng);
            let x = p.apply(&z);
            let block = recover_state(&p, &x, 2).unwrap();
            for (a, b) in block.iter().zip(&z[..2]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projected_oracle_round_trip() {
        let p = build_projection(1234, 3, 2, 0.0, 1.0, 8).unwrap();
        let mut m = random_exbmdp(8, 3, 2, 1, NoiseFamily::IidDiscrete);
        m.emission = EmissionSpec::feature(3, NoiseEmission::Gaussian { mu: 0.0, sigma: 2.0, dim: 2 });
        m.emission.mode = EmissionMode::Projected;
        m.emission.projection = Some(p);
        assert!(validate(&m).is_empty(), "{:?}", validate(&m));
        let mut rng = rng::seeded(6);
        for i in 0..1000 {
            let s = i % 3;
            let obs = emit_observation(&m, s, 0, &mut rng).unwrap();
            assert_eq!(crate::mdp::oracle_encode(&m, &obs).unwrap(), s);
        }
    }

    #[test]
    fn gaussian_noise_moments() {
        let mut m = random_exbmdp(8, 1, 1, 1, NoiseFamily::IidDiscrete);
        let (mu, sigma) = (0.3, 1.7);
        m.emission = EmissionSpec::feature(1, NoiseEmission::Gaussian { mu, sigma, dim: 1 });
        let mut rng = rng::seeded(12);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| m.latent_vector(0, 0, &mut rng)[1]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = sigma / (n as f64).sqrt();
        let se_std = sigma / (2.0 * (n as f64 - 1.0)).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var.sqrt() - sigma).abs() < 3.0 * se_std, "std {}", var.sqrt());
    }

    #[test]
    fn ood_shifts_only_noise() {
        let m = random_exbmdp(21, 3, 2, 4, NoiseFamily::FrameIndex);
        let o = ood_variant(&m, 5);
        assert_eq!(o.task, m.task);
        assert_eq!(o.noise.transition, m.noise.transition);
        assert_ne!(o.noise.initial, m.noise.initial);
        assert!(validate(&o).is_empty());
        assert_eq!(o, ood_variant(&m, 5));

        let m = random_exbmdp(21, 3, 2, 4, NoiseFamily::IidDiscrete);
        let o = ood_variant(&m, 5);
        assert!(validate(&o).is_empty(), "{:?}", validate(&o));
        assert_ne!(o.noise.resample, m.noise.resample);
        for row in &o.noise.transition {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let m = random_exbmdp(21, 3, 2, 4, NoiseFamily::Custom);
        let o = ood_variant(&m, 5);
        assert!(validate(&o).is_empty(), "{:?}", validate(&o));

        let mut g = random_exbmdp(2, 3, 2, 1, NoiseFamily::IidDiscrete);
        g.emission = EmissionSpec::feature(3, NoiseEmission::Gaussian { mu: 0.0, sigma: 0.5, dim: 4 });
        let o = ood_variant(&g, 1);
        assert_eq!(o.emission.noise, NoiseEmission::Gaussian { mu: 0.0, sigma: 1.0, dim: 4 });
        assert_eq!(serde_json::to_string(&o.task).unwrap(), serde_json::to_string(&g.task).unwrap());
    }
}
