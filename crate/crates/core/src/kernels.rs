//! Primitive distances shared by the exact metrics and the learned losses.
//!
//! Every kernel here is symmetric in its two arguments. Kernels that feed
//! into loss functions also expose their gradient with respect to the first
//! argument (the second follows by symmetry).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2};

pub use crate::transport::{wasserstein1, Coupling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    /// Bisimulation metric: max over actions, 1-Wasserstein transition term.
    Bsm,
    /// Policy-dependent bisimulation metric.
    Pbsm,
    /// MICo: independent coupling of next-state distributions.
    Mico,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bsm" => Ok(Self::Bsm),
            "pbsm" => Ok(Self::Pbsm),
            // SimSR with the true transition model is the MICo recursion.
            "mico" | "simsr" => Ok(Self::Mico),
            other => Err(Error::Invalid(format!("unknown metric kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub c_r: f64,
    pub c_t: f64,
}

impl MetricSpec {
    pub fn new(kind: MetricKind, c_r: f64, c_t: f64) -> Result<Self> {
        let spec = Self { kind, c_r, c_t };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.c_r >= 0.0 && self.c_r.is_finite()) {
            return Err(Error::Invalid(format!("c_R must be nonnegative, got {}", self.c_r)));
        }
        if !(0.0..1.0).contains(&self.c_t) {
            return Err(Error::Invalid(format!("c_T must lie in [0, 1), got {}", self.c_t)));
        }
        Ok(())
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// `sqrt(|mu1 - mu2|^2 + |sigma1 - sigma2|^2)`, the 2-Wasserstein distance
/// between diagonal Gaussians.
pub fn w2_gaussian_factorized(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> Result<f64> {
    same_len(mu1, mu2)?;
    same_len(sigma1, sigma2)?;
    same_len(mu1, sigma1)?;
    if sigma1.iter().chain(sigma2).any(|s| *s < 0.0) {
        return Err(Error::Invalid("standard deviations must be nonnegative".into()));
    }
    let dm: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let ds: f64 = sigma1.iter().zip(sigma2).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((dm + ds).sqrt())
}

/// Smooth-L1 on one coordinate difference.
#[inline]
pub fn huber_scalar(delta: f64) -> f64 {
    if delta.abs() < 1.0 {
        0.5 * delta * delta
    } else {
        delta.abs() - 0.5
    }
}

/// Derivative of [`huber_scalar`].
#[inline]
pub fn huber_scalar_grad(delta: f64) -> f64 {
    if delta.abs() < 1.0 {
        delta
    } else {
        delta.signum()
    }
}

pub fn huber_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| huber_scalar(a - b)).sum())
}

/// `(1/k) d_Huber(x, y)`.
pub fn scaled_huber(x: &[f64], y: &[f64]) -> Result<f64> {
    let k = x.len().max(1) as f64;
    Ok(huber_distance(x, y)? / k)
}

/// Gradient of [`scaled_huber`] with respect to `x`.
pub fn scaled_huber_grad(x: &[f64], y: &[f64]) -> Vec<f64> {
    let k = x.len().max(1) as f64;
    x.iter().zip(y).map(|(a, b)| huber_scalar_grad(a - b) / k).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum RewardDistance {
    Abs,
    Huber,
    /// Variance-corrected reward gap with per-observation reward variances.
    Rap { var1: f64, var2: f64 },
}

pub fn reward_distance(r1: f64, r2: f64, variant: RewardDistance) -> f64 {
    match variant {
        RewardDistance::Abs => (r1 - r2).abs(),
        RewardDistance::Huber => huber_scalar(r1 - r2),
        RewardDistance::Rap { var1, var2 } => ((r1 - r2).powi(2) - var1 - var2).max(0.0).sqrt(),
    }
}

/// `(1/k) sum_i sqrt((dmu_i)^2 + (dsigma_i)^2)`
pub fn dbc_transition_dist(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> Result<f64> {
    same_len(mu1, mu2)?;
    same_len(sigma1, sigma2)?;
    same_len(mu1, sigma1)?;
    let k = mu1.len().max(1) as f64;
    let total: f64 = (0..mu1.len())
        .map(|i| ((mu1[i] - mu2[i]).powi(2) + (sigma1[i] - sigma2[i]).powi(2)).sqrt())
        .sum();
    Ok(total / k)
}

/// `(1/k) (d_Huber(mu1, mu2) + d_Huber(sigma1, sigma2))`
pub fn dbcn_transition_dist(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> Result<f64> {
    same_len(mu1, sigma1)?;
    let k = mu1.len().max(1) as f64;
    Ok((huber_distance(mu1, mu2)? + huber_distance(sigma1, sigma2)?) / k)
}

/// Norms below this make angles undefined; the angle is taken as 0.
pub const ANGLE_NORM_FLOOR: f64 = 1e-12;

/// Angle between two vectors, `arccos` of the clamped cosine similarity.
///
/// Evaluated as `2 atan2(|a - b|, |a + b|)` on the unit vectors, which is the
/// same angle but keeps full precision near 0 and pi where `acos` loses half
/// the significant digits.
pub fn angle(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm2(u), norm2(v));
    if nu < ANGLE_NORM_FLOOR || nv < ANGLE_NORM_FLOOR {
        return 0.0;
    }
    let (mut d, mut s) = (0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a / nu, b / nv);
        d += (a - b) * (a - b);
        s += (a + b) * (a + b);
    }
    2.0 * d.sqrt().atan2(s.sqrt())
}

/// `U(a, b) = (|a|^2 + |b|^2)/2 + beta * angle(a, b)`
pub fn mico_u(phi1: &[f64], phi2: &[f64], beta: f64) -> Result<f64> {
    same_len(phi1, phi2)?;
    Ok(0.5 * (dot(phi1, phi1) + dot(phi2, phi2)) + beta * angle(phi1, phi2))
}

/// Gradient of the cosine similarity `cos(a, b)` with respect to `a`.
fn cosine_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let (na, nb) = (norm2(a), norm2(b));
    if na < ANGLE_NORM_FLOOR || nb < ANGLE_NORM_FLOOR {
        return (0.0, vec![0.0; a.len()]);
    }
    let c = dot(a, b) / (na * nb);
    let g = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - c * ai / (na * na))
        .collect();
    (c, g)
}

/// Gradient of [`mico_u`] with respect to `phi1`.
pub fn mico_u_grad(phi1: &[f64], phi2: &[f64], beta: f64) -> Vec<f64> {
    let (c, dc) = cosine_grad(phi1, phi2);
    let s2 = 1.0 - c * c;
    // d arccos(c)/dc = -1/sqrt(1 - c^2); dropped where the angle is flat at 0 or pi.
    let dtheta = if s2 > 1e-12 && c.abs() < 1.0 { -1.0 / s2.sqrt() } else { 0.0 };
    phi1.iter()
        .zip(&dc)
        .map(|(a, g)| a + beta * dtheta * g)
        .collect()
}

/// `1 - cos(u, v)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm2(u), norm2(v));
    if nu < ANGLE_NORM_FLOOR || nv < ANGLE_NORM_FLOOR {
        return 1.0;
    }
    1.0 - (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Gradient of [`cosine_distance`] with respect to `u`.
pub fn cosine_distance_grad(u: &[f64], v: &[f64]) -> Vec<f64> {
    cosine_grad(u, v).1.into_iter().map(|g| -g).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn w2_examples() {
        assert_eq!(w2_gaussian_factorized(&[1.0, 2.0], &[0.5, 0.5], &[1.0, 2.0], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(w2_gaussian_factorized(&[0.0, 0.0], &[1.0, 1.0], &[3.0, 4.0], &[1.0, 1.0]).unwrap(), 5.0);
        let v = w2_gaussian_factorized(&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0]).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-15);
        assert!(w2_gaussian_factorized(&[0.0], &[-1.0], &[0.0], &[1.0]).is_err());
        assert!(w2_gaussian_factorized(&[0.0], &[1.0], &[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_distance(&[0.0], &[0.5]).unwrap(), 0.125);
        assert_eq!(huber_distance(&[0.0], &[2.0]).unwrap(), 1.5);
        assert_eq!(huber_distance(&[0.0, 0.0], &[0.5, 2.0]).unwrap(), 1.625);
        assert_eq!(scaled_huber(&[0.0, 0.0], &[0.5, 2.0]).unwrap(), 0.8125);
        assert_eq!(scaled_huber(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(scaled_huber(&[0.0], &[2.0]).unwrap(), huber_distance(&[0.0], &[2.0]).unwrap());
        assert!(huber_distance(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward_distance(1.0, 0.25, RewardDistance::Abs), 0.75);
        assert_eq!(reward_distance(0.0, 2.0, RewardDistance::Huber), 1.5);
        let rap = reward_distance(1.0, 0.0, RewardDistance::Rap { var1: 0.25, var2: 0.25 });
        assert!((rap - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(reward_distance(0.1, 0.0, RewardDistance::Rap { var1: 1.0, var2: 1.0 }), 0.0);
    }

    #[test]
    fn transition_examples() {
        assert_eq!(dbc_transition_dist(&[1.0], &[2.0], &[1.0], &[2.0]).unwrap(), 0.0);
        assert_eq!(dbcn_transition_dist(&[1.0], &[2.0], &[1.0], &[2.0]).unwrap(), 0.0);
        assert_eq!(dbc_transition_dist(&[0.0], &[0.0], &[3.0], &[4.0]).unwrap(), 5.0);
        let v = dbcn_transition_dist(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 0.0], &[1.0, 3.0]).unwrap();
        assert_eq!(v, 0.8125);
    }

    #[test]
    fn mico_examples() {
        assert!((mico_u(&[1.0, 0.0], &[1.0, 0.0], 0.1).unwrap() - 1.0).abs() < 1e-15);
        let v = mico_u(&[1.0, 0.0], &[0.0, 1.0], 0.1).unwrap();
        assert!((v - (1.0 + 0.1 * FRAC_PI_2)).abs() < 1e-15);
        assert_eq!(mico_u(&[0.0, 0.0], &[0.0, 0.0], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]), 1.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 3.0]), 1.0);
    }

    #[test]
    fn metric_spec_contraction_guard() {
        assert!(MetricSpec::new(MetricKind::Bsm, 1.0, 0.9).is_ok());
        assert!(MetricSpec::new(MetricKind::Bsm, 1.0, 1.0).is_err());
        assert!(MetricSpec::new(MetricKind::Bsm, -1.0, 0.5).is_err());
        assert_eq!("simsr".parse::<MetricKind>().unwrap(), MetricKind::Mico);
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn kernel_gradients_match_differences() {
        let a = [0.3, -1.2, 0.8];
        let b = [-0.4, 0.5, 2.1];
        let checks: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (scaled_huber_grad(&a, &b), fd_grad(|x| scaled_huber(x, &b).unwrap(), &a)),
            (mico_u_grad(&a, &b, 0.3), fd_grad(|x| mico_u(x, &b, 0.3).unwrap(), &a)),
            (cosine_distance_grad(&a, &b), fd_grad(|x| cosine_distance(x, &b), &a)),
        ];
        for (an, num) in checks {
            for (x, y) in an.iter().zip(&num) {
                assert!((x - y).abs() < 1e-7, "{an:?} vs {num:?}");
            }
        }
    }
}
