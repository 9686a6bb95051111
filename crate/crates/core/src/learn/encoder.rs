//! Small MLP encoders with an output normalization and hand-written backprop.
//!
//! Parameters live in one flat vector so optimizers, EMA updates and
//! finite-difference checks can treat them uniformly. Layout: for each layer,
//! the weight matrix (row-major, `out x in`) followed by its bias; LayerNorm
//! appends its gain and bias vectors at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm_p;

/// Norms below this are treated as zero by the rescaling normalizations.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Rescale onto the `p`-norm ball of radius `c / 2` when outside it.
    MaxNorm { c: f64, p: f64 },
    L2,
    /// Learned gain and bias follow the standardization.
    LayerNorm { eps: f64 },
}

impl Normalization {
    pub fn check(&self) -> Result<()> {
        match *self {
            Self::MaxNorm { c, p } if !(c > 0.0 && c.is_finite() && p >= 1.0 && p.is_finite()) => {
                Err(Error::Invalid(format!("maxnorm needs c > 0 and finite p >= 1, got c={c}, p={p}")))
            }
            Self::LayerNorm { eps } if !(eps > 0.0) => Err(Error::Invalid(format!("layernorm eps must be positive, got {eps}"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    /// `[d_obs, hidden..., k]`
    pub dims: Vec<usize>,
    pub normalization: Normalization,
    pub params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to every affine layer; entries after the first are tanh outputs.
    inputs: Vec<Vec<f64>>,
    /// Output of the last affine layer, before normalization.
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

impl Encoder {
    /// Uniform Glorot initialization; LayerNorm starts at gain 1, bias 0.
    pub fn new<R: rand::Rng + ?Sized>(dims: Vec<usize>, normalization: Normalization, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("encoder dims must have >= 2 positive entries, got {dims:?}")));
        }
        normalization.check()?;
        let mut params = Vec::with_capacity(Self::count(&dims, &normalization));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-a..a)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        if let Normalization::LayerNorm { .. } = normalization {
            let k = *dims.last().unwrap();
            params.extend(std::iter::repeat_n(1.0, k));
            params.extend(std::iter::repeat_n(0.0, k));
        }
        Ok(Self { dims, normalization, params })
    }

    fn count(dims: &[usize], norm: &Normalization) -> usize {
        let layers: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let extra = match norm {
            Normalization::LayerNorm { .. } => 2 * dims.last().unwrap(),
            _ => 0,
        };
        layers + extra
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Offset of the LayerNorm gain (bias follows after `k` entries).
    fn ln_offset(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Mutable views of LayerNorm gain and bias, if present.
    pub fn layer_norm_params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        if !matches!(self.normalization, Normalization::LayerNorm { .. }) {
            return None;
        }
        let (off, k) = (self.ln_offset(), self.latent_dim());
        let (gain, bias) = self.params[off..off + 2 * k].split_at_mut(k);
        Some((gain, bias))
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.out)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!("encoder expects {} inputs, got {}", self.input_dim(), x.len())));
        }
        let mut inputs = vec![x.to_vec()];
        let mut off = 0;
        let mut pre = Vec::new();
        for l in 0..self.n_layers() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[off..off + din * dout];
            let b = &self.params[off + din * dout..off + din * dout + dout];
            off += din * dout + dout;
            let input = inputs.last().unwrap();
            let z: Vec<f64> = (0..dout)
                .map(|o| b[o] + w[o * din..(o + 1) * din].iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if l + 1 < self.n_layers() {
                inputs.push(z.iter().map(|v| v.tanh()).collect());
            } else {
                pre = z;
            }
        }
        let out = self.normalize(&pre);
        Ok(Trace { inputs, pre, out })
    }

    fn normalize(&self, z: &[f64]) -> Vec<f64> {
        match self.normalization {
            Normalization::None => z.to_vec(),
            Normalization::MaxNorm { c, p } => {
                let n = norm_p(z, p);
                if n <= c / 2.0 {
                    z.to_vec()
                } else {
                    z.iter().map(|v| v * (c / 2.0) / n).collect()
                }
            }
            Normalization::L2 => {
                let n = norm_p(z, 2.0).max(NORM_FLOOR);
                z.iter().map(|v| v / n).collect()
            }
            Normalization::LayerNorm { eps } => {
                let k = z.len();
                let off = self.ln_offset();
                let (gain, bias) = (&self.params[off..off + k], &self.params[off + k..off + 2 * k]);
                let (zhat, _) = standardize(z, eps);
                (0..k).map(|i| gain[i] * zhat[i] + bias[i]).collect()
            }
        }
    }

    /// Accumulate `d(loss)/d(params)` into `grad`, given `d(loss)/d(out)`.
    pub fn backward(&self, trace: &Trace, g_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut g = self.normalize_backward(&trace.pre, g_out, grad);
        let mut ends: Vec<usize> = Vec::with_capacity(self.n_layers());
        let mut off = 0;
        for l in 0..self.n_layers() {
            off += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
            ends.push(off);
        }
        for l in (0..self.n_layers()).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let start = ends[l] - din * dout - dout;
            let input = &trace.inputs[l];
            for o in 0..dout {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = &mut grad[start + o * din..start + (o + 1) * din];
                for (r, xi) in row.iter_mut().zip(input) {
                    *r += go * xi;
                }
                grad[start + din * dout + o] += go;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[start..start + din * dout];
            let mut g_in = vec![0.0; din];
            for o in 0..dout {
                let go = g[o];
                for (gi, wi) in g_in.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                    *gi += go * wi;
                }
            }
            // Through tanh: the stored input is the activation a, with da/dz = 1 - a^2.
            for (gi, a) in g_in.iter_mut().zip(input) {
                *gi *= 1.0 - a * a;
            }
            g = g_in;
        }
    }

    fn normalize_backward(&self, z: &[f64], gy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        match self.normalization {
            Normalization::None => gy.to_vec(),
            Normalization::MaxNorm { c, p } => {
                let n = norm_p(z, p);
                if n <= c / 2.0 {
                    return gy.to_vec();
                }
                rescale_backward(z, gy, n, p, c / 2.0)
            }
            Normalization::L2 => {
                let n = norm_p(z, 2.0);
                if n < NORM_FLOOR {
                    return gy.iter().map(|g| g / NORM_FLOOR).collect();
                }
                rescale_backward(z, gy, n, 2.0, 1.0)
            }
            Normalization::LayerNorm { eps } => {
                let k = z.len();
                let off = self.ln_offset();
                let (zhat, inv) = standardize(z, eps);
                let gain = self.params[off..off + k].to_vec();
                for i in 0..k {
                    grad[off + i] += gy[i] * zhat[i];
                    grad[off + k + i] += gy[i];
                }
                let gh: Vec<f64> = (0..k).map(|i| gy[i] * gain[i]).collect();
                let mean_gh = gh.iter().sum::<f64>() / k as f64;
                let mean_ghz = gh.iter().zip(&zhat).map(|(a, b)| a * b).sum::<f64>() / k as f64;
                (0..k).map(|i| inv * (gh[i] - mean_gh - zhat[i] * mean_ghz)).collect()
            }
        }
    }
}

/// `(z - mean) / sqrt(var + eps)` and the factor `1 / sqrt(var + eps)`.
fn standardize(z: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let k = z.len() as f64;
    let mean = z.iter().sum::<f64>() / k;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    let inv = 1.0 / (var + eps).sqrt();
    (z.iter().map(|v| (v - mean) * inv).collect(), inv)
}

/// Backprop through `y = r * z / ||z||_p`.
fn rescale_backward(z: &[f64], gy: &[f64], n: f64, p: f64, r: f64) -> Vec<f64> {
    let zg: f64 = z.iter().zip(gy).map(|(a, b)| a * b).sum();
    z.iter()
        .zip(gy)
        .map(|(&zj, &gj)| {
            let dn = zj.signum() * (zj.abs() / n).powf(p - 1.0);
            r * (gj / n - dn * zg / (n * n))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zeroed(dims: Vec<usize>, norm: Normalization) -> Encoder {
        let mut e = Encoder::new(dims, norm, &mut seeded(0)).unwrap();
        e.params.iter_mut().for_each(|p| *p = 0.0);
        e
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let e = zeroed(vec![3, 4, 2], Normalization::None);
        assert_eq!(e.encode(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn maxnorm_rescales_outside_the_ball() {
        // Single linear layer with bias (80, 0): pre-activation norm 80 > C/2 = 50.
        let mut e = zeroed(vec![1, 2], Normalization::MaxNorm { c: 100.0, p: 2.0 });
        e.params[2] = 80.0;
        let y = e.encode(&[0.0]).unwrap();
        assert!((norm_p(&y, 2.0) - 50.0).abs() < 1e-12);
        e.params[2] = 30.0;
        assert_eq!(e.encode(&[0.0]).unwrap(), vec![30.0, 0.0]);
    }

    #[test]
    fn l2_output_is_unit() {
        let e = Encoder::new(vec![5, 8, 3], Normalization::L2, &mut seeded(3)).unwrap();
        let y = e.encode(&[0.3, -1.0, 2.0, 0.0, 0.7]).unwrap();
        assert!((norm_p(&y, 2.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let e = Encoder::new(vec![2, 2], Normalization::None, &mut seeded(0)).unwrap();
        assert!(matches!(e.encode(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for norm in [
            Normalization::None,
            Normalization::L2,
            Normalization::MaxNorm { c: 0.8, p: 3.0 },
            Normalization::LayerNorm { eps: 1e-3 },
        ] {
            let e = Encoder::new(vec![4, 6, 3], norm, &mut seeded(7)).unwrap();
            let x = [0.5, -0.2, 1.0, 0.3];
            let w = [0.7, -1.3, 0.4];
            let f = |enc: &Encoder| enc.encode(&x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let mut grad = vec![0.0; e.n_params()];
            e.backward(&e.forward(&x).unwrap(), &w, &mut grad);
            for i in 0..e.n_params() {
                let mut p = e.clone();
                p.params[i] += 1e-6;
                let up = f(&p);
                p.params[i] -= 2e-6;
                let fd = (up - f(&p)) / 2e-6;
                assert!((fd - grad[i]).abs() < 1e-7, "{norm:?} param {i}: {fd} vs {}", grad[i]);
            }
        }
    }
}
