use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// LayerNorm over the channel axis, applied independently at every
/// `(b, h, w)` site. Population variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormChannels<T = Tensor> {
    pub gamma: T,
    pub beta: T,
    pub eps: f64,
}

impl<T> LayerNormChannels<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> LayerNormChannels<U> {
        LayerNormChannels {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
            eps: self.eps,
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl LayerNormChannels {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones([channels])?,
            beta: Tensor::zeros([channels])?,
            eps: LAYERNORM_EPS,
        })
    }
}

/// Values saved by the forward pass for the adjoint.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Standardized input, same shape as `x`.
    pub normalized: Tensor,
    /// `1 / sqrt(var + eps)` per site, indexed `b * H * W + p`.
    pub inv_std: Vec<f64>,
}

pub fn layernorm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    let s = x.shape4()?;
    if gamma.shape() != [s.channels] || beta.shape() != [s.channels] {
        return Err(Error::shape(format!(
            "layernorm over {} channels got gamma {:?}, beta {:?}",
            s.channels,
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::shape(format!("layernorm epsilon must be positive, got {eps}")));
    }
    let plane = s.plane();
    let c = s.channels;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![0.0; s.numel()];
    let mut normalized = vec![0.0; s.numel()];
    let mut inv_std = vec![0.0; s.batch * plane];
    for b in 0..s.batch {
        let base = b * c * plane;
        for p in 0..plane {
            let mean = (0..c).map(|ch| xd[base + ch * plane + p]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| {
                    let d = xd[base + ch * plane + p] - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[b * plane + p] = inv;
            for ch in 0..c {
                let i = base + ch * plane + p;
                let n = (xd[i] - mean) * inv;
                normalized[i] = n;
                out[i] = gd[ch] * n + bd[ch];
            }
        }
    }
    Ok((
        Tensor::from_shape4(s, out)?,
        LayerNormCache {
            normalized: Tensor::from_shape4(s, normalized)?,
            inv_std,
        },
    ))
}

/// Adjoints `(dx, dgamma, dbeta)`.
pub fn layernorm_backward(cache: &LayerNormCache, gamma: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let s = dout.shape4()?;
    let plane = s.plane();
    let c = s.channels;
    let (nd, gd, gm) = (cache.normalized.data(), dout.data(), gamma.data());
    let mut dx = vec![0.0; s.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dn = vec![0.0; c];
    for b in 0..s.batch {
        let base = b * c * plane;
        for p in 0..plane {
            let mut mean_dn = 0.0;
            let mut mean_dn_n = 0.0;
            for ch in 0..c {
                let i = base + ch * plane + p;
                dgamma[ch] += gd[i] * nd[i];
                dbeta[ch] += gd[i];
                dn[ch] = gd[i] * gm[ch];
                mean_dn += dn[ch];
                mean_dn_n += dn[ch] * nd[i];
            }
            mean_dn /= c as f64;
            mean_dn_n /= c as f64;
            let inv = cache.inv_std[b * plane + p];
            for ch in 0..c {
                let i = base + ch * plane + p;
                dx[i] = inv * (dn[ch] - mean_dn - nd[i] * mean_dn_n);
            }
        }
    }
    Ok((
        Tensor::from_shape4(s, dx)?,
        Tensor::vector(dgamma)?,
        Tensor::vector(dbeta)?,
    ))
}

pub fn layernorm_channels(x: &Tensor, layer: &LayerNormChannels) -> Result<Tensor> {
    layernorm_forward(x, &layer.gamma, &layer.beta, layer.eps).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_channel_site_standardizes() {
        let x = Tensor::new([1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = layernorm_channels(&x, &LayerNormChannels::identity(2).unwrap()).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn standardized_input_is_near_fixed_point() {
        // Channels [-1, 1] at each site already have mean 0, variance 1.
        let x = Tensor::new([1, 2, 1, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let y = layernorm_channels(&x, &LayerNormChannels::identity(2).unwrap()).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new([2, 3, 2, 2], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let layer = LayerNormChannels {
            gamma: Tensor::zeros([3]).unwrap(),
            beta: Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap(),
            eps: LAYERNORM_EPS,
        };
        let y = layernorm_channels(&x, &layer).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for p in 0..4 {
                    assert_eq!(y.get(&[b, c, p / 2, p % 2]).unwrap(), layer.beta.data()[c]);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = Tensor::zeros([1, 3, 2, 2]).unwrap();
        assert!(layernorm_channels(&x, &LayerNormChannels::identity(2).unwrap()).is_err());
    }

    #[test]
    fn output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let c = rng.random_range(2..12);
            let x = Tensor::new([2, c, 3, 3], (0..18 * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let y = layernorm_channels(&x, &LayerNormChannels::identity(c).unwrap()).unwrap();
            for b in 0..2 {
                for p in 0..9 {
                    let xs: Vec<f64> = (0..c).map(|ch| x.get(&[b, ch, p / 3, p % 3]).unwrap()).collect();
                    let xm = xs.iter().sum::<f64>() / c as f64;
                    let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / c as f64;
                    if xv < 1e-2 {
                        continue;
                    }
                    let ys: Vec<f64> = (0..c).map(|ch| y.get(&[b, ch, p / 3, p % 3]).unwrap()).collect();
                    let m = ys.iter().sum::<f64>() / c as f64;
                    let v = ys.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64;
                    assert!(m.abs() < 1e-10);
                    // Epsilon shrinks the variance to var / (var + eps) exactly.
                    let predicted = xv / (xv + LAYERNORM_EPS);
                    assert!((v - predicted).abs() < 1e-12, "variance {v} vs {predicted}");
                    assert!((v - 1.0).abs() <= LAYERNORM_EPS / xv + 1e-12);
                }
            }
        }
    }
}
