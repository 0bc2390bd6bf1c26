//! A small frozen convolutional feature extractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;
pub const BN_EPS: f64 = 1e-5;

/// Inference-mode BatchNorm: fixed running statistics folded into a
/// per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBatchNorm {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl FrozenBatchNorm {
    /// `(scale, shift)` with `y = scale * x + shift`.
    pub fn folded(&self) -> Result<(Tensor, Tensor)> {
        let scale = self
            .gamma
            .zip_map(&self.running_var, "batchnorm", |g, v| g / (v + BN_EPS).sqrt())?;
        let shift = self.beta.sub(&self.running_mean.mul(&scale)?)?;
        Ok((scale, shift))
    }
}

/// `conv3x3 (stride 2) -> [frozen BN] -> GELU`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub batch_norm: Option<FrozenBatchNorm>,
}

/// Fixed random-weight backbone, one block per stage width.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub widths: Vec<usize>,
    pub blocks: Vec<Block>,
}

impl ToyBackbone {
    /// He-normal convolution weights, zero biases. With `frozen_bn` each
    /// block also carries BatchNorm statistics drawn once from the seed.
    pub fn new(widths: &[usize], seed: u64, frozen_bn: bool) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::config(format!(
                "backbone widths {widths:?} must be non-empty and positive"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(widths.len());
        let mut c_in = INPUT_CHANNELS;
        for &c_out in widths {
            let fan_in = c_in * 9;
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let weight = Tensor::new(
                vec![c_out, c_in, 3, 3],
                (0..c_out * fan_in).map(|_| dist.sample(&mut rng)).collect(),
            )?;
            let batch_norm = if frozen_bn {
                let mean = (0..c_out).map(|_| rng.random_range(-0.2..0.2)).collect();
                let var = (0..c_out).map(|_| rng.random_range(0.5..1.5)).collect();
                Some(FrozenBatchNorm {
                    running_mean: Tensor::vector(mean)?,
                    running_var: Tensor::vector(var)?,
                    gamma: Tensor::ones([c_out])?,
                    beta: Tensor::zeros([c_out])?,
                })
            } else {
                None
            };
            blocks.push(Block {
                weight,
                bias: Tensor::zeros([c_out])?,
                stride: 2,
                batch_norm,
            });
            c_in = c_out;
        }
        Ok(Self {
            widths: widths.to_vec(),
            blocks,
        })
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Every frozen tensor with its path, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.blocks.{i}.weight"), &b.weight));
            out.push((format!("backbone.blocks.{i}.bias"), &b.bias));
            if let Some(bn) = &b.batch_norm {
                out.push((format!("backbone.blocks.{i}.bn.running_mean"), &bn.running_mean));
                out.push((format!("backbone.blocks.{i}.bn.running_var"), &bn.running_var));
                out.push((format!("backbone.blocks.{i}.bn.gamma"), &bn.gamma));
                out.push((format!("backbone.blocks.{i}.bn.beta"), &bn.beta));
            }
        }
        out
    }

    /// SHA-256 over every path and tensor byte, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records block `i` on `tape` with all weights as constants.
    pub fn block_on_tape(&self, tape: &mut Tape, i: usize, x: Var) -> Result<Var> {
        let b = &self.blocks[i];
        let w = tape.constant(b.weight.clone());
        let bias = tape.constant(b.bias.clone());
        let mut y = tape.conv2d(x, w, bias, b.stride)?;
        if let Some(bn) = &b.batch_norm {
            let (scale, shift) = bn.folded()?;
            let (s, t) = (tape.constant(scale), tape.constant(shift));
            y = tape.channel_affine(y, s, t)?;
        }
        Ok(tape.gelu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_digest() {
        let a = ToyBackbone::new(&[8, 16], 3, true).unwrap();
        let b = ToyBackbone::new(&[8, 16], 3, true).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        assert_ne!(a.digest(), ToyBackbone::new(&[8, 16], 4, true).unwrap().digest());
    }

    #[test]
    fn block_shapes() {
        let bb = ToyBackbone::new(&[8, 16, 32], 0, false).unwrap();
        let mut tape = Tape::new();
        let mut x = tape.constant(Tensor::zeros([2, 3, 16, 16]).unwrap());
        for i in 0..3 {
            x = bb.block_on_tape(&mut tape, i, x).unwrap();
        }
        assert_eq!(tape.value(x).shape(), &[2, 32, 2, 2]);
        assert!(ToyBackbone::new(&[], 0, false).is_err());
    }

    #[test]
    fn folded_batch_norm() {
        let bn = FrozenBatchNorm {
            running_mean: Tensor::vector(vec![1.0]).unwrap(),
            running_var: Tensor::vector(vec![4.0 - BN_EPS]).unwrap(),
            gamma: Tensor::vector(vec![2.0]).unwrap(),
            beta: Tensor::vector(vec![0.5]).unwrap(),
        };
        let (s, t) = bn.folded().unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!((t.data()[0] + 0.5).abs() < 1e-12);
    }
}
