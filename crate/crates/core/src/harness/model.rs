//! Frozen backbone with one adapter per block and a linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{forward_on_tape, init, AdapterParams, Branches, MsLoRAConfig, Tricks, Variant};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::harness::backbone::ToyBackbone;
use crate::tensor::Tensor;

/// Adapter hyperparameters shared by every stage; the channel width comes
/// from the stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTemplate {
    pub rank: usize,
    pub groups: usize,
    pub kernels: Vec<usize>,
    pub variant: Variant,
    pub pre_norm: bool,
    pub tricks: Tricks,
    pub branches: Branches,
}

impl Default for AdapterTemplate {
    fn default() -> Self {
        Self {
            rank: 8,
            groups: 4,
            kernels: vec![3, 5, 7],
            variant: Variant::Enhanced,
            pre_norm: false,
            tricks: Tricks::NONE,
            branches: Branches::Both,
        }
    }
}

impl AdapterTemplate {
    pub fn for_width(&self, in_channels: usize) -> MsLoRAConfig {
        MsLoRAConfig {
            in_channels,
            rank: self.rank,
            groups: self.groups,
            kernels: self.kernels.clone(),
            variant: self.variant,
            pre_norm: self.pre_norm,
            tricks: self.tricks,
            branches: self.branches,
        }
    }
}

/// Linear classifier on globally pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: ToyBackbone,
    pub configs: Vec<MsLoRAConfig>,
    pub adapters: Vec<AdapterParams>,
    pub head: Head,
}

/// Tape handles for the trainable tensors, in [`Model::trainable`] order.
pub struct TrainableVars {
    pub adapters: Vec<AdapterParams<Var>>,
    pub head_weight: Var,
    pub head_bias: Var,
    pub all: Vec<Var>,
}

impl Model {
    /// One adapter after every backbone block; `seed` drives adapter and
    /// head initialization.
    pub fn build(backbone: ToyBackbone, template: &AdapterTemplate, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("need at least two classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let configs: Vec<MsLoRAConfig> = backbone.widths.iter().map(|&w| template.for_width(w)).collect();
        let adapters = configs
            .iter()
            .map(|c| init(c, rng.random()))
            .collect::<Result<Vec<_>>>()?;
        let c = backbone.out_channels();
        let dist = Normal::new(0.0, 1.0 / (c as f64).sqrt()).expect("finite std");
        let head = Head {
            weight: Tensor::new(
                vec![classes, c],
                (0..classes * c).map(|_| dist.sample(&mut rng)).collect(),
            )?,
            bias: Tensor::zeros([classes])?,
        };
        Ok(Self {
            backbone,
            configs,
            adapters,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.bias.len()
    }

    /// Trainable tensors with their paths: `adapters.{i}.*` then `head.*`.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, a) in self.adapters.iter().enumerate() {
            a.visit(&format!("adapters.{i}"), &mut |name, t: &Tensor| {
                out.push((name.to_string(), t.clone()))
            });
        }
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), self.head.bias.clone()));
        out
    }

    pub fn trainable_count(&self) -> u64 {
        self.trainable().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Mutable references to the trainable tensors in [`Model::trainable`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for a in &mut self.adapters {
            collect_mut(a, &mut out);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Records the trainable tensors on `tape`, as leaves when `leaves` is
    /// set and as constants otherwise.
    pub fn register(&self, tape: &mut Tape, leaves: bool) -> TrainableVars {
        let mut all = Vec::new();
        let mut record = |t: &Tensor| {
            let v = if leaves {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            all.push(v);
            v
        };
        let adapters = self.adapters.iter().map(|a| a.map("", &mut |_, t| record(t))).collect();
        let head_weight = record(&self.head.weight);
        let head_bias = record(&self.head.bias);
        TrainableVars {
            adapters,
            head_weight,
            head_bias,
            all,
        }
    }

    /// Logits `[B, classes]`. With `with_adapters` unset the adapters are
    /// skipped entirely.
    pub fn logits_on_tape(&self, tape: &mut Tape, x: Var, vars: &TrainableVars, with_adapters: bool) -> Result<Var> {
        let mut h = x;
        for i in 0..self.backbone.blocks.len() {
            h = self.backbone.block_on_tape(tape, i, h)?;
            if with_adapters {
                h = forward_on_tape(tape, h, &vars.adapters[i], &self.configs[i])?.output;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let batch = tape.value(pooled).shape()[0];
        let features = tape.reshape(pooled, &[batch, self.backbone.out_channels()])?;
        tape.linear(features, vars.head_weight, vars.head_bias)
    }

    /// Eager logits for `images [N, 3, S, S]`, evaluated in independent
    /// chunks of `chunk` samples.
    pub fn logits(&self, images: &Tensor, with_adapters: bool, chunk: usize) -> Result<Tensor> {
        let s = images.shape4()?;
        let per = s.channels * s.height * s.width;
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..s.batch).step_by(chunk).collect();
        let parts = starts
            .par_iter()
            .map(|&start| {
                let n = chunk.min(s.batch - start);
                let x = Tensor::new(
                    vec![n, s.channels, s.height, s.width],
                    images.data()[start * per..(start + n) * per].to_vec(),
                )?;
                let mut tape = Tape::new();
                let vars = self.register(&mut tape, false);
                let xv = tape.constant(x);
                let out = self.logits_on_tape(&mut tape, xv, &vars, with_adapters)?;
                Ok(tape.value(out).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![s.batch, self.classes()], parts.concat())
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(images, true, 64)?;
        let k = self.classes();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

fn collect_mut<'a>(a: &'a mut AdapterParams, out: &mut Vec<&'a mut Tensor>) {
    let AdapterParams {
        input_norm,
        down_proj_linear,
        down_proj_trans,
        transform,
        up_proj,
    } = a;
    if let Some(n) = input_norm {
        out.extend([&mut n.gamma, &mut n.beta]);
    }
    if let Some(c) = down_proj_linear {
        out.extend([&mut c.weight, &mut c.bias]);
    }
    if let Some(c) = down_proj_trans {
        out.extend([&mut c.weight, &mut c.bias]);
    }
    if let Some(t) = transform {
        for dw in &mut t.depthwise {
            out.extend([&mut dw.weight, &mut dw.bias]);
        }
        out.extend([&mut t.pointwise.weight, &mut t.pointwise.bias]);
        if let Some(n) = &mut t.norm {
            out.extend([&mut n.gamma, &mut n.beta]);
        }
        for g in &mut t.path_gates {
            out.extend([&mut g.weight, &mut g.bias]);
        }
        if let Some(g) = &mut t.pool_gate {
            out.extend([&mut g.weight, &mut g.bias]);
        }
    }
    out.extend([&mut up_proj.weight, &mut up_proj.bias]);
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
