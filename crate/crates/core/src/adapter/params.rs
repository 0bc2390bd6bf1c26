use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapter::config::MsLoRAConfig;
use crate::error::{Error, Result};
use crate::ops::{Conv1x1Grouped, ConvDepthwise, Gate, LayerNormChannels};
use crate::tensor::{Layout, Tensor};

/// Learnable tensors of the nonlinear transformation branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams<T = Tensor> {
    /// One depthwise conv per kernel size, in config order.
    pub depthwise: Vec<ConvDepthwise<T>>,
    /// Dense `D -> D` pointwise mixer.
    pub pointwise: Conv1x1Grouped<T>,
    /// LayerNorm after the mixer (enhanced and tricks variants).
    pub norm: Option<LayerNormChannels<T>>,
    /// One gate per depthwise path (gated attention).
    pub path_gates: Vec<Gate<T>>,
    /// Gate for the pooled path (gated attention with global pooling).
    pub pool_gate: Option<Gate<T>>,
}

/// Learnable tensors of one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T = Tensor> {
    pub input_norm: Option<LayerNormChannels<T>>,
    pub down_proj_linear: Option<Conv1x1Grouped<T>>,
    pub down_proj_trans: Option<Conv1x1Grouped<T>>,
    pub transform: Option<TransformParams<T>>,
    pub up_proj: Conv1x1Grouped<T>,
}

impl<T> TransformParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> TransformParams<U> {
        TransformParams {
            depthwise: self
                .depthwise
                .iter()
                .map(|dw| dw.map(&format!("{prefix}.depthwise.k{}", dw.kernel), f))
                .collect(),
            pointwise: self.pointwise.map(&format!("{prefix}.pointwise"), f),
            norm: self.norm.as_ref().map(|n| n.map(&format!("{prefix}.norm"), f)),
            path_gates: self
                .path_gates
                .iter()
                .zip(&self.depthwise)
                .map(|(g, dw)| g.map(&format!("{prefix}.gate.k{}", dw.kernel), f))
                .collect(),
            pool_gate: self
                .pool_gate
                .as_ref()
                .map(|g| g.map(&format!("{prefix}.gate.pool"), f)),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for dw in &mut self.depthwise {
            let p = format!("{prefix}.depthwise.k{}", dw.kernel);
            dw.visit_mut(&p, f);
        }
        self.pointwise.visit_mut(&format!("{prefix}.pointwise"), f);
        if let Some(n) = &mut self.norm {
            n.visit_mut(&format!("{prefix}.norm"), f);
        }
        for (g, dw) in self.path_gates.iter_mut().zip(&self.depthwise) {
            g.visit_mut(&format!("{prefix}.gate.k{}", dw.kernel), f);
        }
        if let Some(g) = &mut self.pool_gate {
            g.visit_mut(&format!("{prefix}.gate.pool"), f);
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> AdapterParams<T> {
    /// Applies `f` to every tensor with its stable parameter path, e.g.
    /// `down_proj_linear.weight`, producing a structurally identical tree.
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> AdapterParams<U> {
        AdapterParams {
            input_norm: self.input_norm.as_ref().map(|n| n.map(&join(prefix, "input_norm"), f)),
            down_proj_linear: self
                .down_proj_linear
                .as_ref()
                .map(|c| c.map(&join(prefix, "down_proj_linear"), f)),
            down_proj_trans: self
                .down_proj_trans
                .as_ref()
                .map(|c| c.map(&join(prefix, "down_proj_trans"), f)),
            transform: self.transform.as_ref().map(|t| t.map(&join(prefix, "transform"), f)),
            up_proj: self.up_proj.map(&join(prefix, "up_proj"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        if let Some(n) = &mut self.input_norm {
            n.visit_mut(&join(prefix, "input_norm"), f);
        }
        if let Some(c) = &mut self.down_proj_linear {
            c.visit_mut(&join(prefix, "down_proj_linear"), f);
        }
        if let Some(c) = &mut self.down_proj_trans {
            c.visit_mut(&join(prefix, "down_proj_trans"), f);
        }
        if let Some(t) = &mut self.transform {
            t.visit_mut(&join(prefix, "transform"), f);
        }
        self.up_proj.visit_mut(&join(prefix, "up_proj"), f);
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.map(prefix, &mut |name, t| f(name, t));
    }

    /// Number of tensors in the tree.
    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _| n += 1);
        n
    }
}

impl AdapterParams {
    /// `(path, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t: &Tensor| out.push((name.to_string(), t.clone())));
        out
    }

    /// Rebuilds a tree of the same structure from `(path, tensor)` pairs.
    pub fn replace_from(&self, named: &[(String, Tensor)]) -> Result<Self> {
        let mut out = self.clone();
        let mut missing = None;
        out.visit_mut("", &mut |name, t| match named.iter().find(|(n, _)| n == name) {
            Some((_, v)) if v.shape() == t.shape() => *t = v.clone(),
            Some((_, v)) => {
                missing.get_or_insert(format!("{name}: shape {:?} expected {:?}", v.shape(), t.shape()));
            }
            None => {
                missing.get_or_insert(format!("{name}: missing"));
            }
        });
        match missing {
            Some(msg) => Err(Error::Format(msg)),
            None => Ok(out),
        }
    }

    /// Adds uniform noise in `[-scale, scale]` to every tensor. Used by tests
    /// and the gradient suite to move away from the identity initialization.
    pub fn perturb(&mut self, rng: &mut impl Rng, scale: f64) {
        self.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v += rng.random_range(-scale..=scale);
            }
        });
    }
}

fn normal_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let std = 1.0 / (fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let n = shape.iter().product();
    Ok(Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())?.with_layout(Layout::Kernel))
}

fn random_conv1x1(c_in: usize, c_out: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Conv1x1Grouped> {
    let mut layer = Conv1x1Grouped::zeros(c_in, c_out, groups)?;
    layer.weight = normal_tensor(layer.weight.shape(), c_in / groups, rng)?;
    Ok(layer)
}

/// Seeded initialization.
///
/// Down-projections, depthwise and pointwise weights are drawn from
/// `N(0, 1/fan_in)`; the up-projection and every bias start at zero, so a
/// fresh adapter is the identity map. LayerNorms start at `gamma = 1,
/// beta = 0`; gates start at zero weight and bias (output 0.5).
pub fn init(config: &MsLoRAConfig, seed: u64) -> Result<AdapterParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, g) = (config.in_channels, config.rank, config.groups);
    let input_norm = if config.pre_norm {
        Some(LayerNormChannels::identity(c)?)
    } else {
        None
    };
    let down_proj_linear = if config.branches.has_linear() {
        Some(random_conv1x1(c, d, g, &mut rng)?)
    } else {
        None
    };
    let transform = if config.branches.has_transform() {
        let down = random_conv1x1(c, d, g, &mut rng)?;
        let mut depthwise = Vec::with_capacity(config.kernels.len());
        for &k in &config.kernels {
            let mut dw = ConvDepthwise::zeros(d, k)?;
            dw.weight = normal_tensor(dw.weight.shape(), k * k, &mut rng)?;
            depthwise.push(dw);
        }
        let pointwise = random_conv1x1(d, d, 1, &mut rng)?;
        let norm = if config.variant.has_post_norm() {
            Some(LayerNormChannels::identity(d)?)
        } else {
            None
        };
        let gated = config.tricks.gated_attention;
        let path_gates = if gated {
            (0..config.kernels.len())
                .map(|_| Gate::neutral(d))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let pool_gate = if gated && config.tricks.global_pool {
            Some(Gate::neutral(d)?)
        } else {
            None
        };
        Some((
            down,
            TransformParams {
                depthwise,
                pointwise,
                norm,
                path_gates,
                pool_gate,
            },
        ))
    } else {
        None
    };
    let (down_proj_trans, transform) = match transform {
        Some((down, t)) => (Some(down), Some(t)),
        None => (None, None),
    };
    Ok(AdapterParams {
        input_norm,
        down_proj_linear,
        down_proj_trans,
        transform,
        up_proj: Conv1x1Grouped::zeros(d, c, g)?,
    })
}
