//! Pooling, per-channel broadcasts, channel shuffle, gating, and token/grid
//! relayout.

use crate::error::{Error, Result};
use crate::ops::activation::sigmoid_scalar;
use crate::tensor::{Shape4, Tensor};

/// Per-channel sigmoid gate `sigma(w * pooled + b)`, both vectors of length `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> Gate<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Gate<U> {
        Gate {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Gate {
    /// Zero weight and bias: the gate starts at 0.5 everywhere.
    pub fn neutral(channels: usize) -> Result<Self> {
        Ok(Self {
            weight: Tensor::zeros([channels])?,
            bias: Tensor::zeros([channels])?,
        })
    }
}

/// Spatial mean per `(b, c)`, shape `[B, C, 1, 1]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape4()?;
    let plane = s.plane();
    let inv = 1.0 / plane as f64;
    let out = x
        .data()
        .chunks_exact(plane)
        .map(|c| c.iter().sum::<f64>() * inv)
        .collect();
    Tensor::new([s.batch, s.channels, 1, 1], out)
}

pub fn global_avg_pool_backward(input: Shape4, dout: &Tensor) -> Result<Tensor> {
    let plane = input.plane();
    let inv = 1.0 / plane as f64;
    let mut dx = Vec::with_capacity(input.numel());
    for &g in dout.data() {
        dx.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_shape4(input, dx)
}

fn check_channel_map(x: Shape4, v: &Tensor, op: &str) -> Result<()> {
    if v.shape() != [x.batch, x.channels, 1, 1] {
        return Err(Error::shape(format!(
            "{op}: expected [{}, {}, 1, 1], got {:?}",
            x.batch,
            x.channels,
            v.shape()
        )));
    }
    Ok(())
}

/// `x[b, c, h, w] * g[b, c]`, broadcasting a `[B, C, 1, 1]` map over space.
pub fn broadcast_mul(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let s = x.shape4()?;
    check_channel_map(s, g, "broadcast_mul")?;
    let plane = s.plane();
    let mut out = x.data().to_vec();
    for (chunk, &gv) in out.chunks_exact_mut(plane).zip(g.data()) {
        chunk.iter_mut().for_each(|v| *v *= gv);
    }
    Tensor::from_shape4(s, out)
}

/// Adjoints of [`broadcast_mul`]: `(dx, dg)`.
pub fn broadcast_mul_backward(x: &Tensor, g: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = x.shape4()?;
    let plane = s.plane();
    let mut dx = dout.data().to_vec();
    for (chunk, &gv) in dx.chunks_exact_mut(plane).zip(g.data()) {
        chunk.iter_mut().for_each(|v| *v *= gv);
    }
    let dg = dout
        .data()
        .chunks_exact(plane)
        .zip(x.data().chunks_exact(plane))
        .map(|(d, xv)| d.iter().zip(xv).map(|(a, b)| a * b).sum())
        .collect();
    Ok((Tensor::from_shape4(s, dx)?, Tensor::new(g.shape().to_vec(), dg)?))
}

/// `x[b, c, h, w] + p[b, c]`, broadcasting a `[B, C, 1, 1]` map over space.
pub fn broadcast_add(x: &Tensor, p: &Tensor) -> Result<Tensor> {
    let s = x.shape4()?;
    check_channel_map(s, p, "broadcast_add")?;
    let plane = s.plane();
    let mut out = x.data().to_vec();
    for (chunk, &pv) in out.chunks_exact_mut(plane).zip(p.data()) {
        chunk.iter_mut().for_each(|v| *v += pv);
    }
    Tensor::from_shape4(s, out)
}

/// Channel `c = g * (C / G) + j` moves to output channel `j * G + g`.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let s = x.shape4()?;
    if groups == 0 || s.channels % groups != 0 {
        return Err(Error::shape(format!(
            "channel_shuffle: {} channels not divisible by {groups} groups",
            s.channels
        )));
    }
    let per = s.channels / groups;
    let plane = s.plane();
    let src = x.data();
    let mut out = vec![0.0; s.numel()];
    for b in 0..s.batch {
        for g in 0..groups {
            for j in 0..per {
                let from = s.index(b, g * per + j, 0, 0);
                let to = s.index(b, j * groups + g, 0, 0);
                out[to..to + plane].copy_from_slice(&src[from..from + plane]);
            }
        }
    }
    Tensor::from_shape4(s, out)
}

fn check_gate(pooled: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Shape4> {
    let s = pooled.shape4()?;
    if s.height != 1 || s.width != 1 {
        return Err(Error::shape(format!(
            "sigmoid_gate expects a pooled [B, C, 1, 1] input, got {:?}",
            pooled.shape()
        )));
    }
    if weight.shape() != [s.channels] || bias.shape() != [s.channels] {
        return Err(Error::shape(format!(
            "sigmoid_gate over {} channels got weight {:?}, bias {:?}",
            s.channels,
            weight.shape(),
            bias.shape()
        )));
    }
    Ok(s)
}

/// `sigma(w * pooled + b)` per channel.
pub fn sigmoid_gate(pooled: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = check_gate(pooled, weight, bias)?;
    let c = s.channels;
    let (w, b) = (weight.data(), bias.data());
    let out = pooled
        .data()
        .iter()
        .enumerate()
        .map(|(i, &p)| sigmoid_scalar(w[i % c] * p + b[i % c]))
        .collect();
    Tensor::from_shape4(s, out)
}

/// Adjoints of [`sigmoid_gate`] given its output: `(dpooled, dweight, dbias)`.
pub fn sigmoid_gate_backward(
    pooled: &Tensor,
    weight: &Tensor,
    gate: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = weight.len();
    let w = weight.data();
    let mut dp = vec![0.0; pooled.len()];
    let mut dw = vec![0.0; c];
    let mut db = vec![0.0; c];
    for (i, ((&p, &g), &d)) in pooled.data().iter().zip(gate.data()).zip(dout.data()).enumerate() {
        let ds = d * g * (1.0 - g);
        dp[i] = ds * w[i % c];
        dw[i % c] += ds * p;
        db[i % c] += ds;
    }
    Ok((
        Tensor::new(pooled.shape().to_vec(), dp)?,
        Tensor::vector(dw)?,
        Tensor::vector(db)?,
    ))
}

/// `x * scale[c] + shift[c]`; frozen batch-norm is expressed this way.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let s = x.shape4()?;
    if scale.shape() != [s.channels] || shift.shape() != [s.channels] {
        return Err(Error::shape(format!(
            "channel_affine over {} channels got {:?}, {:?}",
            s.channels,
            scale.shape(),
            shift.shape()
        )));
    }
    let plane = s.plane();
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let c = i % s.channels;
        let (a, b) = (scale.data()[c], shift.data()[c]);
        chunk.iter_mut().for_each(|v| *v = *v * a + b);
    }
    Tensor::from_shape4(s, out)
}

/// `[B, N, C]` token sequence to a `[B, C, H, W]` grid with `N = H * W`,
/// tokens laid out row-major over the grid.
pub fn tokens_to_grid(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, n, c) = match x.shape() {
        &[b, n, c] => (b, n, c),
        other => return Err(Error::shape(format!("expected [B, N, C] tokens, got {other:?}"))),
    };
    if n != height * width {
        return Err(Error::shape(format!("{n} tokens cannot fill a {height}x{width} grid")));
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for t in 0..n {
            for ci in 0..c {
                out[(bi * c + ci) * n + t] = src[(bi * n + t) * c + ci];
            }
        }
    }
    Tensor::new([b, c, height, width], out)
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(x: &Tensor) -> Result<Tensor> {
    let s = x.shape4()?;
    let (b, c, n) = (s.batch, s.channels, s.plane());
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for t in 0..n {
                out[(bi * n + t) * c + ci] = src[(bi * c + ci) * n + t];
            }
        }
    }
    Tensor::new([b, n, c], out)
}
