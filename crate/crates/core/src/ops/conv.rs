//! Convolutions: grouped pointwise, depthwise, and a dense strided conv for
//! the toy backbone. All are cross-correlations (no kernel flip) with zero
//! padding `(k - 1) / 2`.

use crate::error::{Error, Result};
use crate::tensor::{Layout, Shape4, Tensor};

/// Grouped 1x1 convolution: weight `[C_out, C_in / G, 1, 1]`, bias `[C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1Grouped<T = Tensor> {
    pub weight: T,
    pub bias: T,
    pub groups: usize,
}

/// Depthwise convolution: weight `[C, 1, k, k]`, bias `[C]`, `k` odd.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDepthwise<T = Tensor> {
    pub weight: T,
    pub bias: T,
    pub kernel: usize,
}

impl<T> Conv1x1Grouped<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Conv1x1Grouped<U> {
        Conv1x1Grouped {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
            groups: self.groups,
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> ConvDepthwise<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> ConvDepthwise<U> {
        ConvDepthwise {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
            kernel: self.kernel,
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Conv1x1Grouped {
    /// Zero weight and bias.
    pub fn zeros(c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        check_groups(c_in, c_out, groups)?;
        Ok(Self {
            weight: Tensor::zeros([c_out, c_in / groups, 1, 1])?.with_layout(Layout::Kernel),
            bias: Tensor::zeros([c_out])?,
            groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Dense (single-group) equivalent whose weight is the block-diagonal
    /// embedding of the grouped weight.
    pub fn to_dense(&self) -> Result<Self> {
        let (c_in, c_out, g) = (self.in_channels(), self.out_channels(), self.groups);
        let (in_g, out_g) = (c_in / g, c_out / g);
        let mut weight = Tensor::zeros([c_out, c_in, 1, 1])?.with_layout(Layout::Kernel);
        let src = self.weight.data();
        let dst = weight.data_mut();
        for o in 0..c_out {
            let grp = o / out_g;
            for i in 0..in_g {
                dst[o * c_in + grp * in_g + i] = src[o * in_g + i];
            }
        }
        Ok(Self {
            weight,
            bias: self.bias.clone(),
            groups: 1,
        })
    }
}

impl ConvDepthwise {
    pub fn zeros(channels: usize, kernel: usize) -> Result<Self> {
        check_odd(kernel)?;
        Ok(Self {
            weight: Tensor::zeros([channels, 1, kernel, kernel])?.with_layout(Layout::Kernel),
            bias: Tensor::zeros([channels])?,
            kernel,
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

pub(crate) fn check_groups(c_in: usize, c_out: usize, groups: usize) -> Result<()> {
    if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
        return Err(Error::shape(format!(
            "channels {c_in} -> {c_out} not divisible by {groups} groups"
        )));
    }
    Ok(())
}

fn check_odd(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::shape(format!("kernel size {k} must be odd")));
    }
    Ok(())
}

fn check_vector(t: &Tensor, len: usize, what: &str) -> Result<()> {
    if t.shape() != [len] {
        return Err(Error::shape(format!(
            "{what}: expected shape [{len}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Validates a grouped 1x1 conv and returns `(input shape, C_out)`.
fn conv1x1_dims(x: &Tensor, weight: &Tensor, bias: &Tensor, groups: usize) -> Result<(Shape4, usize)> {
    let s = x.shape4()?;
    let (c_out, in_g) = match weight.shape() {
        &[o, i, 1, 1] => (o, i),
        other => {
            return Err(Error::shape(format!(
                "conv1x1 weight must be [C_out, C_in/G, 1, 1], got {other:?}"
            )))
        }
    };
    check_groups(s.channels, c_out, groups)?;
    if in_g * groups != s.channels {
        return Err(Error::shape(format!(
            "conv1x1 expects {} input channels, got {}",
            in_g * groups,
            s.channels
        )));
    }
    check_vector(bias, c_out, "conv1x1 bias")?;
    Ok((s, c_out))
}

pub fn conv1x1_grouped_raw(x: &Tensor, weight: &Tensor, bias: &Tensor, groups: usize) -> Result<Tensor> {
    let (s, c_out) = conv1x1_dims(x, weight, bias, groups)?;
    let in_g = s.channels / groups;
    let out_g = c_out / groups;
    let plane = s.plane();
    let os = s.with_channels(c_out);
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0; os.numel()];
    for b in 0..s.batch {
        for o in 0..c_out {
            let grp = o / out_g;
            let dst = &mut out[os.index(b, o, 0, 0)..][..plane];
            dst.fill(bd[o]);
            for i in 0..in_g {
                let w = wd[o * in_g + i];
                let src = &xd[s.index(b, grp * in_g + i, 0, 0)..][..plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += w * v;
                }
            }
        }
    }
    Tensor::from_shape4(os, out)
}

/// Adjoints of a grouped 1x1 conv: `(dx, dweight, dbias)`.
pub fn conv1x1_grouped_backward(
    x: &Tensor,
    weight: &Tensor,
    groups: usize,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = x.shape4()?;
    let c_out = weight.shape()[0];
    let in_g = s.channels / groups;
    let out_g = c_out / groups;
    let plane = s.plane();
    let os = s.with_channels(c_out);
    let (xd, wd, gd) = (x.data(), weight.data(), dout.data());
    let mut dx = vec![0.0; s.numel()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; c_out];
    for b in 0..s.batch {
        for o in 0..c_out {
            let grp = o / out_g;
            let g = &gd[os.index(b, o, 0, 0)..][..plane];
            db[o] += g.iter().sum::<f64>();
            for i in 0..in_g {
                let c = grp * in_g + i;
                let xs = &xd[s.index(b, c, 0, 0)..][..plane];
                dw[o * in_g + i] += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                let w = wd[o * in_g + i];
                for (d, &gv) in dx[s.index(b, c, 0, 0)..][..plane].iter_mut().zip(g) {
                    *d += w * gv;
                }
            }
        }
    }
    Ok((
        Tensor::from_shape4(s, dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?.with_layout(Layout::Kernel),
        Tensor::vector(db)?,
    ))
}

/// Grouped pointwise convolution. Within each group, output channels are
/// affine combinations of that group's input channels at each site.
pub fn conv1x1_grouped(x: &Tensor, layer: &Conv1x1Grouped) -> Result<Tensor> {
    conv1x1_grouped_raw(x, &layer.weight, &layer.bias, layer.groups)
}

fn depthwise_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Shape4, usize)> {
    let s = x.shape4()?;
    let k = match weight.shape() {
        &[c, 1, k, k2] if c == s.channels && k == k2 => k,
        other => {
            return Err(Error::shape(format!(
                "depthwise weight must be [{}, 1, k, k], got {other:?}",
                s.channels
            )))
        }
    };
    check_odd(k)?;
    check_vector(bias, s.channels, "depthwise bias")?;
    Ok((s, k))
}

pub fn conv_depthwise_raw(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (s, k) = depthwise_dims(x, weight, bias)?;
    let pad = (k / 2) as isize;
    let (h, w) = (s.height as isize, s.width as isize);
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0; s.numel()];
    for b in 0..s.batch {
        for c in 0..s.channels {
            let base = s.index(b, c, 0, 0);
            let kern = &wd[c * k * k..][..k * k];
            let src = &xd[base..][..s.plane()];
            let dst = &mut out[base..][..s.plane()];
            dst.fill(bd[c]);
            for ki in 0..k as isize {
                for kj in 0..k as isize {
                    let wv = kern[(ki * k as isize + kj) as usize];
                    let (di, dj) = (ki - pad, kj - pad);
                    // Output rows/cols whose shifted tap lands inside the input.
                    let (r0, r1) = ((-di).max(0), (h - di).min(h));
                    let (c0, c1) = ((-dj).max(0), (w - dj).min(w));
                    for r in r0..r1 {
                        let srow = &src[((r + di) * w) as usize..];
                        let drow = &mut dst[(r * w) as usize..];
                        for col in c0..c1 {
                            drow[col as usize] += wv * srow[(col + dj) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_shape4(s, out)
}

/// Adjoints of a depthwise conv: `(dx, dweight, dbias)`.
pub fn conv_depthwise_backward(x: &Tensor, weight: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let s = x.shape4()?;
    let k = weight.shape()[2];
    let pad = (k / 2) as isize;
    let (h, w) = (s.height as isize, s.width as isize);
    let (xd, wd, gd) = (x.data(), weight.data(), dout.data());
    let mut dx = vec![0.0; s.numel()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; s.channels];
    for b in 0..s.batch {
        for c in 0..s.channels {
            let base = s.index(b, c, 0, 0);
            let src = &xd[base..][..s.plane()];
            let g = &gd[base..][..s.plane()];
            db[c] += g.iter().sum::<f64>();
            let dsrc = &mut dx[base..][..s.plane()];
            for ki in 0..k as isize {
                for kj in 0..k as isize {
                    let widx = c * k * k + (ki * k as isize + kj) as usize;
                    let wv = wd[widx];
                    let (di, dj) = (ki - pad, kj - pad);
                    let (r0, r1) = ((-di).max(0), (h - di).min(h));
                    let (c0, c1) = ((-dj).max(0), (w - dj).min(w));
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        for col in c0..c1 {
                            let o = (r * w + col) as usize;
                            let i = ((r + di) * w + col + dj) as usize;
                            acc += g[o] * src[i];
                            dsrc[i] += wv * g[o];
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_shape4(s, dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?.with_layout(Layout::Kernel),
        Tensor::vector(db)?,
    ))
}

/// Per-channel 2D cross-correlation with zero padding and stride 1; output
/// shape equals input shape.
pub fn conv_depthwise(x: &Tensor, layer: &ConvDepthwise) -> Result<Tensor> {
    conv_depthwise_raw(x, &layer.weight, &layer.bias)
}

/// Output extents of a dense conv with padding `(k - 1) / 2`.
pub fn conv2d_out_shape(s: Shape4, c_out: usize, k: usize, stride: usize) -> Shape4 {
    let pad = k / 2;
    Shape4 {
        batch: s.batch,
        channels: c_out,
        height: (s.height + 2 * pad - k) / stride + 1,
        width: (s.width + 2 * pad - k) / stride + 1,
    }
}

fn conv2d_dims(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<(Shape4, Shape4, usize)> {
    let s = x.shape4()?;
    let (c_out, k) = match weight.shape() {
        &[o, i, k, k2] if i == s.channels && k == k2 => (o, k),
        other => {
            return Err(Error::shape(format!(
                "conv2d weight must be [C_out, {}, k, k], got {other:?}",
                s.channels
            )))
        }
    };
    check_odd(k)?;
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be positive"));
    }
    check_vector(bias, c_out, "conv2d bias")?;
    Ok((s, conv2d_out_shape(s, c_out, k, stride), k))
}

/// Dense strided convolution (single group).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (s, os, k) = conv2d_dims(x, weight, bias, stride)?;
    let pad = (k / 2) as isize;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0; os.numel()];
    for b in 0..s.batch {
        for o in 0..os.channels {
            let dst = &mut out[os.index(b, o, 0, 0)..][..os.plane()];
            dst.fill(bd[o]);
            for c in 0..s.channels {
                let src = &xd[s.index(b, c, 0, 0)..][..s.plane()];
                let kern = &wd[(o * s.channels + c) * k * k..][..k * k];
                for oh in 0..os.height {
                    for ow in 0..os.width {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            let ih = (oh * stride + ki) as isize - pad;
                            if ih < 0 || ih >= s.height as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = (ow * stride + kj) as isize - pad;
                                if iw < 0 || iw >= s.width as isize {
                                    continue;
                                }
                                acc += kern[ki * k + kj] * src[ih as usize * s.width + iw as usize];
                            }
                        }
                        dst[oh * os.width + ow] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_shape4(os, out)
}

/// Adjoints of [`conv2d`]: `(dx, dweight, dbias)`.
pub fn conv2d_backward(x: &Tensor, weight: &Tensor, stride: usize, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let s = x.shape4()?;
    let os = dout.shape4()?;
    let k = weight.shape()[2];
    let pad = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), weight.data(), dout.data());
    let mut dx = vec![0.0; s.numel()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; os.channels];
    for b in 0..s.batch {
        for o in 0..os.channels {
            let g = &gd[os.index(b, o, 0, 0)..][..os.plane()];
            db[o] += g.iter().sum::<f64>();
            for c in 0..s.channels {
                let xoff = s.index(b, c, 0, 0);
                let woff = (o * s.channels + c) * k * k;
                for oh in 0..os.height {
                    for ow in 0..os.width {
                        let gv = g[oh * os.width + ow];
                        if gv == 0.0 {
                            continue;
                        }
                        for ki in 0..k {
                            let ih = (oh * stride + ki) as isize - pad;
                            if ih < 0 || ih >= s.height as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = (ow * stride + kj) as isize - pad;
                                if iw < 0 || iw >= s.width as isize {
                                    continue;
                                }
                                let xi = xoff + ih as usize * s.width + iw as usize;
                                dw[woff + ki * k + kj] += gv * xd[xi];
                                dx[xi] += gv * wd[woff + ki * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_shape4(s, dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?.with_layout(Layout::Kernel),
        Tensor::vector(db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Dense 1x1 conv with explicit per-pair loops.
    fn dense_pointwise_oracle(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let s = x.shape4().unwrap();
        let c_out = weight.shape()[0];
        let mut out = Tensor::zeros([s.batch, c_out, s.height, s.width]).unwrap();
        for b in 0..s.batch {
            for o in 0..c_out {
                for h in 0..s.height {
                    for w in 0..s.width {
                        let mut acc = bias.data()[o];
                        for i in 0..s.channels {
                            acc += weight.get(&[o, i, 0, 0]).unwrap() * x.get(&[b, i, h, w]).unwrap();
                        }
                        out.set(&[b, o, h, w], acc).unwrap();
                    }
                }
            }
        }
        out
    }

    /// Naive quadruple-loop cross-correlation with zero padding.
    fn depthwise_oracle(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let s = x.shape4().unwrap();
        let k = weight.shape()[2] as isize;
        let p = k / 2;
        let mut out = Tensor::zeros(s.dims().to_vec()).unwrap();
        for b in 0..s.batch {
            for c in 0..s.channels {
                for h in 0..s.height as isize {
                    for w in 0..s.width as isize {
                        let mut acc = bias.data()[c];
                        for i in 0..k {
                            for j in 0..k {
                                let (ih, iw) = (h + i - p, w + j - p);
                                if ih < 0 || iw < 0 || ih >= s.height as isize || iw >= s.width as isize {
                                    continue;
                                }
                                acc += weight.get(&[c, 0, i as usize, j as usize]).unwrap()
                                    * x.get(&[b, c, ih as usize, iw as usize]).unwrap();
                            }
                        }
                        out.set(&[b, c, h as usize, w as usize], acc).unwrap();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_pointwise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let mut layer = Conv1x1Grouped::zeros(3, 3, 1).unwrap();
        for c in 0..3 {
            layer.weight.set(&[c, c, 0, 0], 1.0).unwrap();
        }
        assert_eq!(conv1x1_grouped(&x, &layer).unwrap(), x);
    }

    #[test]
    fn pointwise_sums_channels() {
        let x = Tensor::full([1, 2, 3, 3], 3.0).unwrap();
        let layer = Conv1x1Grouped {
            weight: Tensor::ones([1, 2, 1, 1]).unwrap(),
            bias: Tensor::zeros([1]).unwrap(),
            groups: 1,
        };
        let y = conv1x1_grouped(&x, &layer).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn grouped_matches_block_diagonal_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 4, 3, 3], &mut rng);
        let layer = Conv1x1Grouped {
            weight: random(&[4, 2, 1, 1], &mut rng),
            bias: random(&[4], &mut rng),
            groups: 2,
        };
        let dense = layer.to_dense().unwrap();
        // Cross-group entries are zero in the embedding.
        assert_eq!(dense.weight.get(&[0, 2, 0, 0]).unwrap(), 0.0);
        assert_eq!(dense.weight.get(&[3, 1, 0, 0]).unwrap(), 0.0);
        let got = conv1x1_grouped(&x, &layer).unwrap();
        let want = dense_pointwise_oracle(&x, &dense.weight, &dense.bias);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn pointwise_rejects_bad_groups() {
        assert!(Conv1x1Grouped::zeros(6, 4, 4).is_err());
        let x = Tensor::zeros([1, 3, 2, 2]).unwrap();
        let layer = Conv1x1Grouped::zeros(4, 4, 2).unwrap();
        assert!(conv1x1_grouped(&x, &layer).is_err());
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 2, 5, 4], &mut rng);
        let mut layer = ConvDepthwise::zeros(2, 3).unwrap();
        for c in 0..2 {
            layer.weight.set(&[c, 0, 1, 1], 1.0).unwrap();
        }
        assert_eq!(conv_depthwise(&x, &layer).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_valid_taps() {
        let x = Tensor::ones([1, 1, 3, 3]).unwrap();
        let layer = ConvDepthwise {
            weight: Tensor::ones([1, 1, 3, 3]).unwrap(),
            bias: Tensor::zeros([1]).unwrap(),
            kernel: 3,
        };
        let y = conv_depthwise(&x, &layer).unwrap();
        assert_eq!(y.get(&[0, 0, 1, 1]).unwrap(), 9.0);
        for (h, w) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.get(&[0, 0, h, w]).unwrap(), 4.0);
        }
        assert_eq!(y.get(&[0, 0, 0, 1]).unwrap(), 6.0);
    }

    #[test]
    fn depthwise_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [3, 5, 7, 9] {
            let x = random(&[2, 3, 6, 5], &mut rng);
            let w = random(&[3, 1, k, k], &mut rng);
            let b = random(&[3], &mut rng);
            let got = conv_depthwise_raw(&x, &w, &b).unwrap();
            let want = depthwise_oracle(&x, &w, &b);
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-12, "k={k}");
        }
    }

    #[test]
    fn depthwise_rejects_even_kernel_and_channel_mismatch() {
        assert!(ConvDepthwise::zeros(2, 4).is_err());
        let x = Tensor::zeros([1, 3, 4, 4]).unwrap();
        let layer = ConvDepthwise::zeros(2, 3).unwrap();
        assert!(conv_depthwise(&x, &layer).is_err());
        let even = Tensor::zeros([3, 1, 2, 2]).unwrap();
        assert!(conv_depthwise_raw(&x, &even, &Tensor::zeros([3]).unwrap()).is_err());
    }

    #[test]
    fn conv2d_stride_one_matches_depthwise_on_single_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 1, 5, 5], &mut rng);
        let w = random(&[1, 1, 3, 3], &mut rng);
        let b = random(&[1], &mut rng);
        let a = conv2d(&x, &w, &b, 1).unwrap();
        let d = conv_depthwise_raw(&x, &w, &b).unwrap();
        assert!(a.max_abs_diff(&d).unwrap() <= 1e-12);
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let x = Tensor::zeros([1, 3, 16, 16]).unwrap();
        let w = Tensor::zeros([8, 3, 3, 3]).unwrap();
        let y = conv2d(&x, &w, &Tensor::zeros([8]).unwrap(), 2).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 8]);
        let x = Tensor::zeros([1, 3, 5, 5]).unwrap();
        let y = conv2d(&x, &w, &Tensor::zeros([8]).unwrap(), 2).unwrap();
        assert_eq!(y.shape(), &[1, 8, 3, 3]);
    }
}
