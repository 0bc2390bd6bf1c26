//! Dense classification head and softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y = x W^T + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, fan_in, fan_out) = match (x.shape(), weight.shape()) {
        (&[b, i], &[o, i2]) if i == i2 => (b, i, o),
        (xs, ws) => {
            return Err(Error::shape(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )))
        }
    };
    if bias.shape() != [fan_out] {
        return Err(Error::shape(format!(
            "linear: bias must be [{fan_out}], got {:?}",
            bias.shape()
        )));
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut out = Vec::with_capacity(batch * fan_out);
    for b in 0..batch {
        let row = &xd[b * fan_in..][..fan_in];
        for o in 0..fan_out {
            let wr = &wd[o * fan_in..][..fan_in];
            out.push(bias.data()[o] + row.iter().zip(wr).map(|(a, w)| a * w).sum::<f64>());
        }
    }
    Tensor::new([batch, fan_out], out)
}

/// Adjoints `(dx, dweight, dbias)` of [`linear`].
pub fn linear_backward(x: &Tensor, weight: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, fan_in) = (x.shape()[0], x.shape()[1]);
    let fan_out = weight.shape()[0];
    let (xd, wd, gd) = (x.data(), weight.data(), dout.data());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; fan_out];
    for b in 0..batch {
        for o in 0..fan_out {
            let g = gd[b * fan_out + o];
            db[o] += g;
            for i in 0..fan_in {
                dx[b * fan_in + i] += g * wd[o * fan_in + i];
                dw[o * fan_in + i] += g * xd[b * fan_in + i];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::vector(db)?,
    ))
}

/// Row-wise softmax of `[B, K]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let k = match logits.shape() {
        &[_, k] => k,
        other => return Err(Error::shape(format!("softmax expects [B, K], got {other:?}"))),
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean softmax cross-entropy. Returns `(loss, probabilities)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let probs = softmax(logits)?;
    let (batch, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::shape(format!(
            "cross_entropy: {} labels for batch of {batch}",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::shape(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[b * k..][..k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    Ok((loss / batch as f64, probs))
}

pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize], dloss: f64) -> Result<Tensor> {
    let (batch, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = dloss / batch as f64;
    let mut d = probs.data().to_vec();
    for (b, &y) in labels.iter().enumerate() {
        d[b * k + y] -= 1.0;
    }
    d.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(probs.shape().to_vec(), d)
}
