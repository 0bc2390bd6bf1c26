use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::tensor::Tensor;

/// Standard normal CDF via the error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Phi(1) = 0.841344746068543
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_543).abs() < 1e-6);
        assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-6);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_odd_part_is_identity() {
        for i in -400..=400 {
            let x = i as f64 * 0.025;
            let d = gelu_scalar(x) - gelu_scalar(-x);
            assert!((d - x).abs() <= 1e-12, "x={x}: {d}");
        }
    }

    #[test]
    fn sigmoid_saturates_and_centers() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(30.0) > 1.0 - 1e-9);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        assert!(sigmoid_scalar(800.0) <= 1.0);
    }
}
