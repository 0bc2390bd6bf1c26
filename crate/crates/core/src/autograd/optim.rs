//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `p <- p - lr * g`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    check_lr(lr)?;
    check_shapes(param, grad)?;
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

fn check_shapes(param: &Tensor, grad: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "gradient shape {:?} does not match parameter {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Stateful optimizer over a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    AdamW {
        lr: f64,
        config: AdamWConfig,
        step: u64,
        moments: Vec<(Vec<f64>, Vec<f64>)>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::AdamW => Optimizer::AdamW {
                lr,
                config: AdamWConfig::default(),
                step: 0,
                moments: Vec::new(),
            },
        })
    }

    /// Applies one update. `params` and `grads` must keep the same order
    /// across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            check_shapes(p, g)?;
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    sgd_step(p, g, *lr)?;
                }
            }
            Optimizer::AdamW {
                lr,
                config,
                step,
                moments,
            } => {
                if moments.is_empty() {
                    *moments = params
                        .iter()
                        .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                        .collect();
                } else if moments.len() != params.len() {
                    return Err(Error::shape("parameter list changed between optimizer steps"));
                }
                *step += 1;
                let t = *step as i32;
                let bc1 = 1.0 - config.beta1.powi(t);
                let bc2 = 1.0 - config.beta2.powi(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments.iter_mut()) {
                    if m.len() != p.len() {
                        return Err(Error::shape("parameter size changed between optimizer steps"));
                    }
                    for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gv;
                        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gv * gv;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        *pv -= *lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * *pv);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        sgd_step(&mut p, &Tensor::vector(vec![2.0]).unwrap(), 0.5).unwrap();
        assert_eq!(p.data(), &[0.0]);

        let mut p = Tensor::vector(vec![3.0, -1.0]).unwrap();
        sgd_step(&mut p, &Tensor::zeros([2]).unwrap(), 0.1).unwrap();
        assert_eq!(p.data(), &[3.0, -1.0]);

        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let g = Tensor::vector(vec![1.0]).unwrap();
        sgd_step(&mut p, &g, 0.1).unwrap();
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_errors() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        assert!(sgd_step(&mut p, &Tensor::zeros([2]).unwrap(), 0.1).is_err());
        assert!(sgd_step(&mut p, &Tensor::zeros([1]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g) (minus decay).
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 1e-3).unwrap();
        let mut p = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let g = Tensor::vector(vec![2.0, -0.5]).unwrap();
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] + 1e-3).abs() < 1e-9);
        assert!((p.data()[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adamw_decays_with_zero_gradient() {
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.1).unwrap();
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::zeros([1]).unwrap()]).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }
}
