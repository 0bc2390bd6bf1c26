//! Central finite-difference gradient checking.

use serde::{Deserialize, Serialize};

use crate::autograd::tape::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;
/// Pass threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Corrupt this operation's adjoint in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op: String,
    pub step: f64,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_param: String,
    pub params: Vec<ParamError>,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor], fault: Option<OpKind>) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_fault(fault);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Autodiff(format!(
            "gradcheck program must return a scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    Ok((tape, vars, loss))
}

fn scalar_value<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = evaluate(f, params, None)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares the tape's gradient of `f` against central differences
/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every entry of every parameter.
///
/// `f` receives one leaf per entry of `params`, in order; fixed inputs are
/// captured by the closure.
pub fn gradcheck<F>(op: &str, params: &[(String, Tensor)], opts: &GradcheckOptions, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::config(format!(
            "gradcheck step must be positive, got {}",
            opts.step
        )));
    }
    let h = opts.step;
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let first = scalar_value(&f, &values)?;
    let second = scalar_value(&f, &values)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let (tape, vars, loss) = evaluate(&f, &values, opts.fault)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf has a gradient"))
        .collect();
    drop(tape);

    let mut report = GradReport {
        op: op.to_string(),
        step: h,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_param: params.first().map(|(n, _)| n.clone()).unwrap_or_default(),
        params: Vec::with_capacity(params.len()),
    };
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut worst = ParamError {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for j in 0..values[pi].len() {
            let orig = values[pi].data()[j];
            values[pi].data_mut()[j] = orig + h;
            let plus = scalar_value(&f, &values)?;
            values[pi].data_mut()[j] = orig - h;
            let minus = scalar_value(&f, &values)?;
            values[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[pi].data()[j], numeric);
            if err > worst.max_rel_error || err.is_nan() {
                worst.max_rel_error = err;
                worst.worst_index = j;
            }
        }
        if worst.max_rel_error > report.max_rel_error || worst.max_rel_error.is_nan() {
            report.max_rel_error = worst.max_rel_error;
            report.worst_index = worst.worst_index;
            report.worst_param = name.clone();
        }
        report.params.push(worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn unused_params_compare_as_zero() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let params = vec![("unused".to_string(), Tensor::vector(vec![0.5, -0.5]).unwrap())];
        let report = gradcheck("identity", &params, &GradcheckOptions::default(), |tape, _| {
            let c = tape.constant(x.clone());
            Ok(tape.sum(c))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    fn gelu_report(xs: Vec<f64>) -> GradReport {
        let params = vec![("x".to_string(), Tensor::vector(xs).unwrap())];
        gradcheck("gelu", &params, &GradcheckOptions::default(), |tape, v| {
            let g = tape.gelu(v[0]);
            Ok(tape.sum(g))
        })
        .unwrap()
    }

    #[test]
    fn gelu_sum_passes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs = (0..64).map(|_| rng.random_range(-3.0..=3.0)).collect();
        let report = gelu_report(xs);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gelu_near_its_stationary_point() {
        // GELU' vanishes near x = -0.7518, where the O(h^2) truncation error
        // of central differences dominates the tiny gradient.
        let xs: Vec<f64> = (0..25).map(|i| -3.0 + 0.25 * i as f64).collect();
        let report = gelu_report(xs);
        assert_eq!(report.worst_index, 9);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn detects_non_determinism() {
        let counter = Cell::new(0.0);
        let params = vec![("x".to_string(), Tensor::vector(vec![1.0]).unwrap())];
        let err = gradcheck("noisy", &params, &GradcheckOptions::default(), |tape, v| {
            counter.set(counter.get() + 1.0);
            let c = tape.constant(Tensor::vector(vec![counter.get()]).unwrap());
            let s = tape.add(v[0], c)?;
            Ok(tape.sum(s))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn fault_is_detected() {
        let params = vec![("x".to_string(), Tensor::vector(vec![0.4, -1.1]).unwrap())];
        let opts = GradcheckOptions {
            fault: Some(OpKind::Gelu),
            ..Default::default()
        };
        let report = gradcheck("gelu", &params, &opts, |tape, v| {
            let g = tape.gelu(v[0]);
            Ok(tape.sum(g))
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let opts = GradcheckOptions { step: 0.0, fault: None };
        assert!(gradcheck("x", &[], &opts, |tape, _| Ok(tape.constant(Tensor::scalar(1.0)))).is_err());
    }

    #[test]
    fn report_json_has_contract_fields() {
        let params = vec![("x".to_string(), Tensor::vector(vec![0.4]).unwrap())];
        let report = gradcheck("gelu", &params, &GradcheckOptions::default(), |tape, v| {
            let g = tape.gelu(v[0]);
            Ok(tape.sum(g))
        })
        .unwrap();
        let json: serde_json::Value = serde_json::to_value(&report).unwrap();
        for key in ["op", "step", "max_rel_error", "worst_index"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
