//! Structural parameter counts of a constructed adapter.

use serde::{Deserialize, Serialize};

use crate::adapter::params::AdapterParams;

/// Parameter tally split into the projection branch, the transformation
/// branch, and everything else (biases, norms, gates).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Weights of the grouped 1x1 projections.
    pub proj: u64,
    /// Depthwise and pointwise weights of the transformation branch.
    pub trans: u64,
    /// Biases, LayerNorm affine parameters and gates.
    pub extras: u64,
    /// `proj / trans`, absent when `trans` is zero.
    pub ratio: Option<f64>,
    /// `proj + trans`, the weight-only total.
    pub total: u64,
    /// `100 * total / backbone_params`, when a backbone is known.
    pub percent: Option<f64>,
}

impl ParamBreakdown {
    pub fn new(proj: u64, trans: u64, extras: u64) -> Self {
        Self {
            proj,
            trans,
            extras,
            ratio: (trans > 0).then(|| proj as f64 / trans as f64),
            total: proj + trans,
            percent: None,
        }
    }

    /// Weights plus extras.
    pub fn all(&self) -> u64 {
        self.total + self.extras
    }

    /// Element-wise sum; the ratio is recomputed from the summed counts.
    pub fn combine(&self, other: &ParamBreakdown) -> ParamBreakdown {
        ParamBreakdown::new(
            self.proj + other.proj,
            self.trans + other.trans,
            self.extras + other.extras,
        )
    }
}

/// Counts the tensors actually present in `params`.
pub fn param_count(params: &AdapterParams) -> ParamBreakdown {
    let (mut proj, mut trans, mut extras) = (0u64, 0u64, 0u64);
    params.visit("", &mut |name, t| {
        let n = t.len() as u64;
        let is_weight = name.ends_with(".weight") && !name.contains(".gate.");
        if is_weight && (name.starts_with("down_proj_") || name.starts_with("up_proj")) {
            proj += n;
        } else if is_weight && name.starts_with("transform.") {
            trans += n;
        } else {
            extras += n;
        }
    });
    ParamBreakdown::new(proj, trans, extras)
}
