//! Finite-difference checks over every differentiable operation and every
//! adapter variant at small sizes.
//!
//! Each case draws inputs and parameters uniformly from `[-2, 2]` and
//! reduces the output with a random weighted sum, so no gradient is
//! identically zero by symmetry (a plain sum through LayerNorm would be).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{forward_on_tape, init, Branches, MsLoRAConfig, Tricks, Variant};
use crate::autograd::{gradcheck, GradReport, GradcheckOptions, OpKind, Tape, Var, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::error::Result;
use crate::tensor::Tensor;

/// Input size used by the module cases.
pub const MODULE_CHANNELS: usize = 16;
pub const MODULE_RANK: usize = 8;
pub const MODULE_GROUPS: usize = 4;
pub const MODULE_SIDE: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Corrupts the adjoint of one operation kind (checks the checker).
    pub fault: Option<OpKind>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub reports: Vec<GradReport>,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradReport> {
        self.reports.iter().filter(move |r| !r.passes(self.tolerance))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// One gradcheck case: named parameters and the program over them.
struct Case {
    name: String,
    params: Vec<(String, Tensor)>,
    program: Program,
}

struct CaseBuilder {
    rng: ChaCha8Rng,
}

impl CaseBuilder {
    fn uniform(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape.to_vec(), -2.0, 2.0, &mut self.rng).expect("positive extents")
    }

    /// Builds a case whose output is reduced by a fixed random weighting.
    fn case<F>(&mut self, name: &str, params: Vec<(&str, Vec<usize>)>, out_shape: &[usize], f: F) -> Case
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
    {
        let params = params
            .into_iter()
            .map(|(n, shape)| (n.to_string(), self.uniform(&shape)))
            .collect();
        let weights = self.uniform(out_shape);
        Case {
            name: name.to_string(),
            params,
            program: Box::new(move |tape, vars| {
                let out = f(tape, vars)?;
                tape.weighted_sum(out, weights.clone())
            }),
        }
    }
}

fn op_cases(b: &mut CaseBuilder) -> Vec<Case> {
    let fm = vec![2, 8, 6, 6];
    let pooled = vec![2, 8, 1, 1];
    let mut cases = vec![
        b.case("add", vec![("a", fm.clone()), ("b", fm.clone())], &fm, |t, v| {
            t.add(v[0], v[1])
        }),
        b.case("sub", vec![("a", fm.clone()), ("b", fm.clone())], &fm, |t, v| {
            t.sub(v[0], v[1])
        }),
        b.case("mul", vec![("a", fm.clone()), ("b", fm.clone())], &fm, |t, v| {
            t.mul(v[0], v[1])
        }),
        b.case("scale", vec![("a", fm.clone())], &fm, |t, v| Ok(t.scale(v[0], -1.5))),
        b.case("sum", vec![("a", fm.clone())], &[1], |t, v| Ok(t.sum(v[0]))),
        b.case(
            "conv1x1_grouped",
            vec![("x", fm.clone()), ("weight", vec![12, 2, 1, 1]), ("bias", vec![12])],
            &[2, 12, 6, 6],
            |t, v| t.conv1x1(v[0], v[1], v[2], 4),
        ),
        b.case(
            "conv1x1_dense",
            vec![("x", fm.clone()), ("weight", vec![4, 8, 1, 1]), ("bias", vec![4])],
            &[2, 4, 6, 6],
            |t, v| t.conv1x1(v[0], v[1], v[2], 1),
        ),
    ];
    for k in [3, 5, 7] {
        cases.push(b.case(
            &format!("conv_depthwise_k{k}"),
            vec![("x", fm.clone()), ("weight", vec![8, 1, k, k]), ("bias", vec![8])],
            &fm,
            |t, v| t.depthwise(v[0], v[1], v[2]),
        ));
    }
    for stride in [1, 2] {
        let side = 6usize.div_ceil(stride);
        cases.push(b.case(
            &format!("conv2d_s{stride}"),
            vec![("x", vec![2, 3, 6, 6]), ("weight", vec![4, 3, 3, 3]), ("bias", vec![4])],
            &[2, 4, side, side],
            move |t, v| t.conv2d(v[0], v[1], v[2], stride),
        ));
    }
    cases.extend([
        b.case("gelu", vec![("x", fm.clone())], &fm, |t, v| Ok(t.gelu(v[0]))),
        b.case("sigmoid", vec![("x", fm.clone())], &fm, |t, v| Ok(t.sigmoid(v[0]))),
        b.case(
            "layernorm_channels",
            vec![("x", fm.clone()), ("gamma", vec![8]), ("beta", vec![8])],
            &fm,
            |t, v| t.layernorm(v[0], v[1], v[2], crate::ops::LAYERNORM_EPS),
        ),
        b.case("global_avg_pool", vec![("x", fm.clone())], &pooled, |t, v| {
            t.global_avg_pool(v[0])
        }),
        b.case("channel_shuffle", vec![("x", fm.clone())], &fm, |t, v| {
            t.channel_shuffle(v[0], 4)
        }),
        b.case(
            "sigmoid_gate",
            vec![("pooled", pooled.clone()), ("weight", vec![8]), ("bias", vec![8])],
            &pooled,
            |t, v| t.sigmoid_gate(v[0], v[1], v[2]),
        ),
        b.case(
            "broadcast_mul",
            vec![("x", fm.clone()), ("gate", pooled.clone())],
            &fm,
            |t, v| t.broadcast_mul(v[0], v[1]),
        ),
        b.case(
            "broadcast_add",
            vec![("x", fm.clone()), ("pooled", pooled.clone())],
            &fm,
            |t, v| t.broadcast_add(v[0], v[1]),
        ),
        b.case(
            "channel_affine",
            vec![("x", fm.clone()), ("scale", vec![8]), ("shift", vec![8])],
            &fm,
            |t, v| t.channel_affine(v[0], v[1], v[2]),
        ),
        b.case("reshape", vec![("x", fm.clone())], &[2, 288], |t, v| {
            t.reshape(v[0], &[2, 288])
        }),
        b.case(
            "linear",
            vec![("x", vec![4, 8]), ("weight", vec![3, 8]), ("bias", vec![3])],
            &[4, 3],
            |t, v| t.linear(v[0], v[1], v[2]),
        ),
        b.case("tokens_to_grid", vec![("x", vec![2, 36, 8])], &fm, |t, v| {
            t.tokens_to_grid(v[0], 6, 6)
        }),
        b.case("grid_to_tokens", vec![("x", fm.clone())], &[2, 36, 8], |t, v| {
            t.grid_to_tokens(v[0])
        }),
    ]);
    let labels = vec![0, 2, 1, 2];
    let logits = b.uniform(&[4, 3]);
    cases.push(Case {
        name: "cross_entropy".into(),
        params: vec![("logits".into(), logits)],
        program: Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
    });
    cases
}

/// Module configurations covered by the suite.
pub fn module_configs() -> Vec<(String, MsLoRAConfig)> {
    let base = MsLoRAConfig::new(MODULE_CHANNELS)
        .with_rank(MODULE_RANK)
        .with_groups(MODULE_GROUPS);
    let tricks = |t: Tricks| base.clone().with_variant(Variant::Tricks).with_tricks(t);
    vec![
        (
            "module_minimal".into(),
            base.clone().with_variant(Variant::Minimal).with_groups(1),
        ),
        ("module_grouped".into(), base.clone().with_variant(Variant::Grouped)),
        ("module_enhanced".into(), base.clone()),
        ("module_enhanced_pre_norm".into(), base.clone().with_pre_norm(true)),
        (
            "module_linear_only".into(),
            base.clone().with_branches(Branches::Linear),
        ),
        (
            "module_nonlinear_only".into(),
            base.clone().with_branches(Branches::Nonlinear),
        ),
        (
            "module_tricks_global_pool".into(),
            tricks(Tricks {
                global_pool: true,
                ..Tricks::NONE
            }),
        ),
        (
            "module_tricks_gated_attention".into(),
            tricks(Tricks {
                gated_attention: true,
                ..Tricks::NONE
            }),
        ),
        (
            "module_tricks_channel_shuffle".into(),
            tricks(Tricks {
                channel_shuffle: true,
                ..Tricks::NONE
            }),
        ),
        ("module_tricks_all".into(), tricks(Tricks::ALL)),
    ]
}

fn module_case(b: &mut CaseBuilder, name: &str, config: MsLoRAConfig) -> Result<Case> {
    let seed = b.rng.random();
    let mut params = init(&config, seed)?;
    // Move away from the zero up-projection so every path carries gradient.
    params.perturb(&mut b.rng, 0.5);
    let shape = [2, config.in_channels, MODULE_SIDE, MODULE_SIDE];
    let mut named = vec![("input".to_string(), b.uniform(&shape))];
    named.extend(params.named_tensors());
    let weights = b.uniform(&shape);
    Ok(Case {
        name: name.to_string(),
        params: named,
        program: Box::new(move |tape, vars| {
            let mut it = vars[1..].iter().copied();
            let p = params.map("", &mut |_, _| it.next().expect("one leaf per tensor"));
            let out = forward_on_tape(tape, vars[0], &p, &config)?;
            tape.weighted_sum(out.output, weights.clone())
        }),
    })
}

/// Names of every case, in report order.
pub fn case_names() -> Vec<String> {
    let mut b = CaseBuilder {
        rng: ChaCha8Rng::seed_from_u64(0),
    };
    let mut names: Vec<String> = op_cases(&mut b).into_iter().map(|c| c.name).collect();
    names.extend(module_configs().into_iter().map(|(n, _)| n));
    names
}

/// Runs every case. Reports come back in a fixed order regardless of
/// thread scheduling.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut b = CaseBuilder {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
    };
    let mut cases = op_cases(&mut b);
    for (name, config) in module_configs() {
        cases.push(module_case(&mut b, &name, config)?);
    }
    let gc = GradcheckOptions {
        step: opts.step,
        fault: opts.fault,
    };
    let reports = cases
        .par_iter()
        .map(|c| gradcheck(&c.name, &c.params, &gc, &c.program))
        .collect::<Result<Vec<_>>>()?;
    let passed = reports.iter().all(|r| r.passes(opts.tolerance));
    Ok(SuiteReport {
        seed: opts.seed,
        step: opts.step,
        tolerance: opts.tolerance,
        passed,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_with_an_adjoint_is_covered() {
        let names = case_names();
        for kind in OpKind::ALL {
            if matches!(kind, OpKind::Leaf | OpKind::Constant) {
                continue;
            }
            assert!(names.iter().any(|n| n.starts_with(kind.name())), "no case for {kind}");
        }
        for v in Variant::ALL {
            assert!(names.iter().any(|n| n.starts_with(&format!("module_{v}"))));
        }
    }

    #[test]
    fn module_configs_are_valid() {
        for (name, c) in module_configs() {
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
