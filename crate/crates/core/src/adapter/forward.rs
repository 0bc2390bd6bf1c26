//! Adapter forward pass.
//!
//! `out = F + Up(L * T)` where `L = Down_lin(F0)`, `T = Trans(Down_trans(F0))`
//! and `F0` is `F` or `LayerNorm(F)` when `pre_norm` is set. With the channel
//! shuffle trick both down-projections are followed by the same shuffle.

use crate::adapter::config::MsLoRAConfig;
use crate::adapter::params::{AdapterParams, TransformParams};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Projection branch `L`, if active.
    pub linear: Option<Tensor>,
    /// Per-path activations in the transform (depthwise paths, then the
    /// pooled path if present), after gating.
    pub paths: Vec<Tensor>,
    /// Transform output `T`, if active.
    pub transform: Option<Tensor>,
    /// Input to the up-projection.
    pub fused: Tensor,
    pub output: Tensor,
}

/// Tape handles for the same intermediates as [`ForwardTrace`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub linear: Option<Var>,
    pub paths: Vec<Var>,
    pub transform: Option<Var>,
    pub fused: Var,
    pub output: Var,
}

fn check_channels(tape: &Tape, x: Var, expected: usize, what: &str) -> Result<()> {
    let s = tape.value(x).shape4()?;
    if s.channels != expected {
        return Err(Error::shape(format!(
            "{what}: expected {expected} channels, got {}",
            s.channels
        )));
    }
    Ok(())
}

/// Multi-scale transformation on a `[B, D, H, W]` map, recorded on `tape`.
/// Returns the output and the per-path activations.
pub fn transform_on_tape(
    tape: &mut Tape,
    z: Var,
    params: &TransformParams<Var>,
    config: &MsLoRAConfig,
) -> Result<(Var, Vec<Var>)> {
    check_channels(tape, z, config.rank, "transform")?;
    let tricks = config.tricks;
    let pooled = if tricks.global_pool || tricks.gated_attention {
        Some(tape.global_avg_pool(z)?)
    } else {
        None
    };

    let mut paths = Vec::with_capacity(params.depthwise.len() + 1);
    for (i, dw) in params.depthwise.iter().enumerate() {
        let conv = tape.depthwise_layer(z, dw)?;
        let mut act = tape.gelu(conv);
        if let (Some(gate), Some(p)) = (params.path_gates.get(i), pooled) {
            let g = tape.gate_layer(p, gate)?;
            act = tape.broadcast_mul(act, g)?;
        }
        paths.push(act);
    }
    let mut sum = paths[0];
    for &p in &paths[1..] {
        sum = tape.add(sum, p)?;
    }
    if tricks.global_pool {
        let p = pooled.expect("pooled branch input");
        let mut act = tape.gelu(p);
        if let Some(gate) = &params.pool_gate {
            let g = tape.gate_layer(p, gate)?;
            act = tape.mul(act, g)?;
        }
        paths.push(act);
        sum = tape.broadcast_add(sum, act)?;
    }

    let mut out = tape.conv1x1_layer(sum, &params.pointwise)?;
    if let Some(norm) = &params.norm {
        let n = tape.layernorm_layer(out, norm)?;
        out = tape.gelu(n);
    }
    Ok((out, paths))
}

/// Full adapter forward on `tape`, `x` of shape `[B, C_in, H, W]`.
pub fn forward_on_tape(
    tape: &mut Tape,
    x: Var,
    params: &AdapterParams<Var>,
    config: &MsLoRAConfig,
) -> Result<ForwardVars> {
    check_channels(tape, x, config.in_channels, "adapter input")?;
    let x0 = match &params.input_norm {
        Some(norm) => tape.layernorm_layer(x, norm)?,
        None => x,
    };
    let shuffle = config.tricks.channel_shuffle && config.groups > 1;
    let project = |tape: &mut Tape, layer| -> Result<Var> {
        let y = tape.conv1x1_layer(x0, layer)?;
        if shuffle {
            tape.channel_shuffle(y, config.groups)
        } else {
            Ok(y)
        }
    };

    let linear = match &params.down_proj_linear {
        Some(layer) => Some(project(tape, layer)?),
        None => None,
    };
    let (transform, paths) = match (&params.down_proj_trans, &params.transform) {
        (Some(down), Some(t)) => {
            let z = project(tape, down)?;
            let (out, paths) = transform_on_tape(tape, z, t, config)?;
            (Some(out), paths)
        }
        (None, None) => (None, Vec::new()),
        _ => return Err(Error::config("transform branch is missing its down-projection")),
    };
    let fused = match (linear, transform) {
        (Some(l), Some(t)) => tape.mul(l, t)?,
        (Some(l), None) => l,
        (None, Some(t)) => t,
        (None, None) => return Err(Error::config("adapter has no active branch")),
    };
    let update = tape.conv1x1_layer(fused, &params.up_proj)?;
    let output = tape.add(x, update)?;
    Ok(ForwardVars {
        linear,
        paths,
        transform,
        fused,
        output,
    })
}

/// Records `params` as constants (no gradients) on a fresh tape.
fn constant_params(tape: &mut Tape, params: &AdapterParams) -> AdapterParams<Var> {
    params.map("", &mut |_, t| tape.constant(t.clone()))
}

/// Eager adapter forward: `F + Up(L * T)`, same shape as `x`.
pub fn forward(x: &Tensor, params: &AdapterParams, config: &MsLoRAConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = constant_params(&mut tape, params);
    let xv = tape.constant(x.clone());
    let vars = forward_on_tape(&mut tape, xv, &p, config)?;
    Ok(tape.value(vars.output).clone())
}

/// Eager forward that also returns every intermediate.
pub fn forward_traced(x: &Tensor, params: &AdapterParams, config: &MsLoRAConfig) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let p = constant_params(&mut tape, params);
    let xv = tape.constant(x.clone());
    let v = forward_on_tape(&mut tape, xv, &p, config)?;
    Ok(ForwardTrace {
        linear: v.linear.map(|l| tape.value(l).clone()),
        paths: v.paths.iter().map(|&p| tape.value(p).clone()).collect(),
        transform: v.transform.map(|t| tape.value(t).clone()),
        fused: tape.value(v.fused).clone(),
        output: tape.value(v.output).clone(),
    })
}

/// Eager transform on a `[B, D, H, W]` map.
pub fn transform(z: &Tensor, params: &TransformParams, config: &MsLoRAConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.map("", &mut |_, t| tape.constant(t.clone()));
    let zv = tape.constant(z.clone());
    let (out, _) = transform_on_tape(&mut tape, zv, &p, config)?;
    Ok(tape.value(out).clone())
}

/// Adapter on a `[B, N, C]` token sequence laid out on an `H x W` grid.
pub fn forward_tokens(
    tokens: &Tensor,
    height: usize,
    width: usize,
    params: &AdapterParams,
    config: &MsLoRAConfig,
) -> Result<Tensor> {
    let grid = crate::ops::tokens_to_grid(tokens, height, width)?;
    let out = forward(&grid, params, config)?;
    crate::ops::grid_to_tokens(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::config::{Branches, Tricks, Variant};
    use crate::adapter::params::init;
    use crate::ops::{Conv1x1Grouped, LayerNormChannels};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn identity_conv(c: usize) -> Conv1x1Grouped {
        let mut l = Conv1x1Grouped::zeros(c, c, 1).unwrap();
        for i in 0..c {
            l.weight.set(&[i, i, 0, 0], 1.0).unwrap();
        }
        l
    }

    #[test]
    fn zero_transform_weights_give_zero() {
        let cfg = MsLoRAConfig::new(8)
            .with_rank(4)
            .with_groups(1)
            .with_variant(Variant::Grouped);
        let mut t = init(&cfg, 0).unwrap().transform.unwrap();
        for dw in &mut t.depthwise {
            dw.weight = Tensor::zeros_like(&dw.weight);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = random(&[2, 4, 5, 5], &mut rng);
        let y = transform(&z, &t, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernel_identity_mixer_gives_gelu() {
        let cfg = MsLoRAConfig::new(4)
            .with_rank(4)
            .with_groups(1)
            .with_kernels(&[3])
            .with_variant(Variant::Minimal);
        let mut t = init(&cfg, 0).unwrap().transform.unwrap();
        t.depthwise[0].weight = Tensor::zeros([4, 1, 3, 3]).unwrap();
        for c in 0..4 {
            t.depthwise[0].weight.set(&[c, 0, 1, 1], 1.0).unwrap();
        }
        t.pointwise = identity_conv(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random(&[1, 4, 4, 4], &mut rng);
        let y = transform(&z, &t, &cfg).unwrap();
        assert!(y.max_abs_diff(&crate::ops::gelu(&z)).unwrap() == 0.0);
    }

    #[test]
    fn zeroed_extra_paths_match_single_kernel_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let multi = MsLoRAConfig::new(8)
            .with_rank(4)
            .with_groups(1)
            .with_variant(Variant::Grouped);
        let single = multi.clone().with_kernels(&[3]);
        let mut tm = init(&multi, 5).unwrap().transform.unwrap();
        let mut ts = init(&single, 5).unwrap().transform.unwrap();
        tm.depthwise[0].weight = random(&[4, 1, 3, 3], &mut rng);
        tm.depthwise[0].bias = random(&[4], &mut rng);
        ts.depthwise[0] = tm.depthwise[0].clone();
        ts.pointwise = tm.pointwise.clone();
        for dw in &mut tm.depthwise[1..] {
            dw.weight = Tensor::zeros_like(&dw.weight);
            dw.bias = Tensor::zeros_like(&dw.bias);
        }
        let z = random(&[2, 4, 6, 6], &mut rng);
        let a = transform(&z, &tm, &multi).unwrap();
        let b = transform(&z, &ts, &single).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn fresh_adapter_is_identity_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 16, 5, 5], &mut rng);
        for variant in Variant::ALL {
            let groups = if variant == Variant::Minimal { 1 } else { 4 };
            let tricks = if variant == Variant::Tricks {
                Tricks::ALL
            } else {
                Tricks::NONE
            };
            let cfg = MsLoRAConfig::new(16)
                .with_rank(8)
                .with_groups(groups)
                .with_variant(variant)
                .with_tricks(tricks);
            let p = init(&cfg, 9).unwrap();
            let y = forward(&x, &p, &cfg).unwrap();
            assert_eq!(y.max_abs_diff(&x).unwrap(), 0.0, "{variant}");
        }
    }

    #[test]
    fn identity_wiring_doubles_input() {
        // C_in = D, G = 1, identity projections, transform pinned to ones
        // through a zero-weight pointwise mixer with unit bias.
        let cfg = MsLoRAConfig::new(4)
            .with_rank(4)
            .with_groups(1)
            .with_variant(Variant::Minimal);
        let mut p = init(&cfg, 0).unwrap();
        p.down_proj_linear = Some(identity_conv(4));
        p.down_proj_trans = Some(identity_conv(4));
        let t = p.transform.as_mut().unwrap();
        t.pointwise.weight = Tensor::zeros_like(&t.pointwise.weight);
        t.pointwise.bias = Tensor::ones([4]).unwrap();
        p.up_proj = identity_conv(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 4, 3, 3], &mut rng);
        let y = forward(&x, &p, &cfg).unwrap();
        assert!(y.max_abs_diff(&x.scale(2.0)).unwrap() == 0.0);
    }

    #[test]
    fn branch_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 8, 4, 4], &mut rng);
        for branches in [Branches::Linear, Branches::Nonlinear] {
            let cfg = MsLoRAConfig::new(8).with_rank(4).with_groups(2).with_branches(branches);
            let mut p = init(&cfg, 1).unwrap();
            p.perturb(&mut rng, 0.5);
            let trace = forward_traced(&x, &p, &cfg).unwrap();
            assert_eq!(trace.output.shape(), x.shape());
            assert_eq!(trace.linear.is_some(), branches == Branches::Linear);
            assert_eq!(trace.transform.is_some(), branches == Branches::Nonlinear);
        }
    }

    #[test]
    fn trace_shapes() {
        let cfg = MsLoRAConfig::new(16)
            .with_rank(8)
            .with_variant(Variant::Tricks)
            .with_tricks(Tricks::ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = init(&cfg, 0).unwrap();
        p.perturb(&mut rng, 0.3);
        let x = random(&[2, 16, 6, 6], &mut rng);
        let tr = forward_traced(&x, &p, &cfg).unwrap();
        assert_eq!(tr.linear.as_ref().unwrap().shape(), &[2, 8, 6, 6]);
        assert_eq!(tr.paths.len(), 4);
        assert_eq!(tr.paths[3].shape(), &[2, 8, 1, 1]);
        assert_eq!(tr.fused.shape(), &[2, 8, 6, 6]);
        assert_eq!(tr.output.shape(), x.shape());
    }

    #[test]
    fn channel_mismatch_is_error() {
        let cfg = MsLoRAConfig::new(16).with_rank(8);
        let p = init(&cfg, 0).unwrap();
        assert!(forward(&Tensor::zeros([1, 8, 4, 4]).unwrap(), &p, &cfg).is_err());
    }

    #[test]
    fn token_forward_matches_grid_forward() {
        let cfg = MsLoRAConfig::for_tokens(8).with_rank(4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = init(&cfg, 2).unwrap();
        p.perturb(&mut rng, 0.4);
        assert!(p.input_norm.is_some());
        let tokens = random(&[2, 12, 8], &mut rng);
        let out = forward_tokens(&tokens, 3, 4, &p, &cfg).unwrap();
        assert_eq!(out.shape(), &[2, 12, 8]);
        let grid = crate::ops::tokens_to_grid(&tokens, 3, 4).unwrap();
        let direct = forward(&grid, &p, &cfg).unwrap();
        assert!(crate::ops::grid_to_tokens(&direct).unwrap().bitwise_eq(&out));
        assert!(forward_tokens(&tokens, 3, 3, &p, &cfg).is_err());
    }

    #[test]
    fn pre_norm_changes_the_projection_input() {
        let cfg = MsLoRAConfig::new(8).with_rank(4).with_pre_norm(true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = init(&cfg, 0).unwrap();
        p.perturb(&mut rng, 0.4);
        let x = random(&[1, 8, 3, 3], &mut rng);
        // Shifting every channel at a site by the same constant is invisible
        // after the input LayerNorm, so only the residual moves.
        let shifted = x.map(|v| v + 3.0);
        let a = forward(&x, &p, &cfg).unwrap().sub(&x).unwrap();
        let b = forward(&shifted, &p, &cfg).unwrap().sub(&shifted).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
        let _ = LayerNormChannels::identity(1);
    }
}
