//! The MSLoRA adapter: configuration, parameters, forward pass, counting
//! and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod count;
pub mod forward;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use config::{Branches, MsLoRAConfig, Tricks, Variant, DEFAULT_GROUPS, DEFAULT_KERNELS, DEFAULT_RANK};
pub use count::{param_count, ParamBreakdown};
pub use forward::{
    forward, forward_on_tape, forward_tokens, forward_traced, transform, transform_on_tape, ForwardTrace, ForwardVars,
};
pub use params::{init, AdapterParams, TransformParams};
