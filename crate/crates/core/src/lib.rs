//! MSLoRA: multi-scale low-rank reweighting adapters for frozen vision
//! backbones.
//!
//! The crate is layered bottom-up: [`tensor`] storage, [`ops`] primitives
//! with adjoints, [`autograd`] tape and gradient checker, the [`adapter`]
//! module itself, whole-backbone [`budget`] accounting, and a small
//! frozen-backbone training [`harness`].

pub mod adapter;
pub mod autograd;
pub mod budget;
pub mod cli;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod ops;
pub mod tensor;

pub use adapter::{init, AdapterParams, MsLoRAConfig, ParamBreakdown, Variant};
pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor};
