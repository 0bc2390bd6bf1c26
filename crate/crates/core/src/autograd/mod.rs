//! Reverse-mode differentiation, finite-difference checking, and optimizers.

pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use gradcheck::{gradcheck, GradReport, GradcheckOptions, ParamError, DEFAULT_STEP, DEFAULT_TOLERANCE};
pub use optim::{sgd_step, AdamWConfig, Optimizer, OptimizerKind};
pub use tape::{Gradients, OpKind, Tape, Var};
