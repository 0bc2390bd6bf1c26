//! Desk-scale frozen-backbone adaptation: a fixed random conv backbone,
//! one adapter per block, and adapter-plus-head training on synthetic
//! tasks.

pub mod backbone;
pub mod model;
pub mod task;
pub mod train;

pub use backbone::{FrozenBatchNorm, ToyBackbone};
pub use model::{AdapterTemplate, Head, Model};
pub use task::{SyntheticTask, TaskKind};
pub use train::{
    ablate, apply_variant, median, run, train, AblationReport, AblationRun, AblationSummary, HarnessConfig, TrainReport,
};
