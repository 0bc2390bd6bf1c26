//! Adapter-only training and ablation runs.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{Branches, Tricks, Variant};
use crate::autograd::{Optimizer, OptimizerKind, Tape};
use crate::error::{Error, Result};
use crate::harness::backbone::ToyBackbone;
use crate::harness::model::{AdapterTemplate, Model};
use crate::harness::task::{SyntheticTask, TaskKind};

/// Everything a training run depends on besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Backbone stage widths; one block and one adapter per entry.
    pub widths: Vec<usize>,
    pub image_size: usize,
    /// Seed of the frozen backbone, fixed across runs.
    pub backbone_seed: u64,
    pub frozen_bn: bool,
    pub adapter: AdapterTemplate,
    pub task: TaskKind,
    pub samples: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            image_size: 16,
            backbone_seed: 0,
            frozen_bn: false,
            adapter: AdapterTemplate::default(),
            task: TaskKind::ChannelBias,
            samples: 256,
            batch_size: 32,
            steps: 300,
            lr: 1e-3,
            optimizer: OptimizerKind::AdamW,
        }
    }
}

impl HarnessConfig {
    pub fn backbone(&self) -> Result<ToyBackbone> {
        ToyBackbone::new(&self.widths, self.backbone_seed, self.frozen_bn)
    }

    pub fn task(&self, seed: u64) -> Result<SyntheticTask> {
        SyntheticTask::generate(self.task, self.samples, self.image_size, seed)
    }

    pub fn model(&self, seed: u64) -> Result<Model> {
        Model::build(self.backbone()?, &self.adapter, self.task.classes(), seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: TaskKind,
    pub seed: u64,
    pub steps: usize,
    /// Mean minibatch cross-entropy at each step, before the update.
    pub losses: Vec<f64>,
    /// Accuracy on the full training set after the last step.
    pub final_accuracy: f64,
    pub trainable_params: u64,
    pub digest_before: String,
    pub digest_after: String,
    pub config: HarnessConfig,
    /// Not serialized: reruns must produce identical report bytes.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Trains the adapters and head of `model` on `task`; the backbone only
/// ever enters the tape as constants.
pub fn train(model: &mut Model, task: &SyntheticTask, config: &HarnessConfig, seed: u64) -> Result<TrainReport> {
    let started = Instant::now();
    if config.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let digest_before = model.backbone.digest();
    let mut optimizer = Optimizer::new(config.optimizer, config.lr)?;
    // Separate stream from the task and initialization draws of the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        if order.len() < config.batch_size {
            let mut epoch: Vec<usize> = (0..task.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let take = config.batch_size.min(order.len());
        let indices: Vec<usize> = order.drain(..take).collect();
        let (images, labels) = task.batch(&indices)?;

        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true);
        let x = tape.constant(images);
        let logits = model.logits_on_tape(&mut tape, x, &vars, true)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        losses.push(value);
        let mut grads = tape.backward(loss)?;
        let grads = vars
            .all
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .ok_or_else(|| Error::Autodiff("missing parameter gradient".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        optimizer.step(&mut model.trainable_mut(), &grads)?;
    }

    let final_accuracy = model.accuracy(&task.images, &task.labels)?;
    Ok(TrainReport {
        task: task.kind,
        seed,
        steps: config.steps,
        losses,
        final_accuracy,
        trainable_params: model.trainable_count(),
        digest_before,
        digest_after: model.backbone.digest(),
        config: config.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Builds the model and task for `seed` and trains.
pub fn run(config: &HarnessConfig, seed: u64) -> Result<(Model, TrainReport)> {
    let task = config.task(seed)?;
    let mut model = config.model(seed)?;
    let report = train(&mut model, &task, config, seed)?;
    Ok((model, report))
}

/// Applies an ablation variant name onto `base`. Names combine with `+`:
/// `linear`, `nonlinear`, `both`, `minimal`, `grouped`, `enhanced`,
/// `tricks`, `pool`, `gate`, `shuffle`, and kernel sets such as `k3` or
/// `k3-5-7`.
pub fn apply_variant(base: &AdapterTemplate, name: &str) -> Result<AdapterTemplate> {
    let mut t = base.clone();
    for part in name.split('+') {
        match part {
            "linear" => t.branches = Branches::Linear,
            "nonlinear" => t.branches = Branches::Nonlinear,
            "both" => t.branches = Branches::Both,
            "minimal" => {
                t.variant = Variant::Minimal;
                t.groups = 1;
                t.tricks = Tricks::NONE;
            }
            "grouped" | "enhanced" => {
                t.variant = part.parse()?;
                t.tricks = Tricks::NONE;
            }
            "tricks" => {
                t.variant = Variant::Tricks;
                t.tricks = Tricks::ALL;
            }
            "pool" | "gate" | "shuffle" => {
                t.variant = Variant::Tricks;
                match part {
                    "pool" => t.tricks.global_pool = true,
                    "gate" => t.tricks.gated_attention = true,
                    _ => t.tricks.channel_shuffle = true,
                }
            }
            k if k.starts_with('k') => {
                t.kernels = k[1..]
                    .split('-')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::config(format!("bad kernel set `{k}`")))?;
            }
            other => return Err(Error::config(format!("unknown ablation variant `{other}`"))),
        }
    }
    t.for_width(t.groups.max(1) * t.rank.max(1)).validate()?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub trainable_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub median_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: TaskKind,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<AblationSummary>,
}

impl AblationReport {
    pub fn median(&self, variant: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.variant == variant)
            .map(|s| s.median_accuracy)
    }

    /// `variant,seed,acc`, one line per run.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,acc\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{}\n", r.variant, r.seed, r.accuracy));
        }
        s
    }

    /// `variant,median_acc`, one line per variant.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,median_acc\n");
        for r in &self.summary {
            s.push_str(&format!("{},{}\n", r.variant, r.median_accuracy));
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains every `(variant, seed)` pair independently (in parallel) and
/// reports per-variant medians in the order given.
pub fn ablate(base: &HarnessConfig, variants: &[String], seeds: &[u64]) -> Result<AblationReport> {
    if variants.len() < 2 {
        return Err(Error::config(format!(
            "ablation needs at least two variants, got {}",
            variants.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let templates = variants
        .iter()
        .map(|v| apply_variant(&base.adapter, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(vi, seed)| {
            let config = HarnessConfig {
                adapter: templates[vi].clone(),
                ..base.clone()
            };
            let (_, report) = run(&config, seed)?;
            Ok(AblationRun {
                variant: variants[vi].clone(),
                seed,
                accuracy: report.final_accuracy,
                trainable_params: report.trainable_params,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_variant: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        by_variant.entry(&r.variant).or_default().push(r.accuracy);
    }
    let summary = variants
        .iter()
        .map(|v| AblationSummary {
            variant: v.clone(),
            median_accuracy: median(&by_variant[v.as_str()]),
        })
        .collect();
    Ok(AblationReport {
        task: base.task,
        runs,
        summary,
    })
}
