//! Seeded synthetic image classification tasks.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::backbone::INPUT_CHANNELS;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Two classes: the sign of the mean of channel 0.
    ChannelBias,
    /// Four classes: the quadrant holding a planted blob.
    SpatialPattern,
    /// Three classes: the size of a planted blob.
    MultiScale,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::ChannelBias, TaskKind::SpatialPattern, TaskKind::MultiScale];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ChannelBias => "channel-bias",
            TaskKind::SpatialPattern => "spatial-pattern",
            TaskKind::MultiScale => "multi-scale",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            TaskKind::ChannelBias => 2,
            TaskKind::SpatialPattern => 4,
            TaskKind::MultiScale => 3,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task `{s}`")))
    }
}

/// Blob widths (Gaussian sigma, pixels) for the multi-scale classes.
pub const BLOB_SIGMAS: [f64; 3] = [1.0, 1.7, 2.8];
/// Channel-0 offset magnitude for the channel-bias task.
pub const CHANNEL_OFFSET: f64 = 0.5;

/// A generated dataset: images `[N, 3, S, S]` and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub image_size: usize,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl SyntheticTask {
    /// Labels are exactly balanced (up to one sample per class) and shuffled.
    pub fn generate(kind: TaskKind, samples: usize, image_size: usize, seed: u64) -> Result<Self> {
        if samples == 0 || image_size < 4 {
            return Err(Error::config(format!(
                "task needs samples > 0 and image size >= 4, got {samples} and {image_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = kind.classes();
        let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let plane = image_size * image_size;
        let per_image = INPUT_CHANNELS * plane;
        let mut data = Vec::with_capacity(samples * per_image);
        for label in labels.iter_mut() {
            let image = match kind {
                TaskKind::ChannelBias => channel_bias_image(*label, image_size, &mut rng),
                TaskKind::SpatialPattern => quadrant_image(*label, image_size, &mut rng),
                TaskKind::MultiScale => scale_image(*label, image_size, &mut rng),
            };
            if kind == TaskKind::ChannelBias {
                // The label is defined by the realized channel-0 mean.
                let mean: f64 = image[..plane].iter().sum::<f64>() / plane as f64;
                *label = usize::from(mean > 0.0);
            }
            data.extend(image);
        }
        let images = Tensor::new(vec![samples, INPUT_CHANNELS, image_size, image_size], data)?;
        Ok(Self {
            kind,
            seed,
            image_size,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.kind.classes()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let shape = vec![indices.len(), INPUT_CHANNELS, self.image_size, self.image_size];
        Ok((
            Tensor::new(shape, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Count of each label.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn noise(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn channel_bias_image(label: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = noise(INPUT_CHANNELS * s * s, 1.0, rng);
    let offset = if label == 1 { CHANNEL_OFFSET } else { -CHANNEL_OFFSET };
    for v in &mut img[..s * s] {
        *v += offset;
    }
    img
}

/// Adds `amplitude * exp(-r^2 / 2 sigma^2)` around `(cy, cx)` to all channels.
fn plant_blob(img: &mut [f64], s: usize, cy: f64, cx: f64, sigma: f64, amplitude: &[f64]) {
    for (c, &a) in amplitude.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                img[c * s * s + y * s + x] += a * (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

fn channel_amplitudes(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..INPUT_CHANNELS).map(|_| rng.random_range(1.5..2.5)).collect()
}

fn quadrant_image(label: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = noise(INPUT_CHANNELS * s * s, 0.5, rng);
    let half = s as f64 / 2.0;
    let (qy, qx) = ((label / 2) as f64, (label % 2) as f64);
    let cy = qy * half + rng.random_range(0.25 * half..0.75 * half);
    let cx = qx * half + rng.random_range(0.25 * half..0.75 * half);
    let amp = channel_amplitudes(rng);
    plant_blob(&mut img, s, cy, cx, 1.2, &amp);
    img
}

fn scale_image(label: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = noise(INPUT_CHANNELS * s * s, 1.0, rng);
    let sigma = BLOB_SIGMAS[label];
    let margin = (s as f64 / 2.0 - 2.0).max(0.0);
    let centre = s as f64 / 2.0 - 0.5;
    let cy = centre + rng.random_range(-margin..=margin) / 2.0;
    let cx = centre + rng.random_range(-margin..=margin) / 2.0;
    // A wide brightness range keeps peak intensity from identifying the size.
    let gain = rng.random_range(0.5..1.5);
    let amp: Vec<f64> = channel_amplitudes(rng).into_iter().map(|a| a * gain).collect();
    plant_blob(&mut img, s, cy, cx, sigma, &amp);
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bitwise() {
        for kind in TaskKind::ALL {
            let a = SyntheticTask::generate(kind, 60, 16, 5).unwrap();
            let b = SyntheticTask::generate(kind, 60, 16, 5).unwrap();
            assert!(a.images.bitwise_eq(&b.images));
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn labels_are_balanced() {
        for kind in TaskKind::ALL {
            let t = SyntheticTask::generate(kind, 240, 16, 1).unwrap();
            let expected = 240.0 / kind.classes() as f64;
            for count in t.label_histogram() {
                assert!((count as f64 - expected).abs() <= 0.1 * expected, "{kind}: {count}");
            }
        }
    }

    #[test]
    fn channel_bias_label_is_sign_of_mean() {
        let t = SyntheticTask::generate(TaskKind::ChannelBias, 50, 8, 2).unwrap();
        for i in 0..t.len() {
            let (img, label) = t.batch(&[i]).unwrap();
            let mean: f64 = img.data()[..64].iter().sum::<f64>() / 64.0;
            assert_eq!(label[0], usize::from(mean > 0.0));
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in TaskKind::ALL {
            assert_eq!(kind.name().parse::<TaskKind>().unwrap(), kind);
        }
        assert!("imagenet".parse::<TaskKind>().is_err());
    }
}
