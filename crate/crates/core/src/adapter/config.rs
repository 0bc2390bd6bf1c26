use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RANK: usize = 128;
pub const DEFAULT_GROUPS: usize = 4;
pub const DEFAULT_KERNELS: [usize; 3] = [3, 5, 7];

/// Module wiring, from the plain design to the fully enhanced one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Dense projections, `PW(sum_k GELU(DW_k(z)))`.
    Minimal,
    /// Grouped projections, same transform as `Minimal`.
    Grouped,
    /// Grouped projections, transform followed by LayerNorm and GELU.
    Enhanced,
    /// `Enhanced` plus at least one of the lightweight tricks.
    Tricks,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Minimal, Variant::Grouped, Variant::Enhanced, Variant::Tricks];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Minimal => "minimal",
            Variant::Grouped => "grouped",
            Variant::Enhanced => "enhanced",
            Variant::Tricks => "tricks",
        }
    }

    /// LayerNorm + GELU after the pointwise mixer.
    pub fn has_post_norm(self) -> bool {
        matches!(self, Variant::Enhanced | Variant::Tricks)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

/// Which reweighting branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    /// `F + Up(L)`: projection branch only.
    Linear,
    /// `F + Up(T)`: transformation branch only.
    Nonlinear,
    /// `F + Up(L * T)`.
    #[default]
    Both,
}

impl Branches {
    pub fn name(self) -> &'static str {
        match self {
            Branches::Linear => "linear",
            Branches::Nonlinear => "nonlinear",
            Branches::Both => "both",
        }
    }

    pub fn has_linear(self) -> bool {
        matches!(self, Branches::Linear | Branches::Both)
    }

    pub fn has_transform(self) -> bool {
        matches!(self, Branches::Nonlinear | Branches::Both)
    }
}

impl FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Branches::Linear),
            "nonlinear" => Ok(Branches::Nonlinear),
            "both" => Ok(Branches::Both),
            other => Err(Error::config(format!("unknown branch set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Tricks {
    /// Pooled path added into the multi-scale sum.
    pub global_pool: bool,
    /// Per-path sigmoid channel gate from the pooled branch input.
    pub gated_attention: bool,
    /// Shuffle after each grouped down-projection.
    pub channel_shuffle: bool,
}

impl Tricks {
    pub const NONE: Tricks = Tricks {
        global_pool: false,
        gated_attention: false,
        channel_shuffle: false,
    };
    pub const ALL: Tricks = Tricks {
        global_pool: true,
        gated_attention: true,
        channel_shuffle: true,
    };

    pub fn any(&self) -> bool {
        self.global_pool || self.gated_attention || self.channel_shuffle
    }
}

/// Hyperparameters of one adapter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MsLoRAConfig {
    /// Channel width `C_in` of the feature map the adapter wraps.
    pub in_channels: usize,
    /// Low-rank width `D`.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Projection groups `G`.
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Depthwise kernel sizes, odd and strictly increasing.
    #[serde(default = "default_kernels")]
    pub kernels: Vec<usize>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// LayerNorm on the adapter input (token-style features).
    #[serde(default)]
    pub pre_norm: bool,
    #[serde(default)]
    pub tricks: Tricks,
    #[serde(default)]
    pub branches: Branches,
}

fn default_rank() -> usize {
    DEFAULT_RANK
}
fn default_groups() -> usize {
    DEFAULT_GROUPS
}
fn default_kernels() -> Vec<usize> {
    DEFAULT_KERNELS.to_vec()
}
fn default_variant() -> Variant {
    Variant::Enhanced
}

impl MsLoRAConfig {
    /// Defaults: `D = 128`, `G = 4`, kernels `[3, 5, 7]`, enhanced wiring.
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            rank: DEFAULT_RANK,
            groups: DEFAULT_GROUPS,
            kernels: default_kernels(),
            variant: Variant::Enhanced,
            pre_norm: false,
            tricks: Tricks::NONE,
            branches: Branches::Both,
        }
    }

    /// Defaults for token inputs: same as [`MsLoRAConfig::new`] with the
    /// input LayerNorm on.
    pub fn for_tokens(in_channels: usize) -> Self {
        Self {
            pre_norm: true,
            ..Self::new(in_channels)
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_kernels(mut self, kernels: &[usize]) -> Self {
        self.kernels = kernels.to_vec();
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_tricks(mut self, tricks: Tricks) -> Self {
        self.tricks = tricks;
        self
    }

    pub fn with_pre_norm(mut self, pre_norm: bool) -> Self {
        self.pre_norm = pre_norm;
        self
    }

    pub fn with_branches(mut self, branches: Branches) -> Self {
        self.branches = branches;
        self
    }

    /// `sum_k k^2`, the depthwise weight multiplier of `D`.
    pub fn depthwise_multiplier(&self) -> usize {
        self.kernels.iter().map(|k| k * k).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.in_channels == 0 || self.rank == 0 || self.groups == 0 {
            return bad(format!(
                "in_channels ({}), rank ({}) and groups ({}) must be positive",
                self.in_channels, self.rank, self.groups
            ));
        }
        if !self.in_channels.is_multiple_of(self.groups) {
            return bad(format!(
                "in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            ));
        }
        if !self.rank.is_multiple_of(self.groups) {
            return bad(format!("rank {} not divisible by groups {}", self.rank, self.groups));
        }
        if self.kernels.is_empty() {
            return bad("kernel set is empty".into());
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return bad(format!("kernel size {k} is not odd"));
        }
        if self.kernels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("kernel sizes {:?} must be strictly increasing", self.kernels));
        }
        if self.variant == Variant::Minimal && self.groups != 1 {
            return bad(format!(
                "the minimal variant uses dense projections; groups must be 1, got {}",
                self.groups
            ));
        }
        match (self.variant, self.tricks.any()) {
            (Variant::Tricks, false) => bad("the tricks variant needs at least one trick enabled".into()),
            (v, true) if v != Variant::Tricks => {
                bad(format!("tricks are only available in the tricks variant, not `{v}`"))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = MsLoRAConfig::new(768);
        assert_eq!((c.rank, c.groups), (128, 4));
        assert_eq!(c.kernels, vec![3, 5, 7]);
        assert_eq!(c.depthwise_multiplier(), 83);
        assert!(!c.pre_norm);
        assert!(MsLoRAConfig::for_tokens(768).pre_norm);
        c.validate().unwrap();
    }

    #[test]
    fn validation_errors() {
        let base = MsLoRAConfig::new(16).with_rank(8);
        assert!(base.clone().with_groups(3).validate().is_err());
        assert!(MsLoRAConfig::new(16).with_rank(6).with_groups(4).validate().is_err());
        assert!(base.clone().with_kernels(&[3, 4]).validate().is_err());
        assert!(base.clone().with_kernels(&[5, 3]).validate().is_err());
        assert!(base.clone().with_kernels(&[3, 3]).validate().is_err());
        assert!(base.clone().with_kernels(&[]).validate().is_err());
        assert!(base.clone().with_variant(Variant::Minimal).validate().is_err());
        base.clone()
            .with_variant(Variant::Minimal)
            .with_groups(1)
            .validate()
            .unwrap();
        assert!(base.clone().with_variant(Variant::Tricks).validate().is_err());
        assert!(base.clone().with_tricks(Tricks::ALL).validate().is_err());
        base.clone()
            .with_variant(Variant::Tricks)
            .with_tricks(Tricks::ALL)
            .validate()
            .unwrap();
    }

    #[test]
    fn json_defaults_fill_in() {
        let c: MsLoRAConfig = serde_json::from_str(r#"{"in_channels": 64}"#).unwrap();
        assert_eq!(c, MsLoRAConfig::new(64));
        let c: MsLoRAConfig = serde_json::from_str(
            r#"{"in_channels": 16, "rank": 8, "variant": "tricks", "tricks": {"gated_attention": true}}"#,
        )
        .unwrap();
        assert!(c.tricks.gated_attention && !c.tricks.global_pool);
        c.validate().unwrap();
    }
}
