//! Whole-backbone parameter budgets from an insertion schedule.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{MsLoRAConfig, ParamBreakdown};
use crate::error::{Error, Result};

/// One stage of a backbone: `count` adapters at channel width `width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub width: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    /// Parameter count of the backbone itself, for percentages.
    pub backbone_params: u64,
    pub stages: Vec<Stage>,
}

const BUILTIN: [(&str, &str); 4] = [
    ("resnet50", include_str!("../fixtures/resnet50.json")),
    ("resnet101", include_str!("../fixtures/resnet101.json")),
    ("swin_b", include_str!("../fixtures/swin_b.json")),
    ("swin_l", include_str!("../fixtures/swin_l.json")),
];

impl BackboneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: BackboneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec file. A path that does not exist but names one of the
    /// shipped specs (`resnet50`, `resnet101`, `swin_b`, `swin_l`, with or
    /// without `.json`) resolves to the bundled copy.
    pub fn load(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => Self::from_json(&text).map_err(|e| match e {
                Error::Json(j) => Error::Format(format!("{}: {j}", path.display())),
                other => other,
            }),
            Err(e) => {
                let is_bare = path.parent().is_none_or(|p| p.as_os_str().is_empty());
                let stem = path.file_stem().and_then(|s| s.to_str());
                match (is_bare, stem.and_then(Self::builtin)) {
                    (true, Some(spec)) => Ok(spec),
                    _ => Err(Error::io(path, e)),
                }
            }
        }
    }

    /// A bundled spec by name.
    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text).expect("bundled spec is valid"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Format(format!("spec `{}`: field `stages` is empty", self.name)));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.width == 0 || s.count == 0 {
                return Err(Error::Format(format!(
                    "spec `{}`: stages[{i}] needs positive `width` and `count`, got {} and {}",
                    self.name, s.width, s.count
                )));
            }
        }
        Ok(())
    }

    /// Total number of insertion points.
    pub fn insertion_points(&self) -> usize {
        self.stages.iter().map(|s| s.count).sum()
    }
}

/// Weight-only count of one adapter at width `c_in`, following
/// `3 C_in D / G + D^2 + D sum_k k^2`.
pub fn adapter_weights(c_in: usize, config: &MsLoRAConfig) -> (u64, u64) {
    let (c, d, g) = (c_in as u64, config.rank as u64, config.groups as u64);
    let proj = 3 * c * d / g;
    let trans = d * config.depthwise_multiplier() as u64 + d * d;
    (proj, trans)
}

/// Sums the per-adapter counts over every insertion point of `spec`.
/// Extras are not part of the formula and stay zero.
pub fn budget(spec: &BackboneSpec, config: &MsLoRAConfig) -> Result<ParamBreakdown> {
    spec.validate()?;
    let mut total = ParamBreakdown::default();
    for (index, stage) in spec.stages.iter().enumerate() {
        let reason = if config.groups == 0 {
            Some("groups must be positive".to_string())
        } else if stage.width % config.groups != 0 {
            Some(format!("not divisible by groups {}", config.groups))
        } else if !config.rank.is_multiple_of(config.groups) {
            Some(format!(
                "rank {} not divisible by groups {}",
                config.rank, config.groups
            ))
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(Error::Accounting {
                index,
                width: stage.width,
                reason,
            });
        }
        let (proj, trans) = adapter_weights(stage.width, config);
        let n = stage.count as u64;
        total = total.combine(&ParamBreakdown::new(proj * n, trans * n, 0));
    }
    total.percent = percent_of_backbone(&total, spec).ok();
    Ok(total)
}

/// `100 * total / backbone_params`.
pub fn percent_of_backbone(breakdown: &ParamBreakdown, spec: &BackboneSpec) -> Result<f64> {
    if spec.backbone_params == 0 {
        return Err(Error::Format(format!(
            "spec `{}`: field `backbone_params` is zero",
            spec.name
        )));
    }
    Ok(100.0 * breakdown.total as f64 / spec.backbone_params as f64)
}

/// Truncates a count to 0.1M steps, returned in millions.
pub fn display_millions(count: u64) -> f64 {
    (count / 100_000) as f64 / 10.0
}

/// One row of the group-size table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub groups: usize,
    pub breakdown: ParamBreakdown,
    /// `proj` truncated to 0.1M, in millions.
    pub proj_display: f64,
    /// `trans` truncated to 0.1M, in millions.
    pub trans_display: f64,
    /// Quotient of the two display values.
    pub display_ratio: Option<f64>,
}

/// One row per group size; a group size that does not divide some width
/// yields an error for that row only.
pub fn table1(spec: &BackboneSpec, config: &MsLoRAConfig, groups: &[usize]) -> Vec<Result<Table1Row>> {
    groups
        .iter()
        .map(|&g| {
            let cfg = config.clone().with_groups(g);
            let b = budget(spec, &cfg)?;
            let (proj_display, trans_display) = (display_millions(b.proj), display_millions(b.trans));
            Ok(Table1Row {
                groups: g,
                breakdown: b,
                proj_display,
                trans_display,
                display_ratio: (trans_display > 0.0).then(|| proj_display / trans_display),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init, param_count};

    fn cfg(g: usize) -> MsLoRAConfig {
        MsLoRAConfig::new(1).with_rank(128).with_groups(g)
    }

    #[test]
    fn swin_l_dense() {
        let spec = BackboneSpec::builtin("swin_l").unwrap();
        let b = budget(&spec, &cfg(1)).unwrap();
        // Independent summation over the schedule.
        let widths = 2 * 192 + 2 * 384 + 18 * 768 + 2 * 1536;
        assert_eq!(b.proj, 3 * 128 * widths);
        assert_eq!(b.proj, 6_930_432);
        assert_eq!(b.trans, 24 * (83 * 128 + 128 * 128));
        assert_eq!(b.trans, 648_192);
        assert_eq!(display_millions(b.proj), 6.9);
        assert_eq!(display_millions(b.trans), 0.6);
    }

    #[test]
    fn resnet50_dense() {
        let spec = BackboneSpec::builtin("resnet50").unwrap();
        let b = budget(&spec, &cfg(1)).unwrap();
        assert_eq!(b.proj, 1_449_984);
        assert_eq!(b.trans, 16 * 27_008);
        assert_eq!(display_millions(b.proj), 1.4);
        assert_eq!(display_millions(b.trans), 0.4);
    }

    #[test]
    fn group_scaling_is_exact() {
        let spec = BackboneSpec::builtin("swin_l").unwrap();
        let base = budget(&spec, &cfg(1)).unwrap();
        for g in [2, 4, 8, 16] {
            let b = budget(&spec, &cfg(g)).unwrap();
            assert_eq!(b.proj * g as u64, base.proj);
            assert_eq!(b.trans, base.trans);
        }
    }

    #[test]
    fn table_rows() {
        let spec = BackboneSpec::builtin("swin_l").unwrap();
        let rows = table1(&spec, &cfg(1), &[4]);
        let row = rows[0].as_ref().unwrap();
        assert_eq!(row.proj_display, 1.7);
        assert!((row.display_ratio.unwrap() - 2.8).abs() < 0.05);
        let spec = BackboneSpec::builtin("resnet50").unwrap();
        let row = table1(&spec, &cfg(1), &[2]).remove(0).unwrap();
        assert_eq!(row.proj_display, 0.7);
        assert!((row.display_ratio.unwrap() - 1.75).abs() < 1e-12);
    }

    #[test]
    fn indivisible_width_names_insertion_point() {
        let spec = BackboneSpec {
            name: "odd".into(),
            backbone_params: 1,
            stages: vec![Stage { width: 64, count: 1 }, Stage { width: 12, count: 2 }],
        };
        match budget(&spec, &cfg(8)) {
            Err(Error::Accounting { index, width, .. }) => assert_eq!((index, width), (1, 12)),
            other => panic!("unexpected {other:?}"),
        }
        let rows = table1(&spec, &cfg(1), &[4, 8]);
        assert!(rows[0].is_ok() && rows[1].is_err());
    }

    #[test]
    fn percent_cases() {
        let spec = BackboneSpec::builtin("swin_b").unwrap();
        assert_eq!(percent_of_backbone(&ParamBreakdown::default(), &spec).unwrap(), 0.0);
        let all = ParamBreakdown::new(spec.backbone_params, 0, 0);
        assert_eq!(percent_of_backbone(&all, &spec).unwrap(), 100.0);
        let b = budget(&spec, &cfg(4)).unwrap();
        assert_eq!(b.total, 1_803_264);
        assert!((b.percent.unwrap() - 2.0).abs() <= 0.3);
        let zero = BackboneSpec {
            backbone_params: 0,
            ..spec
        };
        assert!(percent_of_backbone(&b, &zero).is_err());
    }

    #[test]
    fn formula_matches_constructed_adapter() {
        let spec = BackboneSpec::builtin("resnet50").unwrap();
        for stage in &spec.stages {
            let c = MsLoRAConfig::new(stage.width).with_rank(16).with_groups(4);
            let built = param_count(&init(&c, 0).unwrap());
            let (proj, trans) = adapter_weights(stage.width, &c);
            assert_eq!((built.proj, built.trans), (proj, trans));
        }
    }

    #[test]
    fn loading() {
        assert!(BackboneSpec::load(Path::new("swin_l.json")).is_ok());
        assert!(BackboneSpec::load(Path::new("resnet50")).is_ok());
        let err = BackboneSpec::load(Path::new("/nonexistent/x.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.json"));
        let err = BackboneSpec::from_json(r#"{"name": "x", "stages": []}"#).unwrap_err();
        assert!(err.to_string().contains("backbone_params"));
    }
}
