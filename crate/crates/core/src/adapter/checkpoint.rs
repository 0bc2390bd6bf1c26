//! Adapter checkpoints: `manifest.json` plus one `.mslt` file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::config::MsLoRAConfig;
use crate::adapter::params::{init, AdapterParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: MsLoRAConfig,
    /// Parameter paths; each is stored as `<path>.mslt`.
    pub tensors: Vec<String>,
}

/// Writes `params` under `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, config: &MsLoRAConfig, seed: u64, params: &AdapterParams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named = params.named_tensors();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        seed,
        config: config.clone(),
        tensors: named.iter().map(|(n, _)| n.clone()).collect(),
    };
    for (name, t) in &named {
        t.save(dir.join(format!("{name}.mslt")))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, AdapterParams)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let skeleton = init(&manifest.config, manifest.seed)?;
    let named = manifest
        .tensors
        .iter()
        .map(|name| Ok((name.clone(), Tensor::load(dir.join(format!("{name}.mslt")))?)))
        .collect::<Result<Vec<_>>>()?;
    let params = skeleton.replace_from(&named)?;
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MsLoRAConfig::new(16).with_rank(8).with_pre_norm(true);
        let mut p = init(&cfg, 4).unwrap();
        p.perturb(&mut ChaCha8Rng::seed_from_u64(1), 0.2);
        save_checkpoint(dir.path(), &cfg, 4, &p).unwrap();
        assert!(dir.path().join("down_proj_linear.weight.mslt").exists());
        let (m, q) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.config, cfg);
        assert_eq!(m.seed, 4);
        for ((n1, a), (n2, b)) in p.named_tensors().iter().zip(q.named_tensors().iter()) {
            assert_eq!(n1, n2);
            assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MsLoRAConfig::new(8).with_rank(4);
        save_checkpoint(dir.path(), &cfg, 0, &init(&cfg, 0).unwrap()).unwrap();
        std::fs::remove_file(dir.path().join("up_proj.weight.mslt")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
