//! Checkpoints: a safetensors weight file whose header carries JSON metadata
//! (stage, epoch, config hash, metric snapshot).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Preset;
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "disc_grade";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Roi,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Roi => "roi",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    /// 1-based epoch the weights were captured at.
    pub epoch: usize,
    pub config_hash: String,
    pub preset: Preset,
    /// Undefined metrics are stored as null.
    pub metrics: BTreeMap<String, Option<f64>>,
    /// The producing run configuration, verbatim.
    pub config: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, ps: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let json = serde_json::to_string(meta).map_err(|e| Error::format(path, e.to_string()))?;
    ps.save_safetensors(path, Some(HashMap::from([(META_KEY.to_string(), json)])))
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let header = ParamStore::read_safetensors_metadata(path)?;
    let raw = header
        .get(META_KEY)
        .ok_or_else(|| Error::format(path, "not a disc-grade checkpoint (metadata missing)"))?;
    let meta: CheckpointMeta =
        serde_json::from_str(raw).map_err(|e| Error::format(path, format!("bad checkpoint metadata: {e}")))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!(
                "checkpoint format {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                meta.format_version
            ),
        ));
    }
    Ok(meta)
}

/// Fails with a config error unless the checkpoint came from `expected`.
pub fn require_stage(meta: &CheckpointMeta, expected: Stage, path: &Path) -> Result<()> {
    if meta.stage != expected {
        return Err(Error::Config(format!(
            "stage mismatch: {} is a {} checkpoint, expected {expected}",
            path.display(),
            meta.stage
        )));
    }
    Ok(())
}

/// Reads metadata, checks stage and preset, and loads weights under `prefix`.
pub fn load_checkpoint(
    path: &Path,
    ps: &mut ParamStore,
    expected: Stage,
    preset: Preset,
    prefix: Option<&str>,
) -> Result<CheckpointMeta> {
    let meta = read_checkpoint_meta(path)?;
    require_stage(&meta, expected, path)?;
    if meta.preset != preset {
        return Err(Error::Config(format!(
            "preset mismatch: {} was trained with preset {}, run uses {}",
            path.display(),
            meta.preset.as_str(),
            preset.as_str()
        )));
    }
    ps.load_safetensors(path, prefix)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GradeNet;

    #[test]
    fn round_trip_and_stage_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let net = GradeNet::new(Preset::Tiny, 3);
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            stage: Stage::Finetune,
            epoch: 4,
            config_hash: "abc".into(),
            preset: Preset::Tiny,
            metrics: BTreeMap::from([("val_balanced_accuracy".into(), Some(0.5)), ("s2n".into(), None)]),
            config: serde_json::json!({"epochs": 4}),
        };
        save_checkpoint(&path, &net.ps, &meta).unwrap();
        assert_eq!(read_checkpoint_meta(&path).unwrap(), meta);

        let mut other = GradeNet::new(Preset::Tiny, 9);
        load_checkpoint(&path, &mut other.ps, Stage::Finetune, Preset::Tiny, None).unwrap();
        for ((_, a), (_, b)) in net.ps.iter().zip(other.ps.iter()) {
            assert_eq!(a.value, b.value);
        }
        let err = load_checkpoint(&path, &mut other.ps, Stage::Pretrain, Preset::Tiny, None).unwrap_err();
        assert!(err.to_string().contains("stage mismatch"));
        let err = load_checkpoint(&path, &mut other.ps, Stage::Finetune, Preset::Standard, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
