//! Run configuration for the training stages, with stage-specific defaults,
//! JSON/TOML file loading, and a stable content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::checkpoint::Stage;
use crate::error::{Error, Result};
use crate::losses::FocalParams;
use crate::models::{first_trainable_stage, BackboneArch, Preset};
use crate::nn::OptimizerKind;
use crate::preprocess::PreprocessConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SchedulerConfig {
    /// Cosine decay over the whole run.
    Cosine,
    /// Reduce on plateau of the stage's validation metric.
    Plateau {
        patience: usize,
        factor: f64,
        min_delta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub preset: Preset,
    pub seed: u64,
    pub epochs: usize,
    /// Discs per batch.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Base rate; for fine-tuning, the rate of trainable backbone stages.
    pub lr: f64,
    /// Fine-tuning only: rate of the classification head.
    pub head_lr: Option<f64>,
    pub weight_decay: f64,
    pub scheduler: SchedulerConfig,
    /// `None` disables gradient clipping.
    pub clip_max_norm: Option<f64>,
    /// Pretraining: augmented views per disc.
    pub views: usize,
    pub temperature: f64,
    pub focal: FocalParams,
    /// Fine-tuning: backbone stages kept frozen.
    pub frozen_stages: Vec<String>,
    pub smooth_l1_beta: f64,
    pub augment: AugmentPolicy,
    pub preprocess: PreprocessConfig,
}

impl RunConfig {
    pub fn defaults(stage: Stage, preset: Preset) -> Self {
        let preprocess = PreprocessConfig {
            model_input_size: BackboneArch::encoder(preset).input_size,
            regression_input_size: BackboneArch::regressor(preset).input_size,
            ..Default::default()
        };
        let base = RunConfig {
            stage,
            preset,
            seed: 0,
            epochs: 60,
            batch_size: 32,
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            head_lr: None,
            weight_decay: 1e-4,
            scheduler: SchedulerConfig::Cosine,
            clip_max_norm: Some(1.0),
            views: 3,
            temperature: 0.1,
            focal: FocalParams::default(),
            frozen_stages: Vec::new(),
            smooth_l1_beta: 1.0,
            augment: AugmentPolicy::default(),
            preprocess,
        };
        match stage {
            Stage::Pretrain => base,
            // The tiny backbone's last stage barely moves at the standard
            // rates; both are scaled by 4, keeping the 10x head ratio.
            Stage::Finetune => RunConfig {
                epochs: 40,
                batch_size: 24,
                lr: if preset == Preset::Tiny { 2e-4 } else { 5e-5 },
                head_lr: Some(if preset == Preset::Tiny { 2e-3 } else { 5e-4 }),
                scheduler: SchedulerConfig::Plateau {
                    patience: 4,
                    factor: 0.5,
                    min_delta: 1e-4,
                },
                frozen_stages: ["stem", "layer1", "layer2", "layer3"].map(String::from).to_vec(),
                augment: AugmentPolicy::disabled(),
                ..base
            },
            // The small regressor converges too slowly at the standard rate
            // to be useful within its shorter budget.
            Stage::Roi => RunConfig {
                epochs: if preset == Preset::Tiny { 20 } else { 40 },
                batch_size: 32,
                lr: if preset == Preset::Tiny { 3e-4 } else { 1e-4 },
                weight_decay: 0.01,
                scheduler: SchedulerConfig::Plateau {
                    patience: 3,
                    factor: 0.1,
                    min_delta: 1e-4,
                },
                augment: AugmentPolicy::disabled(),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return fail(format!(
                "invalid learning rate {} or weight decay {}",
                self.lr, self.weight_decay
            ));
        }
        if let Some(c) = self.clip_max_norm {
            if !(c > 0.0) {
                return fail(format!("clip_max_norm must be positive, got {c}"));
            }
        }
        if let SchedulerConfig::Plateau { factor, min_delta, .. } = self.scheduler {
            if !(factor > 0.0 && factor < 1.0) || !(min_delta >= 0.0) {
                return fail(format!("invalid plateau scheduler {:?}", self.scheduler));
            }
        }
        self.augment.validate()?;
        self.preprocess.validate()?;
        match self.stage {
            Stage::Pretrain => {
                if self.views < 2 {
                    return fail(format!("views must be at least 2, got {}", self.views));
                }
                if !(self.temperature > 0.0) {
                    return fail(format!("temperature must be positive, got {}", self.temperature));
                }
            }
            Stage::Finetune => {
                match self.head_lr {
                    Some(h) if h > 0.0 && h.is_finite() => {}
                    other => return fail(format!("fine-tuning needs a positive head_lr, got {other:?}")),
                }
                self.focal.validate()?;
                first_trainable_stage(&self.frozen_stages)?;
            }
            Stage::Roi => {
                if !(self.smooth_l1_beta > 0.0) {
                    return fail(format!("smooth_l1_beta must be positive, got {}", self.smooth_l1_beta));
                }
            }
        }
        let enc = BackboneArch::encoder(self.preset).input_size;
        if matches!(self.stage, Stage::Pretrain | Stage::Finetune) && self.preprocess.model_input_size != enc {
            return fail(format!(
                "preset {} expects model_input_size {enc}, config has {}",
                self.preset.as_str(),
                self.preprocess.model_input_size
            ));
        }
        let reg = BackboneArch::regressor(self.preset).input_size;
        if self.stage == Stage::Roi && self.preprocess.regression_input_size != reg {
            return fail(format!(
                "preset {} expects regression_input_size {reg}, config has {}",
                self.preset.as_str(),
                self.preprocess.regression_input_size
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Defaults for `stage` with the file's values layered on top. The
    /// file's preset (if any) selects the defaults.
    pub fn from_file(path: &Path, stage: Stage) -> Result<Self> {
        let overlay = read_config_value(path)?;
        Self::from_overlay(stage, None, &overlay, &path.display().to_string())
    }

    /// Defaults for `(stage, preset)` overlaid by `overlay`.
    pub fn from_overlay(stage: Stage, preset: Option<Preset>, overlay: &Value, origin: &str) -> Result<Self> {
        if let Some(s) = overlay.get("stage") {
            let s: Stage =
                serde_json::from_value(s.clone()).map_err(|e| Error::Config(format!("{origin}: bad stage: {e}")))?;
            if s != stage {
                return Err(Error::Config(format!(
                    "{origin} configures stage {s}, command runs {stage}"
                )));
            }
        }
        let explicit = preset;
        let preset = match (preset, overlay.get("preset")) {
            (Some(p), _) => p,
            (None, Some(p)) => {
                serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("{origin}: bad preset: {e}")))?
            }
            (None, None) => Preset::default(),
        };
        let mut value = serde_json::to_value(Self::defaults(stage, preset)).expect("config serializes");
        merge(&mut value, overlay);
        if let Some(p) = explicit {
            value["preset"] = serde_json::to_value(p).expect("preset serializes");
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Parses a JSON or TOML (by extension) file into a JSON value. A missing or
/// unreadable file is a configuration error naming the path.
pub fn read_config_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let v: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Recursive object merge; non-object values in `overlay` replace `base`, as
/// do tagged objects whose `kind` differs.
pub fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) if o.get("kind").is_none_or(|k| b.get("kind") == Some(k)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Conventional location of the stage's outputs under a run directory.
pub fn stage_dir(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(stage.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn stage_defaults() {
        let f = RunConfig::defaults(Stage::Finetune, Preset::Standard);
        assert_eq!((f.epochs, f.batch_size, f.lr, f.head_lr), (40, 24, 5e-5, Some(5e-4)));
        assert_eq!(f.focal.alpha, [0.8, 4.0, 5.0]);
        let r = RunConfig::defaults(Stage::Roi, Preset::Standard);
        assert_eq!((r.lr, r.weight_decay, r.batch_size), (1e-4, 0.01, 32));
        let p = RunConfig::defaults(Stage::Pretrain, Preset::Tiny);
        assert_eq!(
            (p.epochs, p.views, p.temperature, p.preprocess.model_input_size),
            (60, 3, 0.1, 64)
        );
        for c in [f, r, p] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn overlay_precedence_and_validation() {
        let cfg = RunConfig::from_overlay(Stage::Roi, None, &json!({"epochs": 5, "preset": "tiny"}), "t").unwrap();
        assert_eq!((cfg.epochs, cfg.preset, cfg.lr), (5, Preset::Tiny, 3e-4));
        let cfg = RunConfig::from_overlay(Stage::Roi, Some(Preset::Standard), &json!({"preset": "tiny"}), "t").unwrap();
        assert_eq!(cfg.preset, Preset::Standard);
        assert!(RunConfig::from_overlay(Stage::Roi, None, &json!({"epochs": 0}), "t").is_err());
        assert!(RunConfig::from_overlay(Stage::Roi, None, &json!({"stage": "pretrain"}), "t").is_err());
        assert!(RunConfig::from_overlay(Stage::Roi, None, &json!({"bogus": 1}), "t").is_err());
    }

    #[test]
    fn toml_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "epochs = 3\npreset = \"tiny\"\n[scheduler]\nkind = \"cosine\"\n").unwrap();
        let cfg = RunConfig::from_file(&p, Stage::Finetune).unwrap();
        assert_eq!((cfg.epochs, cfg.scheduler.clone()), (3, SchedulerConfig::Cosine));
        let missing = dir.path().join("nope.json");
        let err = RunConfig::from_file(&missing, Stage::Finetune).unwrap_err();
        assert!(err.to_string().contains("nope.json"));
        assert!(err.is_validation());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::defaults(Stage::Pretrain, Preset::Tiny);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
