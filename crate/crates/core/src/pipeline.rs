//! Stage orchestration shared by the command-line tool: evaluation of saved
//! checkpoints, per-command run manifests, and the chained `run-all`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, read_checkpoint_meta, require_stage, Stage};
use crate::config::{sha256_file, stage_dir, RunConfig};
use crate::data_model::{DatasetManifest, DiscKey, SeverityGrade};
use crate::dataset::{image_batch, load_disc_samples, load_roi_data, model_input, DiscSample, SliceCache};
use crate::error::{Error, Result};
use crate::evaluation::{coordinate_rmse, euclidean_rmse, majority_baseline, GradeMetrics};
use crate::imageio::write_png8;
use crate::models::{classify, GradeNet, Preset, RoiRegressor};
use crate::nn::Pass;
use crate::phantom::{generate_phantom_dataset, PhantomConfig};
use crate::preprocess::{extract_roi, PreprocessConfig};
use crate::report::{emit_report, LocalizationMetrics, MetricsReport, Overlay};
use crate::splitting::{audit_leakage, stratified_disc_split, Partition, SplitAssignment, SplitFractions};
use crate::training::{
    finetune_classifier, linear_probe, predict_centers, pretrain_contrastive, train_roi_regressor, ProbeOutcome,
    TrainHistory, TrainOutcome, HISTORY_CSV,
};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Written next to every command's outputs so the run can be reconstructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub config_hash: Option<String>,
    pub config: Option<serde_json::Value>,
    pub parameters: BTreeMap<String, String>,
    /// Input file path → SHA-256.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: None,
            config: None,
            parameters: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, cfg: &RunConfig) -> Self {
        self.config_hash = Some(cfg.hash());
        self.config = Some(serde_json::to_value(cfg).expect("config serializes"));
        self
    }

    pub fn param(mut self, k: &str, v: impl ToString) -> Self {
        self.parameters.insert(k.into(), v.to_string());
        self
    }

    /// Hashes each existing input file; the manifest sidecar is included
    /// automatically for manifest CSVs.
    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        let side = DatasetManifest::sidecar_path(path);
        if path.extension().is_some_and(|e| e == "csv") && side.is_file() {
            self.inputs.insert(side.display().to_string(), sha256_file(&side)?);
        }
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RUN_MANIFEST);
        let json = serde_json::to_string_pretty(self).expect("run manifest serializes");
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Writes every disc's representative ROI as an 8-bit PNG under
/// `<out>/<patient>/<series>/<level>.png` plus an `index.csv`.
pub fn export_rois(manifest: &DatasetManifest, cfg: &PreprocessConfig, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let mut cache = SliceCache::new(manifest);
    let index_path = out.join("index.csv");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_path(&index_path).map_err(|e| Error::format(&index_path, e.to_string()))?;
    let err = |e: csv::Error| Error::format(&index_path, e.to_string());
    w.write_record([
        "patient_id",
        "series_id",
        "level",
        "grade",
        "path",
        "origin_row",
        "origin_col",
    ])
    .map_err(err)?;
    let keys = manifest.disc_keys();
    for key in &keys {
        let ann = manifest.representative(key).expect("key from manifest");
        let slice = cache.get(&key.patient_id, &key.series_id, ann.slice_index)?;
        let roi = extract_roi(slice, ann, cfg)?;
        let rel = PathBuf::from(&key.patient_id)
            .join(&key.series_id)
            .join(format!("{}.png", key.level.as_str().replace('/', "-")));
        let path = out.join(&rel);
        fs::create_dir_all(path.parent().expect("nested path")).map_err(|e| Error::io(&path, e))?;
        let bytes = match &roi.pixels {
            crate::data_model::PatchPixels::Byte(b) => b.clone(),
            crate::data_model::PatchPixels::Float(f) => crate::preprocess::to_uint8(f),
        };
        write_png8(&path, &bytes)?;
        w.write_record([
            key.patient_id.clone(),
            key.series_id.clone(),
            key.level.to_string(),
            ann.grade.to_string(),
            rel.display().to_string(),
            roi.crop_origin.0.to_string(),
            roi.crop_origin.1.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(keys.len())
}

/// Predicted grades in eval mode, one disc per set.
pub fn predict_grades(
    net: &mut GradeNet,
    samples: &[DiscSample],
    cfg: &PreprocessConfig,
    batch: usize,
) -> Result<Vec<SeverityGrade>> {
    let size = net.encoder.input_size();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x = image_batch(
            &chunk
                .iter()
                .map(|s| model_input(&s.patch, cfg, size))
                .collect::<Vec<_>>(),
        );
        let logits = net.logits(&x, &vec![1; chunk.len()], Pass::EVAL)?;
        out.extend((0..chunk.len()).map(|i| classify(logits.row(i))));
    }
    Ok(out)
}

fn stage_config(meta: &crate::checkpoint::CheckpointMeta, path: &Path) -> Result<RunConfig> {
    serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::format(path, format!("checkpoint config does not parse: {e}")))
}

pub fn load_grade_net(ckpt: &Path) -> Result<(GradeNet, RunConfig)> {
    let meta = read_checkpoint_meta(ckpt)?;
    require_stage(&meta, Stage::Finetune, ckpt)?;
    let cfg = stage_config(&meta, ckpt)?;
    let mut net = GradeNet::new(meta.preset, 0);
    load_checkpoint(ckpt, &mut net.ps, Stage::Finetune, meta.preset, None)?;
    Ok((net, cfg))
}

pub fn load_regressor(ckpt: &Path) -> Result<(RoiRegressor, RunConfig)> {
    let meta = read_checkpoint_meta(ckpt)?;
    require_stage(&meta, Stage::Roi, ckpt)?;
    let cfg = stage_config(&meta, ckpt)?;
    let mut reg = RoiRegressor::new(meta.preset, 0);
    load_checkpoint(ckpt, &mut reg.ps, Stage::Roi, meta.preset, None)?;
    Ok((reg, cfg))
}

/// Predicted centers for `keys`, clamped into the source image.
pub fn regress_centers(
    roi_ckpt: &Path,
    manifest: &DatasetManifest,
    keys: &[DiscKey],
) -> Result<(HashMap<DiscKey, (f64, f64)>, LocalizationMetrics)> {
    let (mut reg, cfg) = load_regressor(roi_ckpt)?;
    let data = load_roi_data(manifest, keys, &cfg.preprocess)?;
    let preds = predict_centers(&mut reg, &data, cfg.batch_size)?;
    let targets: Vec<(f64, f64)> = data.samples.iter().map(|s| s.target_px).collect();
    let loc = LocalizationMetrics {
        n: preds.len(),
        coordinate_rmse: coordinate_rmse(&preds, &targets)?,
        euclidean_rmse: euclidean_rmse(&preds, &targets)?,
    };
    let centers = data
        .samples
        .iter()
        .zip(preds)
        .map(|(s, (x, y))| {
            (
                s.key.clone(),
                (x.clamp(0.0, (s.width - 1) as f64), y.clamp(0.0, (s.height - 1) as f64)),
            )
        })
        .collect();
    Ok((centers, loc))
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub partition: Partition,
    pub roi_checkpoint: Option<PathBuf>,
    pub use_predicted_coords: bool,
}

/// Evaluates a fine-tuned checkpoint on one partition. Crops use the
/// annotated centers; with a regressor checkpoint, localization error is
/// reported too, and with `use_predicted_coords` a second classification
/// pass crops at the predicted centers.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    opts: &EvaluateOptions,
) -> Result<(MetricsReport, Option<HashMap<DiscKey, (f64, f64)>>)> {
    let (mut net, cfg) = load_grade_net(ckpt)?;
    if opts.use_predicted_coords && opts.roi_checkpoint.is_none() {
        return Err(Error::Config(
            "--use-predicted-coords needs a regressor checkpoint (--roi-ckpt)".into(),
        ));
    }
    let keys = split.keys_in(opts.partition);
    if keys.is_empty() {
        return Err(Error::Data(format!("partition {} is empty", opts.partition)));
    }
    let mut report = MetricsReport::new(opts.partition.as_str());
    let samples = load_disc_samples(manifest, &keys, &cfg.preprocess, None)?;
    let truth: Vec<SeverityGrade> = samples.iter().map(|s| s.grade).collect();
    let preds = predict_grades(&mut net, &samples, &cfg.preprocess, cfg.batch_size)?;
    report.ground_truth_coords = Some(GradeMetrics::compute(&preds, &truth)?);
    let train_truth: Vec<SeverityGrade> = split
        .keys_in(Partition::Train)
        .iter()
        .filter_map(|k| manifest.representative(k).map(|a| a.grade))
        .collect();
    if !train_truth.is_empty() {
        report.majority_baseline = Some(majority_baseline(&train_truth, &truth)?);
    }
    let mut centers = None;
    if let Some(roi) = &opts.roi_checkpoint {
        let (c, loc) = regress_centers(roi, manifest, &keys)?;
        report.localization = Some(loc);
        if opts.use_predicted_coords {
            let moved = load_disc_samples(manifest, &keys, &cfg.preprocess, Some(&c))?;
            let p = predict_grades(&mut net, &moved, &cfg.preprocess, cfg.batch_size)?;
            report.predicted_coords = Some(GradeMetrics::compute(&p, &truth)?);
        }
        centers = Some(c);
    }
    Ok((report, centers))
}

/// Overlays for the first `n` patients among `keys`.
pub fn overlays_for(
    manifest: &DatasetManifest,
    keys: &[DiscKey],
    preds: &HashMap<DiscKey, (f64, f64)>,
    n: usize,
) -> Result<Vec<Overlay>> {
    let mut by_slice: BTreeMap<(String, String, u32), Vec<_>> = BTreeMap::new();
    for k in keys {
        let (Some(ann), Some(&p)) = (manifest.representative(k), preds.get(k)) else {
            continue;
        };
        by_slice
            .entry((k.patient_id.clone(), k.series_id.clone(), ann.slice_index))
            .or_default()
            .push((k.level, (ann.x, ann.y), p));
    }
    let mut cache = SliceCache::new(manifest);
    let mut out = Vec::new();
    for ((p, s, i), marks) in by_slice.into_iter().take(n) {
        let slice = cache.get(&p, &s, i)?.clone();
        out.push(Overlay {
            name: format!("{p}_{s}_{i:03}"),
            slice,
            marks,
        });
    }
    Ok(out)
}

/// Histories of the stages present under `run_dir`.
pub fn collect_histories(run_dir: &Path) -> Result<Vec<(Stage, TrainHistory)>> {
    let mut out = Vec::new();
    for stage in [Stage::Pretrain, Stage::Finetune, Stage::Roi] {
        let p = stage_dir(run_dir, stage).join(HISTORY_CSV);
        if p.is_file() {
            let mut h = TrainHistory::read_csv(&p)?;
            h.stage = Some(stage);
            out.push((stage, h));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunAllOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub preset: Preset,
    pub phantom: PhantomConfig,
    pub fractions: SplitFractions,
    /// Optional epoch overrides per stage (pretrain, finetune, roi).
    pub epochs: [Option<usize>; 3],
}

impl RunAllOptions {
    /// 200 phantom patients at 256×256 and the tiny networks.
    pub fn tiny(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        RunAllOptions {
            out_dir: out_dir.into(),
            seed,
            preset: Preset::Tiny,
            phantom: PhantomConfig {
                n_patients: 200,
                image_size: 256,
                seed,
                ..Default::default()
            },
            fractions: SplitFractions::new(0.7, 0.15, 0.15),
            epochs: [None; 3],
        }
    }

    pub fn stage_config(&self, stage: Stage) -> RunConfig {
        let mut c = RunConfig::defaults(stage, self.preset);
        c.seed = self.seed;
        let i = match stage {
            Stage::Pretrain => 0,
            Stage::Finetune => 1,
            Stage::Roi => 2,
        };
        if let Some(e) = self.epochs[i] {
            c.epochs = e;
        }
        c
    }
}

pub const DATA_DIR: &str = "data";
pub const SPLIT_CSV: &str = "split.csv";
pub const REPORT_DIR: &str = "report";

/// Everything a `run-all` produced, for callers that inspect more than the
/// metrics file.
#[derive(Debug, Clone)]
pub struct RunAllOutcome {
    pub metrics: MetricsReport,
    pub manifest: DatasetManifest,
    pub split: SplitAssignment,
    pub pretrain: TrainOutcome,
    pub finetune: TrainOutcome,
    pub roi: TrainOutcome,
    pub probe: ProbeOutcome,
}

/// Phantom → split → pretrain → fine-tune → regressor → probe → evaluate on
/// the validation partition → report.
pub fn run_all(opts: &RunAllOptions) -> Result<RunAllOutcome> {
    let out = &opts.out_dir;
    let data = out.join(DATA_DIR);
    log::info!("generating {} phantom patients", opts.phantom.n_patients);
    let manifest = generate_phantom_dataset(&opts.phantom, &data)?;
    let manifest_csv = data.join("manifest.csv");
    RunManifest::new("gen-phantom")
        .param("phantom", serde_json::to_string(&opts.phantom).expect("serializes"))
        .write(&data)?;

    let split = stratified_disc_split(&manifest, opts.fractions, opts.seed)?;
    for w in &split.warnings {
        log::warn!("{w}");
    }
    let split = split.split;
    let audit = audit_leakage(&split, &manifest)?;
    if !audit.is_clean() {
        return Err(Error::Data(format!(
            "split leaks {} disc(s) across partitions",
            audit.violations.len()
        )));
    }
    let split_csv = out.join(SPLIT_CSV);
    split.save(&split_csv)?;

    let inputs = |m: RunManifest| -> Result<RunManifest> { m.input(&manifest_csv)?.input(&split_csv) };

    let pre_cfg = opts.stage_config(Stage::Pretrain);
    let pre_dir = stage_dir(out, Stage::Pretrain);
    let pre = pretrain_contrastive(&pre_cfg, &manifest, &split, &pre_dir)?;
    inputs(RunManifest::new("pretrain").with_config(&pre_cfg))?.write(&pre_dir)?;

    let ft_cfg = opts.stage_config(Stage::Finetune);
    let ft_dir = stage_dir(out, Stage::Finetune);
    let ft = finetune_classifier(&ft_cfg, &manifest, &split, &pre.best_checkpoint, &ft_dir)?;
    inputs(RunManifest::new("finetune").with_config(&ft_cfg))?
        .input(&pre.best_checkpoint)?
        .write(&ft_dir)?;

    let roi_cfg = opts.stage_config(Stage::Roi);
    let roi_dir = stage_dir(out, Stage::Roi);
    let roi = train_roi_regressor(&roi_cfg, &manifest, &split, &roi_dir)?;
    inputs(RunManifest::new("train-roi").with_config(&roi_cfg))?.write(&roi_dir)?;

    let probe = linear_probe(&ft_cfg, &manifest, &split, &pre.best_checkpoint)?;

    let eval_opts = EvaluateOptions {
        partition: Partition::Val,
        roi_checkpoint: Some(roi.best_checkpoint.clone()),
        use_predicted_coords: true,
    };
    let (mut metrics, centers) = evaluate_checkpoint(&ft.best_checkpoint, &manifest, &split, &eval_opts)?;
    metrics.linear_probe = Some(probe.metrics.clone());
    metrics.best_epochs.insert("pretrain".into(), pre.best_epoch);
    metrics.best_epochs.insert("finetune".into(), ft.best_epoch);
    metrics.best_epochs.insert("roi".into(), roi.best_epoch);
    metrics.best_epochs.insert("linear_probe".into(), probe.best_epoch);

    let overlays = overlays_for(
        &manifest,
        &split.keys_in(Partition::Val),
        &centers.unwrap_or_default(),
        3,
    )?;
    let report_dir = out.join(REPORT_DIR);
    emit_report(&collect_histories(out)?, Some(&metrics), &overlays, &report_dir)?;
    inputs(RunManifest::new("report"))?
        .input(&ft.best_checkpoint)?
        .input(&roi.best_checkpoint)?
        .write(&report_dir)?;
    metrics.save(&out.join("metrics.json"))?;
    RunManifest::new("run-all")
        .param("seed", opts.seed)
        .param("preset", opts.preset.as_str())
        .param("options", serde_json::to_string(opts).expect("serializes"))
        .write(out)?;
    Ok(RunAllOutcome {
        metrics,
        manifest,
        split,
        pretrain: pre,
        finetune: ft,
        roi,
        probe,
    })
}
