//! The three training loops (contrastive pretraining, grade fine-tuning,
//! coordinate regression), the linear probe, and checkpoint selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_view, make_contrastive_views};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Stage, CHECKPOINT_FORMAT_VERSION};
use crate::config::{RunConfig, SchedulerConfig};
use crate::data_model::{DatasetManifest, DiscKey, SeverityGrade};
use crate::dataset::{image_batch, load_disc_samples, load_roi_data, model_input, DiscSample, RoiData};
use crate::error::{Error, Result};
use crate::evaluation::{coordinate_rmse, euclidean_rmse, GradeMetrics};
use crate::losses::{
    multi_positive_ntxent_with_grad, smooth_l1_with_grad, weighted_focal_loss_with_grad, EmbeddingBatch,
};
use crate::models::{
    build_finetune_param_groups, classify, first_trainable_stage, pool_batch, pool_batch_backward, ContrastiveNet,
    GradeNet, RoiRegressor, FEATURE_DIM,
};
use crate::nn::{clip_grad_norm, Linear, Optimizer, ParamGroup, ParamId, ParamStore, Pass, Tensor};
use crate::rng::{derive_index, derive_seed, rng_from, stream};
use crate::schedule::{cosine_lr, plateau_step, PlateauConfig, PlateauMode, PlateauState};
use crate::splitting::{Partition, SplitAssignment};

/// One completed epoch. Fields a stage does not produce are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Rate of the first parameter group during the epoch.
    pub lr: f64,
    pub head_lr: Option<f64>,
    pub val_balanced_accuracy: Option<f64>,
    pub val_recall_normal: Option<f64>,
    pub val_recall_moderate: Option<f64>,
    pub val_recall_severe: Option<f64>,
    pub val_severe_to_normal: Option<f64>,
    pub val_rmse: Option<f64>,
    /// Mean pre-clipping gradient norm over the epoch's steps.
    pub grad_norm: f64,
}

impl EpochRecord {
    fn new(epoch: usize, train_loss: f64, lr: f64, grad_norm: f64) -> Self {
        EpochRecord {
            epoch,
            train_loss,
            val_loss: None,
            lr,
            head_lr: None,
            val_balanced_accuracy: None,
            val_recall_normal: None,
            val_recall_moderate: None,
            val_recall_severe: None,
            val_severe_to_normal: None,
            val_rmse: None,
            grad_norm,
        }
    }

    pub fn recall(&self) -> [Option<f64>; 3] {
        [self.val_recall_normal, self.val_recall_moderate, self.val_recall_severe]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub stage: Option<Stage>,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn new(stage: Stage) -> Self {
        TrainHistory {
            stage: Some(stage),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: EpochRecord) {
        debug_assert_eq!(r.epoch, self.records.len() + 1, "epochs are recorded in order");
        self.records.push(r);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let records = rd
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(TrainHistory { stage: None, records })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    ValBalancedAccuracyMax,
    ValLossMin,
    ValRmseMin,
}

impl Criterion {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Criterion::ValLossMin,
            Stage::Finetune => Criterion::ValBalancedAccuracyMax,
            Stage::Roi => Criterion::ValRmseMin,
        }
    }

    fn value(self, r: &EpochRecord) -> Option<f64> {
        match self {
            Criterion::ValBalancedAccuracyMax => r.val_balanced_accuracy,
            // Without a validation partition, fall back to the training loss.
            Criterion::ValLossMin => r.val_loss.or(Some(r.train_loss)),
            Criterion::ValRmseMin => r.val_rmse,
        }
        .filter(|v| v.is_finite())
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Criterion::ValBalancedAccuracyMax => a > b,
            _ => a < b,
        }
    }
}

/// Epoch (1-based) with the best criterion value; ties resolve to the
/// earlier epoch. Epochs without a finite value are skipped.
pub fn select_best_checkpoint(history: &TrainHistory, criterion: Criterion) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in &history.records {
        if let Some(v) = criterion.value(r) {
            if best.is_none_or(|(_, b)| criterion.better(v, b)) {
                best = Some((r.epoch, v));
            }
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| Error::Data("history has no epoch with a usable metric".into()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub config_hash: String,
    /// Parameter groups as held by the optimizer after the final step:
    /// (name, learning rate, parameter count).
    pub optimizer_groups: Vec<(String, f64, usize)>,
}

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const HISTORY_CSV: &str = "history.csv";

fn optimizer_summary(opt: &Optimizer) -> Vec<(String, f64, usize)> {
    opt.groups
        .iter()
        .map(|g| (g.name.clone(), g.lr, g.params.len()))
        .collect()
}

fn prepare_out(out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("config.json");
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn meta_for(cfg: &RunConfig, epoch: usize, r: &EpochRecord) -> CheckpointMeta {
    let mut metrics = BTreeMap::new();
    metrics.insert("train_loss".into(), Some(r.train_loss));
    metrics.insert("val_loss".into(), r.val_loss);
    metrics.insert("lr".into(), Some(r.lr));
    if cfg.stage == Stage::Finetune {
        metrics.insert("val_balanced_accuracy".into(), r.val_balanced_accuracy);
        metrics.insert("val_severe_to_normal".into(), r.val_severe_to_normal);
    }
    if cfg.stage == Stage::Roi {
        metrics.insert("val_rmse".into(), r.val_rmse);
    }
    CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        stage: cfg.stage,
        epoch,
        config_hash: cfg.hash(),
        preset: cfg.preset,
        metrics,
        config: serde_json::to_value(cfg).expect("config serializes"),
    }
}

/// Saves `best` when the latest epoch is the best so far, and `last` on the
/// final epoch. Returns the best epoch so far.
fn checkpoint_epoch(
    cfg: &RunConfig,
    history: &TrainHistory,
    ps: &ParamStore,
    out_dir: &Path,
    best_so_far: &mut Option<usize>,
) -> Result<()> {
    let crit = Criterion::for_stage(cfg.stage);
    let r = history.records.last().expect("epoch recorded");
    let best = select_best_checkpoint(history, crit).ok();
    if best == Some(r.epoch) && *best_so_far != best {
        save_checkpoint(&out_dir.join(BEST_CHECKPOINT), ps, &meta_for(cfg, r.epoch, r))?;
        *best_so_far = best;
    }
    if r.epoch == cfg.epochs {
        save_checkpoint(&out_dir.join(LAST_CHECKPOINT), ps, &meta_for(cfg, r.epoch, r))?;
        if best_so_far.is_none() {
            // No usable validation metric at all: the last epoch is the best.
            save_checkpoint(&out_dir.join(BEST_CHECKPOINT), ps, &meta_for(cfg, r.epoch, r))?;
            *best_so_far = Some(r.epoch);
        }
    }
    Ok(())
}

fn finish(
    cfg: &RunConfig,
    history: TrainHistory,
    out_dir: &Path,
    best: Option<usize>,
    opt: &Optimizer,
) -> Result<TrainOutcome> {
    history.write_csv(&out_dir.join(HISTORY_CSV))?;
    Ok(TrainOutcome {
        best_epoch: best.expect("best checkpoint written"),
        history,
        best_checkpoint: out_dir.join(BEST_CHECKPOINT),
        last_checkpoint: out_dir.join(LAST_CHECKPOINT),
        config_hash: cfg.hash(),
        optimizer_groups: optimizer_summary(opt),
    })
}

fn partition_keys(split: &SplitAssignment, p: Partition, stage: Stage) -> Result<Vec<DiscKey>> {
    let keys = split.keys_in(p);
    if keys.is_empty() && p == Partition::Train {
        return Err(Error::Config(format!("{stage}: the train partition is empty")));
    }
    Ok(keys)
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> crate::rng::PipelineRng {
    rng_from(derive_index(derive_seed(seed, &format!("{stage}/epoch")), epoch as u64))
}

fn to_f64(t: &Tensor) -> Array2<f64> {
    let (n, d) = t.dims2();
    Array2::from_shape_fn((n, d), |(i, j)| t.data[i * d + j] as f64)
}

fn to_tensor(a: &Array2<f64>) -> Tensor {
    let (n, d) = a.dim();
    Tensor::from_vec(&[n, d], a.iter().map(|&v| v as f32).collect())
}

fn clip(ps: &mut ParamStore, params: &[ParamId], max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(m) => clip_grad_norm(ps, params, m),
        None => crate::nn::grad_norm(ps, params),
    }
}

fn plateau_cfg(cfg: &RunConfig, mode: PlateauMode) -> Option<PlateauConfig> {
    match cfg.scheduler {
        SchedulerConfig::Cosine => None,
        SchedulerConfig::Plateau {
            patience,
            factor,
            min_delta,
        } => Some(PlateauConfig {
            mode,
            patience,
            factor,
            min_delta,
        }),
    }
}

/// Per-epoch multiplier on the base rates: the cosine closed form, or the
/// current plateau scale.
fn lr_scale(cfg: &RunConfig, epoch: usize, plateau: &PlateauState) -> f64 {
    match cfg.scheduler {
        SchedulerConfig::Cosine => cosine_lr(1.0, epoch, cfg.epochs),
        SchedulerConfig::Plateau { .. } => plateau.scale,
    }
}

fn group_lrs(bases: &[f64], cfg: &RunConfig, epoch: usize, plateau: &PlateauState) -> Vec<f64> {
    match cfg.scheduler {
        // Evaluated per base so each rate equals the closed form directly.
        SchedulerConfig::Cosine => bases.iter().map(|&b| cosine_lr(b, epoch, cfg.epochs)).collect(),
        SchedulerConfig::Plateau { .. } => bases.iter().map(|&b| b * lr_scale(cfg, epoch, plateau)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Contrastive pretraining

fn contrastive_views(
    samples: &[DiscSample],
    idx: &[usize],
    cfg: &RunConfig,
    size: usize,
    rng: &mut crate::rng::PipelineRng,
) -> Result<(Tensor, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(idx.len() * cfg.views);
    let mut groups = Vec::with_capacity(idx.len() * cfg.views);
    for (g, &i) in idx.iter().enumerate() {
        let (views, gid) = make_contrastive_views(&samples[i].patch, cfg.views, &cfg.augment, g, rng)?;
        for v in views {
            inputs.push(model_input(&v, &cfg.preprocess, size));
            groups.push(gid);
        }
    }
    Ok((image_batch(&inputs), groups))
}

fn contrastive_val_loss(net: &mut ContrastiveNet, val: &[DiscSample], cfg: &RunConfig) -> Result<Option<f64>> {
    if val.len() < 2 {
        return Ok(None);
    }
    // Validation views come from a fixed stream so epochs are comparable.
    let mut rng = stream(cfg.seed, "pretrain/val-views");
    let size = net.encoder.input_size();
    let order: Vec<usize> = (0..val.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let (x, groups) = contrastive_views(val, chunk, cfg, size, &mut rng)?;
        let z = net.encode(&x, Pass::EVAL)?;
        let h = net.projection.forward(&mut net.ps, &z, Pass::EVAL);
        let (loss, _) = multi_positive_ntxent_with_grad(&EmbeddingBatch::new(to_f64(&h), groups, cfg.temperature)?)?;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((count > 0).then(|| total / count as f64))
}

pub fn pretrain_contrastive(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    expect_stage(cfg, Stage::Pretrain)?;
    let train_keys = partition_keys(split, Partition::Train, cfg.stage)?;
    let val_keys = partition_keys(split, Partition::Val, cfg.stage)?;
    let train = load_disc_samples(manifest, &train_keys, &cfg.preprocess, None)?;
    let val = load_disc_samples(manifest, &val_keys, &cfg.preprocess, None)?;
    prepare_out(out_dir, cfg)?;

    let mut net = ContrastiveNet::new(cfg.preset, derive_seed(cfg.seed, "pretrain"));
    let size = net.encoder.input_size();
    let params = net.ps.weights_with_prefix(&[""]);
    let group = ParamGroup {
        name: "all".into(),
        params: params.clone(),
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = Optimizer::new(cfg.optimizer, vec![group], &net.ps);
    let plateau_c = plateau_cfg(cfg, PlateauMode::Min);
    let mut plateau = PlateauState::default();
    let mut history = TrainHistory::new(cfg.stage);
    let mut best = None;

    for epoch in 0..cfg.epochs {
        let lrs = group_lrs(&[cfg.lr], cfg, epoch, &plateau);
        opt.set_lrs(&lrs);
        let mut rng = epoch_rng(cfg.seed, cfg.stage, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut steps, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // A lone trailing disc has no negatives; skip it unless it is the
            // whole partition.
            if chunk.len() < 2 && order.len() >= 2 {
                continue;
            }
            let (x, groups) = contrastive_views(&train, chunk, cfg, size, &mut rng)?;
            net.ps.zero_grad();
            let z = net.encode(&x, Pass::TRAIN)?;
            let h = net.projection.forward(&mut net.ps, &z, Pass::TRAIN);
            let batch = EmbeddingBatch::new(to_f64(&h), groups, cfg.temperature)?;
            let (loss, gh) = multi_positive_ntxent_with_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "pretraining loss became {loss} at epoch {}",
                    epoch + 1
                )));
            }
            let gz = net.projection.backward(&mut net.ps, &to_tensor(&gh));
            net.encoder.backward_to(&mut net.ps, &gz, 0);
            norm_sum += clip(&mut net.ps, &params, cfg.clip_max_norm);
            opt.step(&mut net.ps);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
        }
        let mut rec = EpochRecord::new(
            epoch + 1,
            loss_sum / seen.max(1) as f64,
            lrs[0],
            norm_sum / steps.max(1) as f64,
        );
        rec.val_loss = contrastive_val_loss(&mut net, &val, cfg)?;
        log::info!(
            "pretrain epoch {}/{}: train {:.4} val {:?} lr {:.3e}",
            epoch + 1,
            cfg.epochs,
            rec.train_loss,
            rec.val_loss,
            rec.lr
        );
        if let Some(pc) = &plateau_c {
            plateau = plateau_step(plateau, rec.val_loss.unwrap_or(rec.train_loss), pc);
        }
        history.push(rec);
        checkpoint_epoch(cfg, &history, &net.ps, out_dir, &mut best)?;
    }
    finish(cfg, history, out_dir, best, &opt)
}

fn expect_stage(cfg: &RunConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "config is for stage {}, expected {stage}",
            cfg.stage
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Activations entering stage `first`, computed once through the frozen
/// prefix of the encoder (eval-mode batch norm, no caching).
fn frozen_prefix(
    net: &mut GradeNet,
    inputs: &[ndarray::Array2<f32>],
    first: usize,
    chunk: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(inputs.len());
    for part in inputs.chunks(chunk.max(1)) {
        let x = image_batch(part);
        net.encoder.backbone.check_input(&x)?;
        let h = net
            .encoder
            .backbone
            .forward_stages(&mut net.ps, &x, 0..first, Pass::FROZEN);
        let per = h.numel() / part.len();
        let shape = h.shape[1..].to_vec();
        for i in 0..part.len() {
            let mut s = vec![1];
            s.extend_from_slice(&shape);
            out.push(Tensor::from_vec(&s, h.data[i * per..(i + 1) * per].to_vec()));
        }
    }
    Ok(out)
}

fn cat(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape.clone();
    shape[0] = parts.iter().map(|t| t.shape[0]).sum();
    let data = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
    Tensor::from_vec(&shape, data)
}

fn grade_labels(samples: &[DiscSample]) -> Vec<usize> {
    samples.iter().map(|s| s.grade.index()).collect()
}

/// Logits for cached prefix activations, in eval mode.
fn eval_logits(net: &mut GradeNet, pre: &[Tensor], first: usize, batch: usize) -> Tensor {
    let mut rows = Vec::new();
    let idx: Vec<usize> = (0..pre.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = cat(&chunk.iter().map(|&i| &pre[i]).collect::<Vec<_>>());
        let z = net.encoder.forward_from(&mut net.ps, &x, first, Pass::EVAL);
        let logits = net.head.forward(&mut net.ps, &z, Pass::EVAL);
        rows.extend(logits.data);
    }
    Tensor::from_vec(&[pre.len(), 3], rows)
}

fn grade_eval(logits: &Tensor, samples: &[DiscSample], cfg: &RunConfig) -> Result<(f64, GradeMetrics)> {
    let labels = grade_labels(samples);
    let (loss, _) = weighted_focal_loss_with_grad(&to_f64(logits), &labels, &cfg.focal)?;
    let preds: Vec<SeverityGrade> = (0..samples.len()).map(|i| classify(logits.row(i))).collect();
    let truth: Vec<SeverityGrade> = samples.iter().map(|s| s.grade).collect();
    Ok((loss, GradeMetrics::compute(&preds, &truth)?))
}

fn fill_grade_record(rec: &mut EpochRecord, val: Option<(f64, GradeMetrics)>) {
    if let Some((loss, m)) = val {
        rec.val_loss = Some(loss);
        rec.val_balanced_accuracy = m.balanced_accuracy;
        rec.val_recall_normal = m.recall[0];
        rec.val_recall_moderate = m.recall[1];
        rec.val_recall_severe = m.recall[2];
        rec.val_severe_to_normal = m.severe_to_normal_rate;
    }
}

pub fn finetune_classifier(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    pretrained: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    expect_stage(cfg, Stage::Finetune)?;
    let mut net = GradeNet::new(cfg.preset, derive_seed(cfg.seed, "finetune"));
    load_checkpoint(pretrained, &mut net.ps, Stage::Pretrain, cfg.preset, Some("encoder."))?;
    let train_keys = partition_keys(split, Partition::Train, cfg.stage)?;
    let val_keys = partition_keys(split, Partition::Val, cfg.stage)?;
    let train = load_disc_samples(manifest, &train_keys, &cfg.preprocess, None)?;
    let val = load_disc_samples(manifest, &val_keys, &cfg.preprocess, None)?;
    prepare_out(out_dir, cfg)?;

    let first = first_trainable_stage(&cfg.frozen_stages)?;
    let head_lr = cfg.head_lr.expect("validated");
    let groups = build_finetune_param_groups(&net.ps, &cfg.frozen_stages, cfg.lr, head_lr, cfg.weight_decay)?;
    let bases: Vec<f64> = groups.iter().map(|g| g.lr).collect();
    let trainable: Vec<ParamId> = groups.iter().flat_map(|g| g.params.iter().copied()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, groups, &net.ps);
    let size = net.encoder.input_size();

    let val_inputs: Vec<_> = val
        .iter()
        .map(|s| model_input(&s.patch, &cfg.preprocess, size))
        .collect();
    let val_pre = frozen_prefix(&mut net, &val_inputs, first, cfg.batch_size)?;
    // Without augmentation the frozen prefix is a fixed function of the
    // input, so its output is computed once.
    let train_pre = if cfg.augment.enabled {
        None
    } else {
        let inputs: Vec<_> = train
            .iter()
            .map(|s| model_input(&s.patch, &cfg.preprocess, size))
            .collect();
        Some(frozen_prefix(&mut net, &inputs, first, cfg.batch_size)?)
    };
    let labels = grade_labels(&train);

    let plateau_c = plateau_cfg(cfg, PlateauMode::Max);
    let mut plateau = PlateauState::default();
    let mut history = TrainHistory::new(cfg.stage);
    let mut best = None;
    for epoch in 0..cfg.epochs {
        let lrs = group_lrs(&bases, cfg, epoch, &plateau);
        opt.set_lrs(&lrs);
        let mut rng = epoch_rng(cfg.seed, cfg.stage, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // Batch norm in the trainable stages needs more than one row.
            if chunk.len() < 2 && order.len() >= 2 {
                continue;
            }
            let x = match &train_pre {
                Some(pre) => cat(&chunk.iter().map(|&i| &pre[i]).collect::<Vec<_>>()),
                None => {
                    let inputs: Vec<_> = chunk
                        .iter()
                        .map(|&i| {
                            model_input(
                                &augment_view(&train[i].patch, &cfg.augment, &mut rng),
                                &cfg.preprocess,
                                size,
                            )
                        })
                        .collect();
                    cat(&frozen_prefix(&mut net, &inputs, first, chunk.len())?
                        .iter()
                        .collect::<Vec<_>>())
                }
            };
            let sizes = vec![1; chunk.len()];
            net.ps.zero_grad();
            let z = net.encoder.forward_from(&mut net.ps, &x, first, Pass::TRAIN);
            let pooled = pool_batch(&z, &sizes)?;
            let logits = net.head.forward(&mut net.ps, &pooled, Pass::TRAIN);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, gl) = weighted_focal_loss_with_grad(&to_f64(&logits), &y, &cfg.focal)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "fine-tuning loss became {loss} at epoch {}",
                    epoch + 1
                )));
            }
            let gp = net.head.backward(&mut net.ps, &to_tensor(&gl));
            let gz = pool_batch_backward(&gp, &sizes);
            net.encoder.backward_to(&mut net.ps, &gz, first);
            norm_sum += clip(&mut net.ps, &trainable, cfg.clip_max_norm);
            opt.step(&mut net.ps);
            loss_sum += loss * chunk.len() as f64;
            steps += 1;
        }
        let mut rec = EpochRecord::new(
            epoch + 1,
            loss_sum / train.len() as f64,
            lrs[0],
            norm_sum / steps.max(1) as f64,
        );
        rec.head_lr = lrs.last().copied();
        let val_eval = if val.is_empty() {
            None
        } else {
            Some(grade_eval(
                &eval_logits(&mut net, &val_pre, first, cfg.batch_size),
                &val,
                cfg,
            )?)
        };
        fill_grade_record(&mut rec, val_eval);
        log::info!(
            "finetune epoch {}/{}: train {:.4} val bal-acc {:?} lr {:.3e}/{:.3e}",
            epoch + 1,
            cfg.epochs,
            rec.train_loss,
            rec.val_balanced_accuracy,
            rec.lr,
            head_lr * lr_scale(cfg, epoch, &plateau)
        );
        if let Some(pc) = &plateau_c {
            plateau = plateau_step(plateau, rec.val_balanced_accuracy.unwrap_or(f64::NAN), pc);
        }
        history.push(rec);
        checkpoint_epoch(cfg, &history, &net.ps, out_dir, &mut best)?;
    }
    finish(cfg, history, out_dir, best, &opt)
}

// ---------------------------------------------------------------------------
// Linear probe

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub history: TrainHistory,
    pub best_epoch: usize,
    /// Validation metrics of the best epoch.
    pub metrics: GradeMetrics,
    /// Max |Δw| over the encoder during probing (always 0 by construction;
    /// recorded as evidence).
    pub encoder_max_abs_delta: f64,
}

/// Trains a fresh linear head on frozen encoder features with the
/// fine-tuning configuration's head rate, epochs, loss and scheduler.
pub fn linear_probe(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    pretrained: &Path,
) -> Result<ProbeOutcome> {
    expect_stage(cfg, Stage::Finetune)?;
    let mut net = GradeNet::new(cfg.preset, derive_seed(cfg.seed, "probe"));
    load_checkpoint(pretrained, &mut net.ps, Stage::Pretrain, cfg.preset, Some("encoder."))?;
    let before: Vec<Vec<f32>> = net.ps.iter().map(|(_, p)| p.value.clone()).collect();
    let train = load_disc_samples(
        manifest,
        &partition_keys(split, Partition::Train, cfg.stage)?,
        &cfg.preprocess,
        None,
    )?;
    let val = load_disc_samples(
        manifest,
        &partition_keys(split, Partition::Val, cfg.stage)?,
        &cfg.preprocess,
        None,
    )?;
    if val.is_empty() {
        return Err(Error::Config(
            "linear probe needs a non-empty validation partition".into(),
        ));
    }
    let size = net.encoder.input_size();
    let features = |net: &mut GradeNet, samples: &[DiscSample]| -> Result<Tensor> {
        let inputs: Vec<_> = samples
            .iter()
            .map(|s| model_input(&s.patch, &cfg.preprocess, size))
            .collect();
        let pre = frozen_prefix(net, &inputs, crate::models::STAGES.len(), cfg.batch_size)?;
        let mut data = Vec::with_capacity(samples.len() * FEATURE_DIM);
        for p in &pre {
            let z = net
                .encoder
                .forward_from(&mut net.ps, p, crate::models::STAGES.len(), Pass::EVAL);
            data.extend(z.data);
        }
        Ok(Tensor::from_vec(&[samples.len(), FEATURE_DIM], data))
    };
    let ftrain = features(&mut net, &train)?;
    let fval = features(&mut net, &val)?;
    let delta = net
        .ps
        .iter()
        .zip(&before)
        .flat_map(|((_, p), b)| p.value.iter().zip(b).map(|(x, y)| (x - y).abs() as f64))
        .fold(0.0, f64::max);

    let mut hps = ParamStore::new();
    let mut head = Linear::new(
        &mut hps,
        "head",
        FEATURE_DIM,
        3,
        &mut stream(cfg.seed, "init/probe-head"),
    );
    let params = hps.weights_with_prefix(&[""]);
    let base = cfg.head_lr.expect("validated");
    let group = ParamGroup {
        name: "head".into(),
        params: params.clone(),
        lr: base,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = Optimizer::new(cfg.optimizer, vec![group], &hps);
    let labels = grade_labels(&train);
    let plateau_c = plateau_cfg(cfg, PlateauMode::Max);
    let mut plateau = PlateauState::default();
    let mut history = TrainHistory::new(Stage::Finetune);
    let mut per_epoch = Vec::new();
    for epoch in 0..cfg.epochs {
        let lrs = group_lrs(&[base], cfg, epoch, &plateau);
        opt.set_lrs(&lrs);
        let mut rng = rng_from(derive_index(derive_seed(cfg.seed, "probe/epoch"), epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = Tensor::stack(
                &chunk.iter().map(|&i| ftrain.row(i)).collect::<Vec<_>>(),
                &[FEATURE_DIM],
            );
            hps.zero_grad();
            let logits = head.forward(&mut hps, &x, Pass::TRAIN);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, gl) = weighted_focal_loss_with_grad(&to_f64(&logits), &y, &cfg.focal)?;
            head.backward(&mut hps, &to_tensor(&gl));
            norm_sum += clip(&mut hps, &params, cfg.clip_max_norm);
            opt.step(&mut hps);
            loss_sum += loss * chunk.len() as f64;
            steps += 1;
        }
        let mut rec = EpochRecord::new(
            epoch + 1,
            loss_sum / train.len() as f64,
            lrs[0],
            norm_sum / steps.max(1) as f64,
        );
        let logits = head.forward(&mut hps, &fval, Pass::EVAL);
        let ev = grade_eval(&logits, &val, cfg)?;
        per_epoch.push(ev.1.clone());
        fill_grade_record(&mut rec, Some(ev));
        if let Some(pc) = &plateau_c {
            plateau = plateau_step(plateau, rec.val_balanced_accuracy.unwrap_or(f64::NAN), pc);
        }
        history.push(rec);
    }
    let best_epoch = select_best_checkpoint(&history, Criterion::ValBalancedAccuracyMax)?;
    Ok(ProbeOutcome {
        best_epoch,
        metrics: per_epoch[best_epoch - 1].clone(),
        history,
        encoder_max_abs_delta: delta,
    })
}

// ---------------------------------------------------------------------------
// Coordinate regression

/// Pixel-space predictions for every sample of `data`, in eval mode.
pub fn predict_centers(reg: &mut RoiRegressor, data: &RoiData, batch: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(data.samples.len());
    let idx: Vec<usize> = (0..data.samples.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, levels) = data.batch(chunk);
        let y = reg.forward(&x, &levels, Pass::EVAL)?;
        for (r, &i) in chunk.iter().enumerate() {
            let s = &data.samples[i];
            out.push((
                y.data[2 * r] as f64 * s.width as f64,
                y.data[2 * r + 1] as f64 * s.height as f64,
            ));
        }
    }
    Ok(out)
}

fn targets_norm(data: &RoiData, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), 2), |(r, c)| {
        let t = data.samples[idx[r]].target_norm;
        if c == 0 {
            t.0
        } else {
            t.1
        }
    })
}

/// (smooth-L1 loss, per-coordinate RMSE px, Euclidean RMSE px).
pub fn roi_eval(reg: &mut RoiRegressor, data: &RoiData, cfg: &RunConfig) -> Result<(f64, f64, f64)> {
    let preds = predict_centers(reg, data, cfg.batch_size)?;
    let targets: Vec<(f64, f64)> = data.samples.iter().map(|s| s.target_px).collect();
    let pn = Array2::from_shape_fn((preds.len(), 2), |(r, c)| {
        let s = &data.samples[r];
        if c == 0 {
            preds[r].0 / s.width as f64
        } else {
            preds[r].1 / s.height as f64
        }
    });
    let all: Vec<usize> = (0..data.samples.len()).collect();
    let (loss, _) = smooth_l1_with_grad(&pn, &targets_norm(data, &all), cfg.smooth_l1_beta)?;
    Ok((
        loss,
        coordinate_rmse(&preds, &targets)?,
        euclidean_rmse(&preds, &targets)?,
    ))
}

pub fn train_roi_regressor(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    expect_stage(cfg, Stage::Roi)?;
    let train = load_roi_data(
        manifest,
        &partition_keys(split, Partition::Train, cfg.stage)?,
        &cfg.preprocess,
    )?;
    let val_keys = partition_keys(split, Partition::Val, cfg.stage)?;
    let val = if val_keys.is_empty() {
        None
    } else {
        Some(load_roi_data(manifest, &val_keys, &cfg.preprocess)?)
    };
    prepare_out(out_dir, cfg)?;

    let mut reg = RoiRegressor::new(cfg.preset, derive_seed(cfg.seed, "roi"));
    let params = reg.ps.weights_with_prefix(&[""]);
    let group = ParamGroup {
        name: "all".into(),
        params: params.clone(),
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = Optimizer::new(cfg.optimizer, vec![group], &reg.ps);
    let plateau_c = plateau_cfg(cfg, PlateauMode::Min);
    let mut plateau = PlateauState::default();
    let mut history = TrainHistory::new(cfg.stage);
    let mut best = None;
    let n = train.samples.len();
    for epoch in 0..cfg.epochs {
        let lrs = group_lrs(&[cfg.lr], cfg, epoch, &plateau);
        opt.set_lrs(&lrs);
        let mut rng = epoch_rng(cfg.seed, cfg.stage, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && n >= 2 {
                continue;
            }
            let (x, levels) = train.batch(chunk);
            reg.ps.zero_grad();
            let y = reg.forward(&x, &levels, Pass::TRAIN)?;
            let (loss, g) = smooth_l1_with_grad(&to_f64(&y), &targets_norm(&train, chunk), cfg.smooth_l1_beta)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "regression loss became {loss} at epoch {}",
                    epoch + 1
                )));
            }
            reg.backward(&to_tensor(&g));
            norm_sum += clip(&mut reg.ps, &params, cfg.clip_max_norm);
            opt.step(&mut reg.ps);
            loss_sum += loss * chunk.len() as f64;
            steps += 1;
        }
        let mut rec = EpochRecord::new(epoch + 1, loss_sum / n as f64, lrs[0], norm_sum / steps.max(1) as f64);
        if let Some(v) = &val {
            let (loss, rmse, _) = roi_eval(&mut reg, v, cfg)?;
            rec.val_loss = Some(loss);
            rec.val_rmse = Some(rmse);
        }
        log::info!(
            "roi epoch {}/{}: train {:.5} val rmse {:?} px lr {:.3e}",
            epoch + 1,
            cfg.epochs,
            rec.train_loss,
            rec.val_rmse,
            rec.lr
        );
        if let Some(pc) = &plateau_c {
            plateau = plateau_step(plateau, rec.val_rmse.unwrap_or(f64::NAN), pc);
        }
        history.push(rec);
        checkpoint_epoch(cfg, &history, &reg.ps, out_dir, &mut best)?;
    }
    finish(cfg, history, out_dir, best, &opt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, ba: Option<f64>, loss: f64) -> EpochRecord {
        let mut r = EpochRecord::new(epoch, loss, 1e-3, 0.0);
        r.val_balanced_accuracy = ba;
        r.val_loss = Some(loss);
        r
    }

    #[test]
    fn best_epoch_tie_goes_early() {
        let mut h = TrainHistory::new(Stage::Finetune);
        for (e, ba) in [0.5, 0.6, 0.8, 0.7, 0.7, 0.75, 0.8, 0.6].iter().enumerate() {
            h.push(rec(e + 1, Some(*ba), 1.0));
        }
        assert_eq!(
            select_best_checkpoint(&h, Criterion::ValBalancedAccuracyMax).unwrap(),
            3
        );
        let mut h = TrainHistory::new(Stage::Pretrain);
        for (e, l) in [3.0, 2.0, 1.0].iter().enumerate() {
            h.push(rec(e + 1, None, *l));
        }
        assert_eq!(select_best_checkpoint(&h, Criterion::ValLossMin).unwrap(), 3);
        assert!(select_best_checkpoint(&TrainHistory::default(), Criterion::ValRmseMin).is_err());
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let mut h = TrainHistory::new(Stage::Finetune);
        h.push(rec(1, Some(0.5), 1.25));
        h.push(rec(2, None, 0.75));
        h.write_csv(&p).unwrap();
        let back = TrainHistory::read_csv(&p).unwrap();
        assert_eq!(back.records, h.records);
    }
}
