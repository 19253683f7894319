use std::path::Path;

use disc_grade_core::checkpoint::{read_checkpoint_meta, Stage};
use disc_grade_core::config::RunConfig;
use disc_grade_core::data_model::DatasetManifest;
use disc_grade_core::models::Preset;
use disc_grade_core::nn::{clip_grad_norm, Init, Optimizer, ParamGroup, ParamKind, ParamStore};
use disc_grade_core::phantom::{generate_phantom_dataset, PhantomConfig};
use disc_grade_core::rng::rng_from;
use disc_grade_core::schedule::cosine_lr;
use disc_grade_core::splitting::{stratified_disc_split, SplitAssignment, SplitFractions};
use disc_grade_core::training::{
    finetune_classifier, pretrain_contrastive, select_best_checkpoint, Criterion, EpochRecord, TrainHistory,
};

fn small_phantom(dir: &Path, patients: usize) -> (DatasetManifest, SplitAssignment) {
    let cfg = PhantomConfig {
        n_patients: patients,
        image_size: 128,
        slices_per_series: 3,
        seed: 5,
        ..PhantomConfig::default()
    };
    let manifest = generate_phantom_dataset(&cfg, &dir.join("data")).unwrap();
    let split = stratified_disc_split(&manifest, SplitFractions::new(0.7, 0.15, 0.15), 0)
        .unwrap()
        .split;
    (manifest, split)
}

fn pretrain_cfg(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        ..RunConfig::defaults(Stage::Pretrain, Preset::Tiny)
    }
}

#[test]
fn pretraining_learns_records_cosine_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = small_phantom(dir.path(), 12);
    let cfg = pretrain_cfg(5);
    let a = pretrain_contrastive(&cfg, &manifest, &split, &dir.path().join("a")).unwrap();

    let recs = &a.history.records;
    assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    assert!(
        recs[4].train_loss < recs[0].train_loss,
        "{} -> {}",
        recs[0].train_loss,
        recs[4].train_loss
    );
    for r in recs {
        assert!(
            (r.lr - cosine_lr(cfg.lr, r.epoch - 1, cfg.epochs)).abs() <= 1e-12,
            "epoch {}",
            r.epoch
        );
    }

    let meta = read_checkpoint_meta(&a.best_checkpoint).unwrap();
    assert_eq!(meta.stage, Stage::Pretrain);
    assert_eq!(meta.config_hash, cfg.hash());
    assert_eq!(a.config_hash, cfg.hash());
    assert_eq!(meta.epoch, a.best_epoch);
    assert_eq!(read_checkpoint_meta(&a.last_checkpoint).unwrap().epoch, 5);

    let b = pretrain_contrastive(&cfg, &manifest, &split, &dir.path().join("b")).unwrap();
    assert_eq!(a.history.records, b.history.records);
    assert_eq!(
        std::fs::read(&a.last_checkpoint).unwrap(),
        std::fs::read(&b.last_checkpoint).unwrap()
    );
}

#[test]
fn finetuning_rejects_a_checkpoint_from_another_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = small_phantom(dir.path(), 8);
    let pre = pretrain_contrastive(&pretrain_cfg(1), &manifest, &split, &dir.path().join("pre")).unwrap();
    let ft_cfg = RunConfig {
        epochs: 1,
        ..RunConfig::defaults(Stage::Finetune, Preset::Tiny)
    };
    let ft = finetune_classifier(&ft_cfg, &manifest, &split, &pre.best_checkpoint, &dir.path().join("ft")).unwrap();
    assert_eq!(ft.history.records.len(), 1);

    let err =
        finetune_classifier(&ft_cfg, &manifest, &split, &ft.best_checkpoint, &dir.path().join("ft2")).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(err.to_string().contains("pretrain"), "{err}");
}

#[test]
fn infinite_clip_norm_is_the_same_step_as_no_clipping() {
    let build = || {
        let mut ps = ParamStore::new();
        let w = ps.add(
            "w",
            &[4, 3],
            ParamKind::Weight,
            Init::KaimingNormal { fan: 3 },
            &mut rng_from(1),
        );
        let b = ps.add(
            "b",
            &[4],
            ParamKind::Weight,
            Init::Uniform { bound: 0.5 },
            &mut rng_from(2),
        );
        for (i, id) in [w, b].into_iter().enumerate() {
            let g = &mut ps.get_mut(id).grad;
            for (j, v) in g.iter_mut().enumerate() {
                *v = ((i * 31 + j * 7) % 13) as f32 - 6.0;
            }
        }
        let group = ParamGroup {
            name: "all".into(),
            params: vec![w, b],
            lr: 1e-2,
            weight_decay: 1e-4,
        };
        (ps, group)
    };
    let (mut clipped, g1) = build();
    let (mut plain, g2) = build();
    let ids = g1.params.clone();
    let norm = clip_grad_norm(&mut clipped, &ids, f64::INFINITY);
    assert!(norm > 0.0);
    Optimizer::adamw(vec![g1], &clipped).step(&mut clipped);
    Optimizer::adamw(vec![g2], &plain).step(&mut plain);
    for &id in &ids {
        let bits = |ps: &ParamStore| ps.value(id).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&clipped), bits(&plain));
    }
}

fn record(epoch: usize, loss: f64, ba: f64) -> EpochRecord {
    EpochRecord {
        epoch,
        train_loss: loss,
        val_loss: Some(loss * 1.1),
        lr: 5e-5,
        head_lr: Some(5e-4),
        val_balanced_accuracy: Some(ba),
        val_recall_normal: None,
        val_recall_moderate: None,
        val_recall_severe: None,
        val_severe_to_normal: None,
        val_rmse: None,
        grad_norm: 1.0,
    }
}

#[test]
fn best_checkpoint_on_a_rise_then_plateau_history_is_mid_run() {
    // Balanced accuracy climbs, peaks around epoch 21, then drifts down
    // while the training loss keeps falling.
    let mut h = TrainHistory::new(Stage::Finetune);
    for e in 1..=37 {
        let t = e as f64;
        let ba = 0.78 - 0.3 * (-t / 5.0).exp() - 0.0004 * (t - 21.0).powi(2) / 4.0;
        h.push(record(e, 0.9 * (-t / 12.0).exp(), ba));
    }
    let best = select_best_checkpoint(&h, Criterion::ValBalancedAccuracyMax).unwrap();
    assert!((10..37).contains(&best), "best epoch {best}");
    let by_loss = select_best_checkpoint(&h, Criterion::ValLossMin).unwrap();
    assert_eq!(by_loss, 37);
}
