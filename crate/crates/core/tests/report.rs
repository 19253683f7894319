use disc_grade_core::checkpoint::Stage;
use disc_grade_core::evaluation::{ConfusionMatrix3, GradeMetrics};
use disc_grade_core::report::{ema, emit_report, LocalizationMetrics, MetricsReport, RECALL_EMA};
use disc_grade_core::training::{EpochRecord, TrainHistory};

fn finetune_history() -> TrainHistory {
    let mut h = TrainHistory::new(Stage::Finetune);
    for e in 1..=6 {
        let t = e as f64;
        h.push(EpochRecord {
            epoch: e,
            train_loss: 1.0 / t,
            val_loss: Some(1.2 / t),
            lr: 5e-5,
            head_lr: Some(5e-4),
            val_balanced_accuracy: Some(0.5 + 0.05 * t),
            val_recall_normal: Some(0.9),
            val_recall_moderate: Some(0.3 + 0.1 * t),
            // Epoch 2 has no severe discs predicted or present.
            val_recall_severe: if e == 2 { None } else { Some(0.2 * (t % 3.0)) },
            val_severe_to_normal: Some(0.0),
            val_rmse: None,
            grad_norm: 0.5,
        });
    }
    h
}

#[test]
fn report_bundle_has_curves_tables_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let h = finetune_history();
    let mut cm = ConfusionMatrix3::default();
    cm.counts = [[40, 3, 1], [2, 9, 1], [0, 1, 4]];
    let mut m = MetricsReport::new("val");
    m.ground_truth_coords = Some(GradeMetrics::from_confusion(cm));
    m.localization = Some(LocalizationMetrics {
        n: 61,
        coordinate_rmse: 3.5,
        euclidean_rmse: 4.9,
    });
    m.best_epochs.insert("finetune".into(), 5);

    let written = emit_report(&[(Stage::Finetune, h.clone())], Some(&m), &[], dir.path()).unwrap();
    for name in [
        "finetune_loss.png",
        "finetune_lr.png",
        "finetune_balanced_accuracy.png",
        "finetune_recall.png",
        "confusion.png",
    ] {
        assert!(written.contains(&dir.path().join(name)), "{name} missing");
    }

    let back = MetricsReport::load(&dir.path().join("metrics.json")).unwrap();
    assert_eq!(back, m);

    let mut rd = csv::Reader::from_path(dir.path().join("finetune_recall.csv")).unwrap();
    let head: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        head,
        [
            "epoch",
            "normal",
            "normal_ema",
            "moderate",
            "moderate_ema",
            "severe",
            "severe_ema"
        ]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let severe: Vec<Option<f64>> = h.records.iter().map(|r| r.val_recall_severe).collect();
    let smooth = ema(&severe, RECALL_EMA);
    for (row, want) in rows.iter().zip(&smooth) {
        let got: Option<f64> = row[6].parse().ok();
        assert_eq!(got.map(|v| (v * 1e9).round()), want.map(|v| (v * 1e9).round()));
    }
    assert_eq!(&rows[1][5], "");

    let confusion = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    assert!(confusion.lines().nth(3).unwrap().ends_with("0,1,4"), "{confusion}");
}

#[test]
fn empty_report_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = emit_report(&[], None, &[], dir.path()).unwrap_err();
    assert!(err.is_validation());
}
