//! The phantom has to be learnable: a crude pixel statistic next to each disc
//! should already separate the grades.

use disc_grade_core::data_model::SeverityGrade;
use disc_grade_core::dataset::load_disc_samples;
use disc_grade_core::evaluation::{balanced_accuracy, ConfusionMatrix3};
use disc_grade_core::phantom::{generate_phantom_dataset, PhantomConfig};
use disc_grade_core::preprocess::PreprocessConfig;

/// Mean intensity of a thin band running from the disc center through the
/// posterior disc margin and across the canal.
fn canal_band_mean(patch: &ndarray::Array2<f32>) -> f64 {
    let c = patch.nrows() / 2;
    let band = patch.slice(ndarray::s![c - 2..=c + 2, c + 12..patch.ncols() - 2]);
    band.iter().map(|&v| v as f64).sum::<f64>() / band.len() as f64
}

/// Two ordered thresholds maximizing balanced accuracy on `fit`: values above
/// the upper one are normal, below the lower one severe.
fn fit_thresholds(fit: &[(f64, usize)]) -> (f64, f64) {
    let mut cuts: Vec<f64> = fit.iter().map(|p| p.0).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut best = (f64::NEG_INFINITY, (0.0, 0.0));
    for (i, &lo) in cuts.iter().enumerate() {
        for &hi in &cuts[i..] {
            let ba = score(fit, (lo, hi));
            if ba > best.0 {
                best = (ba, (lo, hi));
            }
        }
    }
    best.1
}

fn predict(v: f64, (lo, hi): (f64, f64)) -> usize {
    if v >= hi {
        0
    } else if v >= lo {
        1
    } else {
        2
    }
}

fn score(data: &[(f64, usize)], t: (f64, f64)) -> f64 {
    let mut cm = ConfusionMatrix3::default();
    for &(v, g) in data {
        cm.counts[g][predict(v, t)] += 1;
    }
    balanced_accuracy(&cm).unwrap_or(0.0)
}

#[test]
fn pixel_statistic_separates_phantom_grades() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        n_patients: 120,
        image_size: 256,
        slices_per_series: 3,
        seed: 11,
        ..PhantomConfig::default()
    };
    let manifest = generate_phantom_dataset(&cfg, dir.path()).unwrap();
    let samples = load_disc_samples(&manifest, &manifest.disc_keys(), &PreprocessConfig::default(), None).unwrap();
    let data: Vec<(f64, usize)> = samples
        .iter()
        .map(|s| (canal_band_mean(&s.patch), s.grade.index()))
        .collect();
    for g in SeverityGrade::ALL {
        assert!(
            data.iter().filter(|d| d.1 == g.index()).count() >= 10,
            "too few {g} discs"
        );
    }

    // Fit on the first half of the patients, score on the second.
    let (fit, held_out) = data.split_at(data.len() / 2);
    let t = fit_thresholds(fit);
    let ba = score(held_out, t);
    assert!(ba >= 0.9, "held-out balanced accuracy {ba:.3} with thresholds {t:?}");
}
