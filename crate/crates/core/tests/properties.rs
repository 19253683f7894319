use std::collections::BTreeMap;

use disc_grade_core::augment::{augment_view, AugmentPolicy};
use disc_grade_core::data_model::{Annotation, DatasetManifest, DiscKey, DiscLevel, SeverityGrade};
use disc_grade_core::losses::{multi_positive_ntxent, weighted_focal_loss, EmbeddingBatch, FocalParams};
use disc_grade_core::preprocess::{crop_roi, normalize_float, to_uint8};
use disc_grade_core::rng::rng_from;
use disc_grade_core::splitting::{stratified_disc_split, Partition, SplitFractions};
use ndarray::Array2;
use proptest::prelude::*;

fn grade(i: usize) -> SeverityGrade {
    SeverityGrade::from_index(i % 3).unwrap()
}

/// One annotation per disc, five discs per patient, grades from `grades`.
fn synthetic_manifest(grades: &[usize]) -> DatasetManifest {
    let records = grades
        .iter()
        .enumerate()
        .map(|(i, &g)| Annotation {
            key: DiscKey::new(format!("p{:04}", i / 5), "T2", DiscLevel::ALL[i % 5]),
            slice_index: 4,
            x: 100.0 + i as f64 * 0.25,
            y: 50.0 + (i % 5) as f64 * 30.0,
            grade: grade(g),
        })
        .collect();
    DatasetManifest::new(records, "images")
}

fn grouped_embeddings() -> impl Strategy<Value = (Vec<f64>, usize, Vec<usize>)> {
    (2usize..5, 2usize..4, 3usize..8).prop_flat_map(|(groups, per, dim)| {
        let n = groups * per;
        let ids: Vec<usize> = (0..n).map(|i| i % groups).collect();
        (
            prop::collection::vec(0.2f64..1.0, n * dim),
            Just(dim),
            Just(ids),
        )
    })
}

fn signed(v: &[f64]) -> Vec<f64> {
    // Alternate signs so rows are not all in one orthant.
    v.iter()
        .enumerate()
        .map(|(i, &x)| if i % 3 == 1 { -x } else { x })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trips(
        rows in prop::collection::vec((0usize..40, 0usize..5, 0u32..9, 0.0f64..512.0, 0.0f64..512.0, 0usize..3), 1..30)
    ) {
        let mut seen = std::collections::BTreeSet::new();
        let records: Vec<Annotation> = rows
            .into_iter()
            .filter(|(p, l, s, ..)| seen.insert((*p, *l, *s)))
            .map(|(p, l, s, x, y, g)| Annotation {
                key: DiscKey::new(format!("patient-{p}"), "T2", DiscLevel::ALL[l]),
                slice_index: s,
                x,
                y,
                grade: grade(g),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = DatasetManifest::new(records, "imgs");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        prop_assert_eq!(&back.records, &m.records);
        prop_assert_eq!(&back.image_root, &m.image_root);
        prop_assert_eq!(back.format_version, m.format_version);
    }

    #[test]
    fn ntxent_ignores_embedding_scale((raw, dim, ids) in grouped_embeddings(), c in 0.05f64..20.0) {
        let z = Array2::from_shape_vec((ids.len(), dim), signed(&raw)).unwrap();
        let a = multi_positive_ntxent(&EmbeddingBatch::new(z.clone(), ids.clone(), 0.1).unwrap()).unwrap();
        let b = multi_positive_ntxent(&EmbeddingBatch::new(z * c, ids, 0.1).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn ntxent_is_row_permutation_invariant((raw, dim, ids) in grouped_embeddings(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = ids.len();
        let z = Array2::from_shape_vec((n, dim), signed(&raw)).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng_from(seed));
        let zp = Array2::from_shape_fn((n, dim), |(i, j)| z[[perm[i], j]]);
        let idp: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let a = multi_positive_ntxent(&EmbeddingBatch::new(z, ids, 0.1).unwrap()).unwrap();
        let b = multi_positive_ntxent(&EmbeddingBatch::new(zp, idp, 0.1).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn focal_decreases_as_true_class_probability_rises(
        label in 0usize..3, lo in -6.0f64..6.0, step in 0.01f64..3.0, gamma in 0.0f64..4.0, others in (-2.0f64..2.0, -2.0f64..2.0)
    ) {
        let params = FocalParams { alpha: [0.8, 4.0, 5.0], gamma };
        let logits_with = |t: f64| {
            let mut row = [others.0, others.1, others.0 - others.1];
            row.rotate_right(label);
            row[label] = t;
            Array2::from_shape_vec((1, 3), row.to_vec()).unwrap()
        };
        let a = weighted_focal_loss(&logits_with(lo), &[label], &params).unwrap();
        let b = weighted_focal_loss(&logits_with(lo + step), &[label], &params).unwrap();
        prop_assert!(b < a, "loss should fall: {a} -> {b}");
    }

    #[test]
    fn split_is_a_stratified_partition(
        grades in prop::collection::vec(0usize..3, 15..120),
        seed in any::<u64>(),
        other_seed in any::<u64>(),
    ) {
        let m = synthetic_manifest(&grades);
        let fr = SplitFractions::new(0.7, 0.15, 0.15);
        let split = stratified_disc_split(&m, fr, seed).unwrap().split;
        let again = stratified_disc_split(&m, fr, other_seed).unwrap().split;

        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut counts_other = counts.clone();
        let mut totals = [0usize; 3];
        for r in &m.records {
            let g = r.grade.index();
            totals[g] += 1;
            let p = split.partition_of(&r.key);
            prop_assert!(p.is_some(), "disc {} unassigned", r.key);
            *counts.entry((g, p.unwrap().index())).or_default() += 1;
            *counts_other.entry((g, again.partition_of(&r.key).unwrap().index())).or_default() += 1;
        }
        let all: usize = [Partition::Train, Partition::Val, Partition::Test]
            .iter()
            .map(|&p| split.keys_in(p).len())
            .sum();
        prop_assert_eq!(all, m.records.len());
        prop_assert_eq!(&counts, &counts_other);
        // Classes too small to stratify go entirely to train, so only check
        // those that can populate every partition.
        for g in 0..3 {
            if totals[g] < 3 {
                continue;
            }
            for (p, f) in fr.as_array().into_iter().enumerate() {
                let got = *counts.get(&(g, p)).unwrap_or(&0) as f64;
                prop_assert!((got - f * totals[g] as f64).abs() <= 1.0, "grade {g} partition {p}: {got} of {}", totals[g]);
            }
        }
    }

    #[test]
    fn crop_centers_the_annotation(half in 4usize..40, cx in 0.0f64..1.0, cy in 0.0f64..1.0) {
        let roi = 2 * half;
        let side = 3 * roi;
        let img = Array2::from_shape_fn((side, side), |(r, c)| (r * side + c) as f32);
        let center = (roi as f64 + cx * roi as f64, roi as f64 + cy * roi as f64);
        let key = DiscKey::new("p", "T2", DiscLevel::L4L5);
        let patch = crop_roi(&img, center, roi, key, 0).unwrap();
        let (r0, c0) = patch.crop_origin;
        let in_patch = (center.0 - c0 as f64, center.1 - r0 as f64);
        prop_assert!((in_patch.0 - half as f64).abs() <= 0.5 && (in_patch.1 - half as f64).abs() <= 0.5);
        let px = patch.to_float();
        prop_assert_eq!(px[[0, 0]], img[[r0 as usize, c0 as usize]]);
    }

    #[test]
    fn normalization_is_idempotent_and_bounded(v in prop::collection::vec(-3.0f32..3.0, 16)) {
        let img = Array2::from_shape_vec((4, 4), v).unwrap();
        let once = normalize_float(&img);
        prop_assert!(once.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert_eq!(normalize_float(&once), once.clone());
        let bytes = to_uint8(&once);
        prop_assert!(bytes.iter().zip(once.iter()).all(|(&b, &f)| (b as f32 / 255.0 - f).abs() <= 0.5 / 255.0 + 1e-6));
    }

    #[test]
    fn augmented_views_keep_shape_and_stay_finite(seed in any::<u64>(), side in 8usize..40) {
        let patch = Array2::from_shape_fn((side, side), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 10.0);
        let view = augment_view(&patch, &AugmentPolicy::default(), &mut rng_from(seed));
        prop_assert_eq!(view.dim(), patch.dim());
        prop_assert!(view.iter().all(|v| v.is_finite()));
    }
}
