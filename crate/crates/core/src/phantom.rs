//! Synthetic sagittal-spine phantoms with known disc centers and grades.
//!
//! Each slice shows five disc ellipses stacked between vertebral bodies with a
//! bright canal band running behind them. Stenosis is drawn as a local
//! narrowing of that band at the disc's height plus a dimmer disc, so the
//! grade is visible inside a disc-centered crop. Neighbouring slices drift
//! slightly and the canal fades off the midline, which gives the 2.5D
//! regressor real context to use.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{Annotation, DatasetManifest, DiscKey, DiscLevel, SeverityGrade, SliceImage};
use crate::error::{Error, Result};
use crate::imageio::write_pgm16;
use crate::rng::{derive_index, derive_seed, rng_from, PipelineRng};

pub const SERIES_ID: &str = "T2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_patients: usize,
    pub slices_per_series: usize,
    pub image_size: usize,
    pub grade_probabilities: [f64; 3],
    /// Standard deviation of additive noise as a fraction of full scale.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_patients: 200,
            slices_per_series: 9,
            image_size: 320,
            grade_probabilities: [0.77, 0.15, 0.08],
            noise_std: 0.04,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.grade_probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.grade_probabilities.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(format!(
                "grade probabilities {:?} must be non-negative and sum to 1",
                self.grade_probabilities
            )));
        }
        if self.slices_per_series < 3 || self.slices_per_series % 2 == 0 {
            return Err(Error::Config(format!(
                "slices_per_series must be odd and >= 3, got {}",
                self.slices_per_series
            )));
        }
        if self.image_size < 128 {
            return Err(Error::Config(format!(
                "image_size must be at least 128, got {}",
                self.image_size
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn mid_slice(&self) -> usize {
        self.slices_per_series / 2
    }
}

/// Template disc center for a level, as fractions of the image size (x, y).
pub fn template_center(level: DiscLevel) -> (f64, f64) {
    let i = level.index() as f64;
    (0.42 + 0.01 * (i - 2.0) * (i - 2.0), 0.28 + 0.11 * i)
}

/// Per-level appearance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    pub grade: SeverityGrade,
    /// Center offset from the shifted template, pixels.
    pub jitter: (f64, f64),
    /// Canal width at the disc relative to the baseline width.
    pub narrowing: f64,
    pub disc_intensity: f64,
    /// Horizontal and vertical ellipse semi-axes, pixels.
    pub semi_axes: (f64, f64),
}

/// Everything needed to render one patient's series.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientParams {
    pub image_size: usize,
    pub slices_per_series: usize,
    pub shift: (f64, f64),
    pub spacing_scale: f64,
    /// Lateral drift per slice step, pixels.
    pub drift_per_slice: f64,
    pub canal_width: f64,
    pub canal_gap: f64,
    pub body_intensity: f64,
    pub background: f64,
    pub noise_std: f64,
    /// Full-scale 16-bit value that intensity 1.0 maps to.
    pub gain: f64,
    pub levels: [LevelParams; 5],
}

fn nominal_grade_params(grade: SeverityGrade) -> (f64, f64) {
    // (narrowing, disc intensity)
    match grade {
        SeverityGrade::Normal => (0.93, 0.74),
        SeverityGrade::Moderate => (0.6, 0.62),
        SeverityGrade::Severe => (0.3, 0.5),
    }
}

impl PatientParams {
    /// Jitter-free, noise-free patient with the given grades.
    pub fn template(image_size: usize, slices_per_series: usize, grades: [SeverityGrade; 5]) -> Self {
        let s = image_size as f64;
        let levels = grades.map(|grade| {
            let (narrowing, disc_intensity) = nominal_grade_params(grade);
            LevelParams {
                grade,
                jitter: (0.0, 0.0),
                narrowing,
                disc_intensity,
                semi_axes: (0.082 * s, 0.021 * s),
            }
        });
        PatientParams {
            image_size,
            slices_per_series,
            shift: (0.0, 0.0),
            spacing_scale: 1.0,
            drift_per_slice: 0.0,
            canal_width: 0.05 * s,
            canal_gap: 0.03 * s,
            body_intensity: 0.35,
            background: 0.06,
            noise_std: 0.0,
            gain: 60000.0,
            levels,
        }
    }

    /// Draws a patient with geometry and appearance jitter.
    pub fn sample(config: &PhantomConfig, rng: &mut PipelineRng) -> Self {
        let s = config.image_size as f64;
        let cum = [
            config.grade_probabilities[0],
            config.grade_probabilities[0] + config.grade_probabilities[1],
        ];
        let jitter = Normal::new(0.0, 0.006 * s).expect("finite std");
        let levels = std::array::from_fn(|_| {
            let u: f64 = rng.random();
            let grade = if u < cum[0] {
                SeverityGrade::Normal
            } else if u < cum[1] {
                SeverityGrade::Moderate
            } else {
                SeverityGrade::Severe
            };
            let narrowing = match grade {
                SeverityGrade::Normal => rng.random_range(0.84..1.0),
                SeverityGrade::Moderate => rng.random_range(0.5..0.7),
                SeverityGrade::Severe => rng.random_range(0.2..0.4),
            };
            let (_, disc) = nominal_grade_params(grade);
            let clip = 0.015 * s;
            LevelParams {
                grade,
                jitter: (
                    jitter.sample(rng).clamp(-clip, clip),
                    jitter.sample(rng).clamp(-clip, clip),
                ),
                narrowing,
                disc_intensity: disc + rng.random_range(-0.06..0.06),
                semi_axes: (rng.random_range(0.074..0.09) * s, rng.random_range(0.018..0.024) * s),
            }
        });
        PatientParams {
            image_size: config.image_size,
            slices_per_series: config.slices_per_series,
            shift: (rng.random_range(-0.06..0.06) * s, rng.random_range(-0.06..0.06) * s),
            spacing_scale: rng.random_range(0.92..1.08),
            drift_per_slice: rng.random_range(-0.004..0.004) * s,
            canal_width: rng.random_range(0.044..0.056) * s,
            canal_gap: rng.random_range(0.025..0.035) * s,
            body_intensity: rng.random_range(0.3..0.4),
            background: rng.random_range(0.03..0.09),
            noise_std: config.noise_std,
            gain: rng.random_range(0.7..1.0) * 65535.0,
            levels,
        }
    }

    /// Disc centers (x, y) in pixels on the slice `slice_offset` steps from
    /// the mid slice.
    pub fn centers(&self, slice_offset: i32) -> [(f64, f64); 5] {
        let s = self.image_size as f64;
        let mid_y = template_center(DiscLevel::L3L4).1 * s;
        std::array::from_fn(|i| {
            let (tx, ty) = template_center(DiscLevel::ALL[i]);
            let lp = &self.levels[i];
            let y = mid_y + (ty * s - mid_y) * self.spacing_scale + self.shift.1 + lp.jitter.1;
            let x = tx * s + self.shift.0 + lp.jitter.0 + self.drift_per_slice * slice_offset as f64;
            (x, y)
        })
    }

    /// Baseline canal width at the given level's disc height, before any
    /// slice-offset fading.
    pub fn canal_width_at_level(&self, level: DiscLevel) -> f64 {
        self.canal_width * self.levels[level.index()].narrowing
    }
}

fn coverage(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

/// Linear interpolation of a per-level quantity along the spine, extended
/// flat beyond the outermost discs.
fn interp_along(ys: &[f64; 5], vals: &[f64; 5], y: f64) -> f64 {
    if y <= ys[0] {
        return vals[0];
    }
    for i in 0..4 {
        if y <= ys[i + 1] {
            let t = (y - ys[i]) / (ys[i + 1] - ys[i]);
            return vals[i] + t * (vals[i + 1] - vals[i]);
        }
    }
    vals[4]
}

/// Renders one slice and returns it with the rendered disc centers.
pub fn render_phantom_slice(
    params: &PatientParams,
    slice_offset: i32,
    rng: &mut PipelineRng,
) -> (SliceImage, [(f64, f64); 5]) {
    let n = params.image_size;
    let centers = params.centers(slice_offset);
    let half_span = (params.slices_per_series / 2 + 1) as f64;
    let off = slice_offset.unsigned_abs() as f64 / half_span;
    // Canal is a midline structure: it fades and thins away from the mid slice.
    let canal_fade = 1.0 - 0.7 * off;
    let lateral_shrink = (1.0 - 0.35 * off * off).sqrt();

    let ys = centers.map(|c| c.1);
    let disc_right = std::array::from_fn::<f64, 5, _>(|i| centers[i].0 + params.levels[i].semi_axes.0 * lateral_shrink);
    let body_half = std::array::from_fn::<f64, 5, _>(|i| params.levels[i].semi_axes.0 * 0.95);
    let canal_center =
        std::array::from_fn::<f64, 5, _>(|i| disc_right[i] + params.canal_gap + params.canal_width / 2.0);

    let noise = Normal::new(0.0, params.noise_std.max(0.0)).expect("finite std");
    let mut pixels = Array2::<u16>::zeros((n, n));
    for r in 0..n {
        let y = r as f64;
        let xc_canal = interp_along(&ys, &canal_center, y);
        let body_x = interp_along(&ys, &centers.map(|c| c.0), y);
        let body_hw = interp_along(&ys, &body_half, y) * lateral_shrink;
        let mut narrowing = 1.0f64;
        for (i, lp) in params.levels.iter().enumerate() {
            let sigma = 1.6 * lp.semi_axes.1;
            let d = (y - ys[i]) / sigma;
            narrowing -= (1.0 - lp.narrowing) * (-d * d).exp();
        }
        let half_w = 0.5 * params.canal_width * narrowing.max(0.05) * (0.6 + 0.4 * canal_fade);
        let spine_top = ys[0] - 0.09 * n as f64;
        let spine_bottom = ys[4] + 0.06 * n as f64;

        for c in 0..n {
            let x = c as f64;
            let mut v = params.background;

            // Vertebral bodies fill the column between discs.
            if y > spine_top && y < spine_bottom {
                let cov = coverage((x - body_x).abs() - body_hw);
                v += (params.body_intensity - v) * cov;
            }

            // Canal band.
            if y > spine_top - 0.05 * n as f64 && y < spine_bottom + 0.05 * n as f64 {
                let cov = coverage((x - xc_canal).abs() - half_w);
                v += (0.92 * canal_fade + 0.05 - v) * cov;
            }

            for (i, lp) in params.levels.iter().enumerate() {
                let (a, b) = (lp.semi_axes.0 * lateral_shrink, lp.semi_axes.1);
                let dx = (x - centers[i].0) / a;
                let dy = (y - ys[i]) / b;
                let rho = (dx * dx + dy * dy).sqrt();
                if rho < 1.5 {
                    let cov = coverage((rho - 1.0) * b.min(a));
                    v += (lp.disc_intensity - v) * cov;
                }
            }

            if params.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            let q = (v.clamp(0.0, 1.0) * params.gain).round();
            pixels[[r, c]] = q.clamp(0.0, 65535.0) as u16;
        }
    }
    (SliceImage::new(pixels).expect("non-empty"), centers)
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:04}")
}

/// Writes a full phantom dataset under `out_dir`: `images/<patient>/T2/<k>.pgm`
/// plus `manifest.csv` and its sidecar. Deterministic in `config`.
pub fn generate_phantom_dataset(config: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::new(Vec::new(), "images");
    manifest.base_dir = out_dir.to_path_buf();
    let base = derive_seed(config.seed, "phantom");
    let mid = config.mid_slice() as i32;

    for p in 0..config.n_patients {
        let mut rng = rng_from(derive_index(base, p as u64));
        let params = PatientParams::sample(config, &mut rng);
        let pid = patient_id(p);
        let mut mid_centers = None;
        for k in 0..config.slices_per_series {
            let offset = k as i32 - mid;
            let (img, centers) = render_phantom_slice(&params, offset, &mut rng);
            write_pgm16(&manifest.slice_path(&pid, SERIES_ID, k as u32), &img)?;
            if offset == 0 {
                mid_centers = Some(centers);
            }
        }
        let centers = mid_centers.expect("odd series has a mid slice");
        for level in DiscLevel::ALL {
            let (x, y) = centers[level.index()];
            manifest.records.push(Annotation {
                key: DiscKey::new(pid.clone(), SERIES_ID, level),
                slice_index: mid as u32,
                x,
                y,
                grade: params.levels[level.index()].grade,
            });
        }
    }
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn canal_run_length(img: &SliceImage, row: usize, from_col: usize, thresh: u16) -> usize {
        let px = img.pixels();
        let mut start = None;
        let mut len = 0;
        for c in from_col..img.width() {
            let bright = px[[row, c]] > thresh;
            match (start, bright) {
                (None, true) => {
                    start = Some(c);
                    len = 1;
                }
                (Some(_), true) => len += 1,
                (Some(_), false) => break,
                _ => {}
            }
        }
        len
    }

    #[test]
    fn template_patient_renders_at_template_centers() {
        let params = PatientParams::template(320, 9, [SeverityGrade::Normal; 5]);
        let (_, centers) = render_phantom_slice(&params, 0, &mut rng_from(1));
        for (i, level) in DiscLevel::ALL.iter().enumerate() {
            let (tx, ty) = template_center(*level);
            assert!((centers[i].0 - tx * 320.0).abs() < 1e-12);
            assert!((centers[i].1 - ty * 320.0).abs() < 1e-12);
        }
    }

    #[test]
    fn severe_canal_is_narrower_than_normal() {
        let mut grades = [SeverityGrade::Normal; 5];
        let normal = PatientParams::template(320, 9, grades);
        grades[2] = SeverityGrade::Severe;
        let severe = PatientParams::template(320, 9, grades);
        assert!(severe.canal_width_at_level(DiscLevel::L3L4) < normal.canal_width_at_level(DiscLevel::L3L4));

        let (img_n, c) = render_phantom_slice(&normal, 0, &mut rng_from(0));
        let (img_s, _) = render_phantom_slice(&severe, 0, &mut rng_from(0));
        let row = c[2].1.round() as usize;
        let from = (c[2].0 + normal.levels[2].semi_axes.0 + 2.0) as usize;
        let thr = (0.8 * normal.gain) as u16;
        let wn = canal_run_length(&img_n, row, from, thr);
        let ws = canal_run_length(&img_s, row, from, thr);
        assert!(ws < wn, "severe {ws} vs normal {wn}");
    }

    #[test]
    fn levels_are_vertically_ordered_on_every_slice() {
        let cfg = PhantomConfig {
            seed: 3,
            ..Default::default()
        };
        for p in 0..20 {
            let params = PatientParams::sample(&cfg, &mut rng_from(p));
            for off in -4..=4 {
                let c = params.centers(off);
                assert!(c.windows(2).all(|w| w[0].1 < w[1].1));
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_p = PhantomConfig {
            grade_probabilities: [0.5, 0.5, 0.1],
            ..Default::default()
        };
        assert!(bad_p.validate().is_err());
        let even = PhantomConfig {
            slices_per_series: 8,
            ..Default::default()
        };
        assert!(even.validate().is_err());
        let short = PhantomConfig {
            slices_per_series: 1,
            ..Default::default()
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn two_patients_give_ten_discs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            n_patients: 2,
            slices_per_series: 3,
            image_size: 128,
            ..Default::default()
        };
        let m = generate_phantom_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.records.len(), 10);
        assert_eq!(m.disc_keys().len(), 10);
        assert!(crate::data_model::validate_manifest(&m).is_empty());
    }
}
