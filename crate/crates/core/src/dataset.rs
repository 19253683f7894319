//! In-memory training data built from a manifest: one ROI patch per disc for
//! grading, and 2.5D slice stacks with normalized targets for localization.

use std::collections::HashMap;

use ndarray::{Array2, Array3};

use crate::data_model::{Annotation, DatasetManifest, DiscKey, DiscLevel, SeverityGrade, SliceImage};
use crate::error::{Error, Result};
use crate::imageio::read_pgm16;
use crate::nn::Tensor;
use crate::preprocess::{extract_roi_at, normalize_intensity, stack_2p5d, standardize_for_model, PreprocessConfig};

/// Reads each slice file at most once.
pub struct SliceCache<'a> {
    manifest: &'a DatasetManifest,
    slices: HashMap<(String, String, u32), SliceImage>,
}

impl<'a> SliceCache<'a> {
    pub fn new(manifest: &'a DatasetManifest) -> Self {
        SliceCache {
            manifest,
            slices: HashMap::new(),
        }
    }

    pub fn get(&mut self, patient: &str, series: &str, index: u32) -> Result<&SliceImage> {
        let key = (patient.to_string(), series.to_string(), index);
        if !self.slices.contains_key(&key) {
            let img = read_pgm16(&self.manifest.slice_path(patient, series, index))?;
            self.slices.insert(key.clone(), img);
        }
        Ok(&self.slices[&key])
    }

    pub fn exists(&self, patient: &str, series: &str, index: u32) -> bool {
        self.slices
            .contains_key(&(patient.to_string(), series.to_string(), index))
            || self.manifest.slice_path(patient, series, index).is_file()
    }
}

/// A disc's representative ROI, normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct DiscSample {
    pub key: DiscKey,
    pub grade: SeverityGrade,
    pub annotation: Annotation,
    pub center: (f64, f64),
    pub patch: Array2<f32>,
}

fn representative<'m>(manifest: &'m DatasetManifest, key: &DiscKey) -> Result<&'m Annotation> {
    manifest
        .representative(key)
        .ok_or_else(|| Error::Data(format!("disc {key} is not in the manifest")))
}

/// ROIs cropped at the annotated centers, or at `centers` where given.
pub fn load_disc_samples(
    manifest: &DatasetManifest,
    keys: &[DiscKey],
    cfg: &PreprocessConfig,
    centers: Option<&HashMap<DiscKey, (f64, f64)>>,
) -> Result<Vec<DiscSample>> {
    let mut cache = SliceCache::new(manifest);
    keys.iter()
        .map(|key| {
            let ann = representative(manifest, key)?;
            let center = centers.and_then(|c| c.get(key).copied()).unwrap_or((ann.x, ann.y));
            let slice = cache.get(&key.patient_id, &key.series_id, ann.slice_index)?;
            let roi = extract_roi_at(slice, ann, center, cfg)?;
            Ok(DiscSample {
                key: key.clone(),
                grade: ann.grade,
                annotation: ann.clone(),
                center,
                patch: roi.to_float(),
            })
        })
        .collect()
}

/// Model-ready input for one patch.
pub fn model_input(patch: &Array2<f32>, cfg: &PreprocessConfig, size: usize) -> Array2<f32> {
    standardize_for_model(patch, size, cfg.channel_mean, cfg.channel_std)
}

/// Stacks equally sized single-channel images into (N, 1, H, W).
pub fn image_batch(images: &[Array2<f32>]) -> Tensor {
    let (h, w) = images.first().map(|a| a.dim()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert_eq!(img.dim(), (h, w));
        data.extend(img.iter().copied());
    }
    Tensor::from_vec(&[images.len(), 1, h, w], data)
}

/// One localization target. `stack` indexes [`RoiData::stacks`].
#[derive(Debug, Clone)]
pub struct RoiSample {
    pub key: DiscKey,
    pub level: DiscLevel,
    pub stack: usize,
    pub target_norm: (f64, f64),
    pub target_px: (f64, f64),
    pub width: usize,
    pub height: usize,
}

/// 2.5D stacks are shared by every disc annotated on the same slice.
#[derive(Debug, Clone)]
pub struct RoiData {
    pub stacks: Vec<Array3<f32>>,
    pub samples: Vec<RoiSample>,
}

impl RoiData {
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<DiscLevel>) {
        let (c, h, w) = self.stacks[0].dim();
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            data.extend(self.stacks[self.samples[i].stack].iter().copied());
        }
        let levels = idx.iter().map(|&i| self.samples[i].level).collect();
        (Tensor::from_vec(&[idx.len(), c, h, w], data), levels)
    }
}

/// Slice window (i-1, i, i+1) normalized, stacked, resized and standardized.
/// Missing neighbours are replaced by the edge slice.
pub fn load_stack(
    cache: &mut SliceCache,
    ann: &Annotation,
    cfg: &PreprocessConfig,
) -> Result<(Array3<f32>, usize, usize)> {
    let (p, s, i) = (&ann.key.patient_id, &ann.key.series_id, ann.slice_index);
    let lo = if i > 0 && cache.exists(p, s, i - 1) { i - 1 } else { i };
    let hi = if cache.exists(p, s, i + 1) { i + 1 } else { i };
    let mut series = Vec::new();
    for k in lo..=hi {
        series.push(normalize_intensity(cache.get(p, s, k)?));
    }
    let (h, w) = series[(i - lo) as usize].dim();
    let stack = stack_2p5d(&series, (i - lo) as usize)?;
    let size = cfg.regression_input_size;
    let mut out = Array3::zeros((3, size, size));
    for c in 0..3 {
        let ch = standardize_for_model(
            &stack.index_axis(ndarray::Axis(0), c).to_owned(),
            size,
            cfg.channel_mean,
            cfg.channel_std,
        );
        out.index_axis_mut(ndarray::Axis(0), c).assign(&ch);
    }
    Ok((out, h, w))
}

pub fn load_roi_data(manifest: &DatasetManifest, keys: &[DiscKey], cfg: &PreprocessConfig) -> Result<RoiData> {
    let mut cache = SliceCache::new(manifest);
    let mut stack_of: HashMap<(String, String, u32), (usize, usize, usize)> = HashMap::new();
    let mut data = RoiData {
        stacks: Vec::new(),
        samples: Vec::new(),
    };
    for key in keys {
        let ann = representative(manifest, key)?;
        let sk = (key.patient_id.clone(), key.series_id.clone(), ann.slice_index);
        let (stack, h, w) = match stack_of.get(&sk) {
            Some(&v) => v,
            None => {
                let (st, h, w) = load_stack(&mut cache, ann, cfg)?;
                data.stacks.push(st);
                let v = (data.stacks.len() - 1, h, w);
                stack_of.insert(sk, v);
                v
            }
        };
        data.samples.push(RoiSample {
            key: key.clone(),
            level: key.level,
            stack,
            target_norm: (ann.x / w as f64, ann.y / h as f64),
            target_px: (ann.x, ann.y),
            width: w,
            height: h,
        });
    }
    Ok(data)
}
