//! Slice standardization and coordinate-guided ROI extraction:
//! normalize → pad → crop → 8-bit export → resize and standardize for a model.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data_model::{Annotation, DiscKey, PatchPixels, RoiPatch, SliceImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub roi_size: usize,
    pub pad_width: usize,
    pub pad_value: f32,
    pub model_input_size: usize,
    pub regression_input_size: usize,
    pub channel_mean: f32,
    pub channel_std: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            roi_size: 96,
            pad_width: 48,
            pad_value: 0.0,
            model_input_size: 224,
            regression_input_size: 256,
            channel_mean: 0.5,
            channel_std: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roi_size == 0 || self.roi_size % 2 != 0 {
            return Err(Error::Config(format!(
                "roi_size must be even and positive, got {}",
                self.roi_size
            )));
        }
        if self.pad_width < self.roi_size / 2 {
            return Err(Error::Config(format!(
                "pad_width {} must be at least roi_size/2 = {}",
                self.pad_width,
                self.roi_size / 2
            )));
        }
        if !(self.channel_std > 0.0) {
            return Err(Error::Config("channel_std must be positive".into()));
        }
        if self.model_input_size == 0 || self.regression_input_size == 0 {
            return Err(Error::Config("model input sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Rounds half away from zero toward +inf (`floor(v + 0.5)`), the single
/// rounding rule used for coordinates and quantization.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Min-max normalization of raw intensities to [0, 1]; constant slices map to 0.
pub fn normalize_intensity(slice: &SliceImage) -> Array2<f32> {
    let px = slice.pixels();
    let min = *px.iter().min().expect("non-empty") as f64;
    let max = *px.iter().max().expect("non-empty") as f64;
    if max <= min {
        return Array2::zeros(px.dim());
    }
    let span = max - min;
    px.mapv(|v| ((v as f64 - min) / span) as f32)
}

/// Same min-max rule applied to an already floating-point image.
pub fn normalize_float(img: &Array2<f32>) -> Array2<f32> {
    let (min, max) = img.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !(max > min) {
        return Array2::zeros(img.dim());
    }
    let span = (max - min) as f64;
    img.mapv(|v| ((v - min) as f64 / span) as f32)
}

pub fn pad_constant(img: &Array2<f32>, pad: usize, value: f32) -> Array2<f32> {
    let (h, w) = img.dim();
    let mut out = Array2::from_elem((h + 2 * pad, w + 2 * pad), value);
    out.slice_mut(ndarray::s![pad..pad + h, pad..pad + w]).assign(img);
    out
}

/// Top-left corner (row, col) of a `roi_size` window centered on `center_xy`.
pub fn crop_origin(center_xy: (f64, f64), roi_size: usize) -> (i64, i64) {
    let half = (roi_size / 2) as i64;
    (round_half_up(center_xy.1) - half, round_half_up(center_xy.0) - half)
}

/// Extracts a square window centered on `center_xy` (padded-image pixels).
pub fn crop_roi(
    img: &Array2<f32>,
    center_xy: (f64, f64),
    roi_size: usize,
    key: DiscKey,
    slice_index: u32,
) -> Result<RoiPatch> {
    let (h, w) = img.dim();
    let (r0, c0) = crop_origin(center_xy, roi_size);
    let fits = r0 >= 0 && c0 >= 0 && r0 as usize + roi_size <= h && c0 as usize + roi_size <= w;
    if !fits || !center_xy.0.is_finite() || !center_xy.1.is_finite() {
        return Err(Error::Geometry(format!(
            "{roi_size}x{roi_size} crop centered at ({:.2}, {:.2}) does not fit a {h}x{w} image",
            center_xy.0, center_xy.1
        )));
    }
    let (r0u, c0u) = (r0 as usize, c0 as usize);
    let patch = img
        .slice(ndarray::s![r0u..r0u + roi_size, c0u..c0u + roi_size])
        .to_owned();
    Ok(RoiPatch {
        pixels: PatchPixels::Float(patch),
        size: roi_size,
        key,
        slice_index,
        crop_origin: (r0, c0),
    })
}

pub fn quantize_u8(v: f32) -> u8 {
    round_half_up(v.clamp(0.0, 1.0) as f64 * 255.0) as u8
}

pub fn to_uint8(img: &Array2<f32>) -> Array2<u8> {
    img.mapv(quantize_u8)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|c| axis(c, sx, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (y0, y1, fy) = axis(r, sy, h);
        let (x0, x1, fx) = cols[c];
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Resize to `size`×`size` then apply `(x - mean) / std`.
pub fn standardize_for_model(patch: &Array2<f32>, size: usize, mean: f32, std: f32) -> Array2<f32> {
    resize_bilinear(patch, size, size).mapv(|v| (v - mean) / std)
}

/// Stacks slices (i-1, i, i+1) of a series as channels, duplicating the edge
/// slice at series boundaries.
pub fn stack_2p5d(series: &[Array2<f32>], index: usize) -> Result<Array3<f32>> {
    if series.is_empty() {
        return Err(Error::Data("2.5D stacking needs at least one slice".into()));
    }
    if index >= series.len() {
        return Err(Error::Data(format!(
            "slice {index} outside a {}-slice series",
            series.len()
        )));
    }
    let dim = series[index].dim();
    if series.iter().any(|s| s.dim() != dim) {
        return Err(Error::Data("2.5D stacking needs equally shaped slices".into()));
    }
    let idx = stack_indices(series.len(), index);
    let views: Vec<_> = idx.iter().map(|&i| series[i].view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("equal shapes"))
}

/// Channel source indices used by [`stack_2p5d`].
pub fn stack_indices(len: usize, index: usize) -> [usize; 3] {
    [index.saturating_sub(1), index, (index + 1).min(len - 1)]
}

/// Full chain for one annotation: normalize, pad, crop at the annotated
/// center and quantize to 8 bits.
pub fn extract_roi(slice: &SliceImage, ann: &Annotation, cfg: &PreprocessConfig) -> Result<RoiPatch> {
    extract_roi_at(slice, ann, (ann.x, ann.y), cfg)
}

/// As [`extract_roi`] but centered on an arbitrary (e.g. predicted) source-slice
/// coordinate.
pub fn extract_roi_at(
    slice: &SliceImage,
    ann: &Annotation,
    center_xy: (f64, f64),
    cfg: &PreprocessConfig,
) -> Result<RoiPatch> {
    let norm = normalize_intensity(slice);
    let padded = pad_constant(&norm, cfg.pad_width, cfg.pad_value);
    let pad = cfg.pad_width as f64;
    let mut roi = crop_roi(
        &padded,
        (center_xy.0 + pad, center_xy.1 + pad),
        cfg.roi_size,
        ann.key.clone(),
        ann.slice_index,
    )?;
    if let PatchPixels::Float(p) = &roi.pixels {
        roi.pixels = PatchPixels::Byte(to_uint8(p));
    }
    Ok(roi)
}
