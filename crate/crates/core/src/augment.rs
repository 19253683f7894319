//! Stochastic views for contrastive pretraining.
//!
//! Transform order is fixed: random resized crop, horizontal flip, rotation
//! (bilinear, reflect fill), then brightness/contrast jitter. Saturation
//! jitter is omitted since it has no effect on single-channel images.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::PipelineRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    /// Range of the crop's area as a fraction of the input area.
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    pub rotation_deg: (f64, f64),
    /// Additive brightness shift range, in input units.
    pub brightness_jitter: (f64, f64),
    /// Multiplicative contrast factor range around the image mean.
    pub contrast_jitter: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            crop_scale: (0.8, 1.0),
            hflip_prob: 0.5,
            rotation_deg: (-15.0, 15.0),
            brightness_jitter: (-0.2, 0.2),
            contrast_jitter: (0.8, 1.2),
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..Default::default()
        }
    }

    /// Policy whose every transform is degenerate.
    pub fn degenerate() -> Self {
        AugmentPolicy {
            enabled: true,
            crop_scale: (1.0, 1.0),
            hflip_prob: 0.0,
            rotation_deg: (0.0, 0.0),
            brightness_jitter: (0.0, 0.0),
            contrast_jitter: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let ok = ordered(self.crop_scale)
            && self.crop_scale.0 > 0.0
            && self.crop_scale.1 <= 1.0
            && ordered(self.rotation_deg)
            && ordered(self.brightness_jitter)
            && ordered(self.contrast_jitter)
            && self.contrast_jitter.0 >= 0.0
            && (0.0..=1.0).contains(&self.hflip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation policy {self:?}")))
        }
    }
}

fn draw(rng: &mut PipelineRng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn reflect(i: f64, len: usize) -> f64 {
    // Half-sample symmetric reflection into [0, len - 1].
    let max = (len - 1) as f64;
    if max == 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let mut v = i.rem_euclid(period);
    if v > max {
        v = period - v;
    }
    v
}

fn sample_bilinear(img: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    let y = reflect(y, h);
    let x = reflect(x, w);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// One augmented draw. Output has the input's shape.
pub fn augment_view(patch: &Array2<f32>, policy: &AugmentPolicy, rng: &mut PipelineRng) -> Array2<f32> {
    if !policy.enabled {
        return patch.clone();
    }
    let (h, w) = patch.dim();
    assert_eq!(h, w, "augment_view expects a square input");
    let n = h as f64;

    // Parameters are drawn in a fixed order regardless of which are degenerate.
    let scale = draw(rng, policy.crop_scale);
    let side = n * scale.sqrt();
    let off_y = draw(rng, (0.0, n - side));
    let off_x = draw(rng, (0.0, n - side));
    let flip = policy.hflip_prob > 0.0 && rng.random_bool(policy.hflip_prob);
    let angle = draw(rng, policy.rotation_deg).to_radians();
    let brightness = draw(rng, policy.brightness_jitter) as f32;
    let contrast = draw(rng, policy.contrast_jitter) as f32;

    let identity_geom = side == n && !flip && angle == 0.0;
    let mut out = if identity_geom {
        patch.clone()
    } else {
        let k = side / n;
        let (sin, cos) = angle.sin_cos();
        let c = (n - 1.0) / 2.0;
        Array2::from_shape_fn((h, w), |(r, col)| {
            // Inverse map: output pixel -> rotated frame -> flipped -> crop -> source.
            let (dy, dx) = (r as f64 - c, col as f64 - c);
            let ry = c + sin * dx + cos * dy;
            let mut rx = c + cos * dx - sin * dy;
            if flip {
                rx = n - 1.0 - rx;
            }
            let sy = off_y + (ry + 0.5) * k - 0.5;
            let sx = off_x + (rx + 0.5) * k - 0.5;
            sample_bilinear(patch, sy, sx)
        })
    };

    if brightness != 0.0 || contrast != 1.0 {
        let mean = out.sum() / out.len() as f32;
        out.mapv_inplace(|v| (v - mean) * contrast + mean + brightness);
    }
    out
}

/// `views` independent draws of one patch, all tagged with `group_id`.
pub fn make_contrastive_views(
    patch: &Array2<f32>,
    views: usize,
    policy: &AugmentPolicy,
    group_id: usize,
    rng: &mut PipelineRng,
) -> Result<(Vec<Array2<f32>>, usize)> {
    if views < 2 {
        return Err(Error::Config(format!(
            "contrastive views must be at least 2 (got {views}); a group needs a positive"
        )));
    }
    let out = (0..views).map(|_| augment_view(patch, policy, rng)).collect();
    Ok((out, group_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn pattern(n: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, n), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 10.0 - 0.5)
    }

    #[test]
    fn disabled_and_degenerate_policies_are_identity() {
        let p = pattern(16);
        assert_eq!(augment_view(&p, &AugmentPolicy::disabled(), &mut rng_from(1)), p);
        assert_eq!(augment_view(&p, &AugmentPolicy::degenerate(), &mut rng_from(1)), p);
    }

    #[test]
    fn same_seed_same_view() {
        let p = pattern(24);
        let pol = AugmentPolicy::default();
        assert_eq!(
            augment_view(&p, &pol, &mut rng_from(5)),
            augment_view(&p, &pol, &mut rng_from(5))
        );
    }

    #[test]
    fn flip_only_mirrors_columns() {
        let p = pattern(10);
        let pol = AugmentPolicy {
            hflip_prob: 1.0,
            ..AugmentPolicy::degenerate()
        };
        let out = augment_view(&p, &pol, &mut rng_from(0));
        for r in 0..10 {
            for c in 0..10 {
                assert!((out[[r, c]] - p[[r, 9 - c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn view_count_and_group() {
        let p = pattern(12);
        let (views, g) = make_contrastive_views(&p, 3, &AugmentPolicy::default(), 42, &mut rng_from(2)).unwrap();
        assert_eq!(views.len(), 3);
        assert_eq!(g, 42);
        assert!(views.iter().all(|v| v.dim() == (12, 12)));
        let (two, _) = make_contrastive_views(&p, 2, &AugmentPolicy::disabled(), 0, &mut rng_from(2)).unwrap();
        assert_eq!(two[0], two[1]);
        assert!(make_contrastive_views(&p, 1, &AugmentPolicy::default(), 0, &mut rng_from(2)).is_err());
    }

    #[test]
    fn default_policy_views_differ() {
        let p = pattern(32);
        let mut rng = rng_from(11);
        let mut identical = 0;
        for _ in 0..100 {
            let (v, _) = make_contrastive_views(&p, 2, &AugmentPolicy::default(), 0, &mut rng).unwrap();
            if v[0] == v[1] {
                identical += 1;
            }
        }
        assert_eq!(identical, 0);
    }

    #[test]
    fn reflect_stays_in_range() {
        for i in -30..30 {
            let v = reflect(i as f64 * 0.7, 8);
            assert!((0.0..=7.0).contains(&v));
        }
        assert_eq!(reflect(-1.0, 8), 1.0);
        assert_eq!(reflect(8.0, 8), 6.0);
    }
}
