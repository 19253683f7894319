//! Report bundle: metrics JSON, confusion CSV, per-stage histories and PNG
//! plots. Plots are plain rasters without text; the numbers behind every
//! curve are written next to them as CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::data_model::{DiscLevel, SliceImage};
use crate::error::{Error, Result};
use crate::evaluation::{ConfusionMatrix3, GradeMetrics};
use crate::preprocess::{normalize_intensity, to_uint8};
use crate::training::TrainHistory;

/// Smoothing factor of the recall overlays.
pub const RECALL_EMA: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMetrics {
    pub n: usize,
    /// Per-coordinate RMSE in source pixels.
    pub coordinate_rmse: f64,
    /// RMS Euclidean distance in source pixels.
    pub euclidean_rmse: f64,
}

/// Content of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub partition: String,
    /// Classification with crops at the annotated centers.
    pub ground_truth_coords: Option<GradeMetrics>,
    /// Classification with crops at regressor-predicted centers.
    pub predicted_coords: Option<GradeMetrics>,
    pub linear_probe: Option<GradeMetrics>,
    pub majority_baseline: Option<GradeMetrics>,
    pub localization: Option<LocalizationMetrics>,
    /// Selected epoch per stage.
    pub best_epochs: BTreeMap<String, usize>,
}

impl MetricsReport {
    pub fn new(partition: &str) -> Self {
        MetricsReport {
            partition: partition.into(),
            ground_truth_coords: None,
            predicted_coords: None,
            linear_probe: None,
            majority_baseline: None,
            localization: None,
            best_epochs: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("metrics serialize");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix3) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["true\\pred", "normal", "moderate", "severe"])
        .map_err(err)?;
    for (t, name) in ["normal", "moderate", "severe"].iter().enumerate() {
        let row: Vec<String> = std::iter::once(name.to_string())
            .chain(cm.counts[t].iter().map(|c| c.to_string()))
            .collect();
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `s_0 = x_0`, `s_t = f·s_{t-1} + (1-f)·x_t`. Missing values hold the
/// previous smoothed value.
pub fn ema(values: &[Option<f64>], factor: f64) -> Vec<Option<f64>> {
    let mut s: Option<f64> = None;
    values
        .iter()
        .map(|v| {
            if let Some(x) = v {
                s = Some(match s {
                    None => *x,
                    Some(p) => factor * p + (1.0 - factor) * x,
                });
            }
            s
        })
        .collect()
}

// --- raster plotting -------------------------------------------------------

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const PALETTE: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
];

fn lighten(c: Rgb<u8>) -> Rgb<u8> {
    Rgb(c.0.map(|v| ((v as u16 + 2 * 255) / 3) as u8))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>, thick: i64) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = ((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64);
        for dy in -thick / 2..=thick / 2 {
            for dx in -thick / 2..=thick / 2 {
                put(img, x + dx, y + dy, c);
            }
        }
    }
}

pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: Rgb<u8>,
    pub thick: i64,
}

/// Line chart with light gridlines at tenths of the data range.
pub fn line_chart(series: &[Series], log_y: bool) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let tf = |y: f64| if log_y { y.max(1e-12).log10() } else { y };
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(tf(y));
        y1 = y1.max(tf(y));
    }
    if !x0.is_finite() {
        return img;
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (pw, ph) = ((W - 2 * MARGIN) as f64, (H - 2 * MARGIN) as f64);
    let map = |x: f64, y: f64| {
        (
            MARGIN as f64 + (x - x0) / (x1 - x0) * pw,
            MARGIN as f64 + (1.0 - (tf(y) - y0) / (y1 - y0)) * ph,
        )
    };
    for k in 0..=10 {
        let gy = MARGIN as f64 + k as f64 * ph / 10.0;
        line(&mut img, (MARGIN as f64, gy), (MARGIN as f64 + pw, gy), GRID, 1);
        let gx = MARGIN as f64 + k as f64 * pw / 10.0;
        line(&mut img, (gx, MARGIN as f64), (gx, MARGIN as f64 + ph), GRID, 1);
    }
    let (l, b) = (MARGIN as f64, MARGIN as f64 + ph);
    line(&mut img, (l, MARGIN as f64), (l, b), BLACK, 1);
    line(&mut img, (l, b), (l + pw, b), BLACK, 1);
    for s in series {
        let p: Vec<_> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| map(x, y))
            .collect();
        for w in p.windows(2) {
            line(&mut img, w[0], w[1], s.color, s.thick);
        }
        if p.len() == 1 {
            line(&mut img, p[0], p[0], s.color, s.thick + 2);
        }
    }
    img
}

/// Blue-scale heatmap, one cell per count, normalized per true-grade row.
pub fn confusion_heatmap(cm: &ConfusionMatrix3) -> RgbImage {
    let cell = 100u32;
    let mut img = RgbImage::from_pixel(cell * 3 + 2, cell * 3 + 2, BLACK);
    for t in 0..3 {
        let row = cm.row_sum(t).max(1) as f64;
        for p in 0..3 {
            let f = cm.counts[t][p] as f64 / row;
            let c = Rgb([(255.0 * (1.0 - f)) as u8, (255.0 * (1.0 - 0.7 * f)) as u8, 255]);
            for y in 0..cell - 2 {
                for x in 0..cell - 2 {
                    img.put_pixel(2 + p as u32 * cell + x, 2 + t as u32 * cell + y, c);
                }
            }
        }
    }
    img
}

/// Slice with a green circle at each ground-truth center and a red cross at
/// each prediction.
pub fn localization_overlay(slice: &SliceImage, marks: &[(DiscLevel, (f64, f64), (f64, f64))]) -> RgbImage {
    let gray = to_uint8(&normalize_intensity(slice));
    let (h, w) = gray.dim();
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = gray[[y as usize, x as usize]];
        Rgb([v, v, v])
    });
    let r = (w.min(h) as f64 / 64.0).max(3.0);
    for &(_, truth, pred) in marks {
        let steps = (2.0 * std::f64::consts::PI * r * 2.0) as usize;
        for i in 0..steps {
            let a = i as f64 / steps as f64 * 2.0 * std::f64::consts::PI;
            put(
                &mut img,
                (truth.0 + r * a.cos()).round() as i64,
                (truth.1 + r * a.sin()).round() as i64,
                Rgb([0, 220, 0]),
            );
        }
        line(
            &mut img,
            (pred.0 - r, pred.1 - r),
            (pred.0 + r, pred.1 + r),
            Rgb([230, 0, 0]),
            1,
        );
        line(
            &mut img,
            (pred.0 - r, pred.1 + r),
            (pred.0 + r, pred.1 - r),
            Rgb([230, 0, 0]),
            1,
        );
    }
    img
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

fn epochs_of(h: &TrainHistory, f: impl Fn(&crate::training::EpochRecord) -> Option<f64>) -> Vec<(f64, f64)> {
    h.records
        .iter()
        .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
        .collect()
}

/// One localization overlay: the slice plus (level, truth, prediction) per disc.
pub struct Overlay {
    pub name: String,
    pub slice: SliceImage,
    pub marks: Vec<(DiscLevel, (f64, f64), (f64, f64))>,
}

/// Writes the report bundle into `out_dir` and returns the files written.
pub fn emit_report(
    histories: &[(Stage, TrainHistory)],
    metrics: Option<&MetricsReport>,
    overlays: &[Overlay],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if histories.is_empty() && metrics.is_none() {
        return Err(Error::Config("nothing to report: no completed stage found".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut emit = |img: RgbImage, name: &str| -> Result<()> {
        let p = out_dir.join(name);
        save_png(&img, &p)?;
        written.push(p);
        Ok(())
    };

    for (stage, h) in histories {
        let s = stage.as_str();
        let p = out_dir.join(format!("{s}_history.csv"));
        h.write_csv(&p)?;
        let loss = [
            Series {
                points: epochs_of(h, |r| Some(r.train_loss)),
                color: PALETTE[0],
                thick: 2,
            },
            Series {
                points: epochs_of(h, |r| r.val_loss),
                color: PALETTE[1],
                thick: 2,
            },
        ];
        emit(line_chart(&loss, false), &format!("{s}_loss.png"))?;
        let mut lr = vec![Series {
            points: epochs_of(h, |r| Some(r.lr)),
            color: PALETTE[0],
            thick: 2,
        }];
        if h.records.iter().any(|r| r.head_lr.is_some()) {
            lr.push(Series {
                points: epochs_of(h, |r| r.head_lr),
                color: PALETTE[1],
                thick: 2,
            });
        }
        emit(line_chart(&lr, true), &format!("{s}_lr.png"))?;

        if *stage == Stage::Finetune {
            let ba = [Series {
                points: epochs_of(h, |r| r.val_balanced_accuracy),
                color: PALETTE[0],
                thick: 2,
            }];
            emit(line_chart(&ba, false), "finetune_balanced_accuracy.png")?;
            let mut series = Vec::new();
            let mut table: Vec<Vec<String>> = h.records.iter().map(|r| vec![r.epoch.to_string()]).collect();
            for g in 0..3 {
                let raw: Vec<Option<f64>> = h.records.iter().map(|r| r.recall()[g]).collect();
                let smooth = ema(&raw, RECALL_EMA);
                let pts = |v: &[Option<f64>]| -> Vec<(f64, f64)> {
                    h.records
                        .iter()
                        .zip(v)
                        .filter_map(|(r, x)| x.map(|x| (r.epoch as f64, x)))
                        .collect()
                };
                series.push(Series {
                    points: pts(&raw),
                    color: lighten(PALETTE[g]),
                    thick: 1,
                });
                series.push(Series {
                    points: pts(&smooth),
                    color: PALETTE[g],
                    thick: 2,
                });
                for (row, (a, b)) in table.iter_mut().zip(raw.iter().zip(&smooth)) {
                    row.push(a.map(|v| v.to_string()).unwrap_or_default());
                    row.push(b.map(|v| v.to_string()).unwrap_or_default());
                }
            }
            emit(line_chart(&series, false), "finetune_recall.png")?;
            let p = out_dir.join("finetune_recall.csv");
            let mut w = csv::Writer::from_path(&p).map_err(|e| Error::format(&p, e.to_string()))?;
            let head = [
                "epoch",
                "normal",
                "normal_ema",
                "moderate",
                "moderate_ema",
                "severe",
                "severe_ema",
            ];
            w.write_record(head).map_err(|e| Error::format(&p, e.to_string()))?;
            for row in table {
                w.write_record(&row).map_err(|e| Error::format(&p, e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
    }

    if let Some(m) = metrics {
        m.save(&out_dir.join("metrics.json"))?;
        if let Some(g) = m.ground_truth_coords.as_ref().or(m.predicted_coords.as_ref()) {
            write_confusion_csv(&out_dir.join("confusion.csv"), &g.confusion)?;
            emit(confusion_heatmap(&g.confusion), "confusion.png")?;
        }
    }
    for o in overlays {
        emit(
            localization_overlay(&o.slice, &o.marks),
            &format!("localization_{}.png", o.name),
        )?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_matches_hand_trace() {
        let s = ema(&[Some(1.0), Some(0.0), None, Some(0.0)], 0.8);
        assert_eq!(s[0], Some(1.0));
        assert!((s[1].unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(s[2], s[1]);
        assert!((s[3].unwrap() - 0.64).abs() < 1e-12);
        assert_eq!(ema(&[None, Some(2.0)], 0.8), vec![None, Some(2.0)]);
    }

    #[test]
    fn chart_draws_series_color() {
        let img = line_chart(
            &[Series {
                points: vec![(0.0, 0.0), (1.0, 1.0)],
                color: PALETTE[3],
                thick: 2,
            }],
            false,
        );
        assert!(img.pixels().any(|p| *p == PALETTE[3]));
    }
}
