//! Domain types shared by every pipeline stage, plus the on-disk manifest
//! format (annotation CSV with a JSON sidecar).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_HEADER: [&str; 7] = ["patient_id", "series_id", "level", "slice_index", "x", "y", "grade"];

/// Three-point ordinal stenosis grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SeverityGrade {
    Normal = 0,
    Moderate = 1,
    Severe = 2,
}

impl SeverityGrade {
    pub const ALL: [SeverityGrade; 3] = [SeverityGrade::Normal, SeverityGrade::Moderate, SeverityGrade::Severe];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SeverityGrade::Normal => "normal",
            SeverityGrade::Moderate => "moderate",
            SeverityGrade::Severe => "severe",
        }
    }
}

impl fmt::Display for SeverityGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeverityGrade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(SeverityGrade::Normal),
            "moderate" => Ok(SeverityGrade::Moderate),
            "severe" => Ok(SeverityGrade::Severe),
            other => Err(Error::Data(format!("unknown severity grade {other:?}"))),
        }
    }
}

impl Serialize for SeverityGrade {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SeverityGrade {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Intervertebral disc level, cranial to caudal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiscLevel {
    L1L2 = 0,
    L2L3 = 1,
    L3L4 = 2,
    L4L5 = 3,
    L5S1 = 4,
}

impl DiscLevel {
    pub const ALL: [DiscLevel; 5] = [
        DiscLevel::L1L2,
        DiscLevel::L2L3,
        DiscLevel::L3L4,
        DiscLevel::L4L5,
        DiscLevel::L5S1,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DiscLevel::L1L2 => "L1/L2",
            DiscLevel::L2L3 => "L2/L3",
            DiscLevel::L3L4 => "L3/L4",
            DiscLevel::L4L5 => "L4/L5",
            DiscLevel::L5S1 => "L5/S1",
        }
    }
}

impl fmt::Display for DiscLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DiscLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "L1L2" => Ok(DiscLevel::L1L2),
            "L2L3" => Ok(DiscLevel::L2L3),
            "L3L4" => Ok(DiscLevel::L3L4),
            "L4L5" => Ok(DiscLevel::L4L5),
            "L5S1" => Ok(DiscLevel::L5S1),
            _ => Err(Error::Data(format!("unknown disc level {s:?}"))),
        }
    }
}

impl Serialize for DiscLevel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for DiscLevel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Identity of one intervertebral disc: the atomic unit of splitting and
/// evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DiscKey {
    pub patient_id: String,
    pub series_id: String,
    pub level: DiscLevel,
}

impl DiscKey {
    pub fn new(patient_id: impl Into<String>, series_id: impl Into<String>, level: DiscLevel) -> Self {
        DiscKey {
            patient_id: patient_id.into(),
            series_id: series_id.into(),
            level,
        }
    }
}

impl fmt::Display for DiscKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.patient_id, self.series_id, self.level)
    }
}

/// Ground-truth disc center on one slice, in source-slice pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub key: DiscKey,
    pub slice_index: u32,
    /// Column.
    pub x: f64,
    /// Row.
    pub y: f64,
    pub grade: SeverityGrade,
}

/// Raw 16-bit single-channel slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pixels: Array2<u16>,
}

impl SliceImage {
    pub fn new(pixels: Array2<u16>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::Data(format!("empty slice image ({h}x{w})")));
        }
        Ok(SliceImage { pixels })
    }

    pub fn pixels(&self) -> &Array2<u16> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Processing stage a patch belongs to.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchPixels {
    /// Normalized intensities in [0, 1].
    Float(Array2<f32>),
    /// Exported 8-bit intensities.
    Byte(Array2<u8>),
}

/// Square crop centered on a disc.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPatch {
    pub pixels: PatchPixels,
    pub size: usize,
    pub key: DiscKey,
    pub slice_index: u32,
    /// (row, col) of the patch's top-left corner in padded-image coordinates.
    pub crop_origin: (i64, i64),
}

impl RoiPatch {
    /// Float view of the patch in [0, 1], converting 8-bit data if needed.
    pub fn to_float(&self) -> Array2<f32> {
        match &self.pixels {
            PatchPixels::Float(a) => a.clone(),
            PatchPixels::Byte(a) => a.mapv(|v| v as f32 / 255.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestSidecar {
    image_root: PathBuf,
    format_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    patient_id: String,
    series_id: String,
    level: DiscLevel,
    slice_index: u32,
    x: f64,
    y: f64,
    grade: SeverityGrade,
}

/// Annotation table plus the root directory its images live under.
///
/// Images are found at `<image_root>/<patient_id>/<series_id>/<slice_index:03>.pgm`.
/// A relative `image_root` is resolved against the directory holding the
/// manifest CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<Annotation>,
    pub image_root: PathBuf,
    pub format_version: u32,
    /// Directory the manifest was loaded from; used to resolve a relative
    /// `image_root`. Not serialized.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<Annotation>, image_root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            records,
            image_root: image_root.into(),
            format_version: MANIFEST_FORMAT_VERSION,
            base_dir: PathBuf::new(),
        }
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    pub fn resolved_image_root(&self) -> PathBuf {
        if self.image_root.is_absolute() {
            self.image_root.clone()
        } else {
            self.base_dir.join(&self.image_root)
        }
    }

    pub fn slice_path(&self, patient_id: &str, series_id: &str, slice_index: u32) -> PathBuf {
        self.resolved_image_root()
            .join(patient_id)
            .join(series_id)
            .join(format!("{slice_index:03}.pgm"))
    }

    pub fn image_path(&self, ann: &Annotation) -> PathBuf {
        self.slice_path(&ann.key.patient_id, &ann.key.series_id, ann.slice_index)
    }

    /// Unique disc keys in first-appearance order.
    pub fn disc_keys(&self) -> Vec<DiscKey> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.key.clone()))
            .map(|r| r.key.clone())
            .collect()
    }

    /// One representative annotation per disc (the first listed).
    pub fn representative(&self, key: &DiscKey) -> Option<&Annotation> {
        self.records.iter().find(|r| &r.key == key)
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        if let Some(parent) = csv_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::format(csv_path, e.to_string()))?;
        for r in &self.records {
            w.serialize(ManifestRow {
                patient_id: r.key.patient_id.clone(),
                series_id: r.key.series_id.clone(),
                level: r.key.level,
                slice_index: r.slice_index,
                x: r.x,
                y: r.y,
                grade: r.grade,
            })
            .map_err(|e| Error::format(csv_path, e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record(MANIFEST_HEADER)
                .map_err(|e| Error::format(csv_path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        let sidecar = ManifestSidecar {
            image_root: self.image_root.clone(),
            format_version: self.format_version,
        };
        let side_path = Self::sidecar_path(csv_path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&side_path, json + "\n").map_err(|e| Error::io(&side_path, e))
    }

    /// Loads a manifest CSV and its sidecar. Unreadable files surface as
    /// [`Error::Io`]; malformed content as [`Error::Format`].
    pub fn load(csv_path: &Path) -> Result<Self> {
        let side_path = Self::sidecar_path(csv_path);
        let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: ManifestSidecar =
            serde_json::from_str(&side_text).map_err(|e| Error::format(&side_path, e.to_string()))?;
        if sidecar.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::format(
                &side_path,
                format!("unsupported format_version {}", sidecar.format_version),
            ));
        }

        let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers = rdr
            .headers()
            .map_err(|e| Error::format(csv_path, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::format(
                csv_path,
                format!("expected header {:?}, found {:?}", MANIFEST_HEADER, headers),
            ));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.deserialize::<ManifestRow>().enumerate() {
            let row = row.map_err(|e| Error::format(csv_path, format!("row {}: {e}", line + 1)))?;
            records.push(Annotation {
                key: DiscKey::new(row.patient_id, row.series_id, row.level),
                slice_index: row.slice_index,
                x: row.x,
                y: row.y,
                grade: row.grade,
            });
        }
        Ok(DatasetManifest {
            records,
            image_root: sidecar.image_root,
            format_version: sidecar.format_version,
            base_dir: csv_path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    OutOfBounds {
        record: usize,
        key: DiscKey,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    Duplicate {
        record: usize,
        key: DiscKey,
        slice_index: u32,
    },
    MissingImage {
        record: usize,
        key: DiscKey,
        path: PathBuf,
    },
    ConflictingGrade {
        record: usize,
        key: DiscKey,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutOfBounds {
                record,
                key,
                x,
                y,
                width,
                height,
            } => write!(
                f,
                "record {record} ({key}): center ({x}, {y}) outside {width}x{height} slice"
            ),
            Violation::Duplicate {
                record,
                key,
                slice_index,
            } => {
                write!(
                    f,
                    "record {record} ({key}): duplicate annotation for slice {slice_index}"
                )
            }
            Violation::MissingImage { record, key, path } => {
                write!(f, "record {record} ({key}): image {} not readable", path.display())
            }
            Violation::ConflictingGrade { record, key } => {
                write!(
                    f,
                    "record {record} ({key}): grade differs from earlier record of the same disc"
                )
            }
        }
    }
}

/// Checks every manifest invariant. An empty vector means the manifest is
/// well formed.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    let mut grades = std::collections::HashMap::new();
    let mut dims_cache = std::collections::HashMap::new();

    for (i, r) in manifest.records.iter().enumerate() {
        if !seen.insert((r.key.clone(), r.slice_index)) {
            violations.push(Violation::Duplicate {
                record: i,
                key: r.key.clone(),
                slice_index: r.slice_index,
            });
        }
        if let Some(&g) = grades.get(&r.key) {
            if g != r.grade {
                violations.push(Violation::ConflictingGrade {
                    record: i,
                    key: r.key.clone(),
                });
            }
        } else {
            grades.insert(r.key.clone(), r.grade);
        }

        let path = manifest.image_path(r);
        let dims = dims_cache
            .entry(path.clone())
            .or_insert_with(|| image::image_dimensions(&path).ok())
            .to_owned();
        match dims {
            None => violations.push(Violation::MissingImage {
                record: i,
                key: r.key.clone(),
                path,
            }),
            Some((w, h)) => {
                let (w, h) = (w as usize, h as usize);
                let inside = r.x >= 0.0 && r.x < w as f64 && r.y >= 0.0 && r.y < h as f64;
                if !inside {
                    violations.push(Violation::OutOfBounds {
                        record: i,
                        key: r.key.clone(),
                        x: r.x,
                        y: r.y,
                        width: w,
                        height: h,
                    });
                }
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grade_parsing_is_case_insensitive() {
        assert_eq!("SEVERE".parse::<SeverityGrade>().unwrap(), SeverityGrade::Severe);
        assert_eq!(" Moderate ".parse::<SeverityGrade>().unwrap(), SeverityGrade::Moderate);
        assert!("mild".parse::<SeverityGrade>().is_err());
    }

    #[test]
    fn grade_order_matches_encoding() {
        assert!(SeverityGrade::Normal < SeverityGrade::Moderate);
        assert!(SeverityGrade::Moderate < SeverityGrade::Severe);
        for g in SeverityGrade::ALL {
            assert_eq!(SeverityGrade::from_index(g.index()), Some(g));
        }
    }

    #[test]
    fn level_index_is_bijective() {
        for (i, l) in DiscLevel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(DiscLevel::from_index(i), Some(*l));
            assert_eq!(l.as_str().parse::<DiscLevel>().unwrap(), *l);
        }
        assert_eq!(DiscLevel::from_index(5), None);
        assert_eq!("l4_l5".parse::<DiscLevel>().unwrap(), DiscLevel::L4L5);
    }

    #[test]
    fn empty_slice_is_rejected() {
        assert!(SliceImage::new(Array2::zeros((0, 4))).is_err());
    }
}
