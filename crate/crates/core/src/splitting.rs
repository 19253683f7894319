//! Grade-stratified train/val/test assignment at disc granularity, with a
//! leakage audit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_model::{DatasetManifest, DiscKey, DiscLevel, SeverityGrade};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Data(format!("unknown partition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        SplitFractions { train, val, test }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || self.train <= 0.0 {
            return Err(Error::Config(format!("invalid split fractions {a:?}")));
        }
        if (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {a:?} must sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub mapping: BTreeMap<DiscKey, Partition>,
    pub seed: u64,
    pub fractions: SplitFractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitSidecar {
    seed: u64,
    fractions: SplitFractions,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    patient_id: String,
    series_id: String,
    level: DiscLevel,
    partition: Partition,
}

impl SplitAssignment {
    pub fn partition_of(&self, key: &DiscKey) -> Option<Partition> {
        self.mapping.get(key).copied()
    }

    pub fn keys_in(&self, partition: Partition) -> Vec<DiscKey> {
        self.mapping
            .iter()
            .filter(|(_, p)| **p == partition)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        if let Some(parent) = csv_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::format(csv_path, e.to_string()))?;
        for (k, p) in &self.mapping {
            w.serialize(SplitRow {
                patient_id: k.patient_id.clone(),
                series_id: k.series_id.clone(),
                level: k.level,
                partition: *p,
            })
            .map_err(|e| Error::format(csv_path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        let side = csv_path.with_extension("json");
        let json = serde_json::to_string_pretty(&SplitSidecar {
            seed: self.seed,
            fractions: self.fractions,
        })
        .expect("sidecar serializes");
        fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let side = csv_path.with_extension("json");
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: SplitSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut mapping = BTreeMap::new();
        for row in csv::Reader::from_reader(file).deserialize::<SplitRow>() {
            let row = row.map_err(|e| Error::format(csv_path, e.to_string()))?;
            let key = DiscKey::new(row.patient_id, row.series_id, row.level);
            if mapping.insert(key.clone(), row.partition).is_some() {
                return Err(Error::format(csv_path, format!("disc {key} listed twice")));
            }
        }
        Ok(SplitAssignment {
            mapping,
            seed: sidecar.seed,
            fractions: sidecar.fractions,
        })
    }
}

/// Largest-remainder apportionment of `n` items; ties on the remainder go to
/// the earlier partition.
pub fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    for &p in order.iter().take(n.saturating_sub(assigned)) {
        counts[p] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub split: SplitAssignment,
    /// Grades too small to stratify; all their discs went to train.
    pub warnings: Vec<String>,
}

fn disc_grades(manifest: &DatasetManifest) -> Result<BTreeMap<DiscKey, SeverityGrade>> {
    let mut grades = BTreeMap::new();
    for r in &manifest.records {
        if let Some(prev) = grades.insert(r.key.clone(), r.grade) {
            if prev != r.grade {
                return Err(Error::Data(format!("disc {} has conflicting grades", r.key)));
            }
        }
    }
    Ok(grades)
}

pub fn stratified_disc_split(manifest: &DatasetManifest, fractions: SplitFractions, seed: u64) -> Result<SplitOutcome> {
    fractions.validate()?;
    let grades = disc_grades(manifest)?;
    let f = fractions.as_array();
    let active = f.iter().filter(|&&x| x > 0.0).count();
    let mut rng = stream(seed, "split");
    let mut mapping = BTreeMap::new();
    let mut warnings = Vec::new();

    for grade in SeverityGrade::ALL {
        // BTreeMap iteration gives a sorted, seed-independent starting order.
        let mut keys: Vec<DiscKey> = grades
            .iter()
            .filter(|(_, g)| **g == grade)
            .map(|(k, _)| k.clone())
            .collect();
        if keys.is_empty() {
            continue;
        }
        keys.shuffle(&mut rng);
        if keys.len() < active {
            warnings.push(format!(
                "grade {grade} has {} disc(s), fewer than {active} partitions; all assigned to train",
                keys.len()
            ));
            for k in keys {
                mapping.insert(k, Partition::Train);
            }
            continue;
        }
        let counts = apportion(keys.len(), f);
        let mut it = keys.into_iter();
        for p in Partition::ALL {
            for k in it.by_ref().take(counts[p.index()]) {
                mapping.insert(k, p);
            }
        }
    }
    Ok(SplitOutcome {
        split: SplitAssignment {
            mapping,
            seed,
            fractions,
        },
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageViolation {
    pub key: DiscKey,
    pub partitions: Vec<Partition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub violations: Vec<LeakageViolation>,
    /// histograms[partition][grade]
    pub histograms: [[usize; 3]; 3],
    /// Manifest discs with no partition.
    pub unassigned: Vec<DiscKey>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.unassigned.is_empty()
    }
}

/// Audits a split given as (key, partition) memberships. A disc listed under
/// more than one partition is a leakage violation.
pub fn audit_memberships(memberships: &[(DiscKey, Partition)], manifest: &DatasetManifest) -> Result<AuditReport> {
    let grades = disc_grades(manifest)?;
    let mut seen: HashMap<&DiscKey, Vec<Partition>> = HashMap::new();
    for (k, p) in memberships {
        if !grades.contains_key(k) {
            return Err(Error::Data(format!("split lists disc {k} absent from the manifest")));
        }
        let e = seen.entry(k).or_default();
        if !e.contains(p) {
            e.push(*p);
        }
    }
    let mut violations: Vec<LeakageViolation> = seen
        .iter()
        .filter(|(_, ps)| ps.len() > 1)
        .map(|(k, ps)| {
            let mut ps = ps.clone();
            ps.sort();
            LeakageViolation {
                key: (*k).clone(),
                partitions: ps,
            }
        })
        .collect();
    violations.sort_by(|a, b| a.key.cmp(&b.key));

    let mut histograms = [[0usize; 3]; 3];
    for (k, ps) in &seen {
        for p in ps {
            histograms[p.index()][grades[*k].index()] += 1;
        }
    }
    let unassigned = grades.keys().filter(|k| !seen.contains_key(k)).cloned().collect();
    Ok(AuditReport {
        violations,
        histograms,
        unassigned,
    })
}

pub fn audit_leakage(split: &SplitAssignment, manifest: &DatasetManifest) -> Result<AuditReport> {
    let m: Vec<_> = split.mapping.iter().map(|(k, p)| (k.clone(), *p)).collect();
    audit_memberships(&m, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Annotation;

    fn manifest(grades: &[SeverityGrade]) -> DatasetManifest {
        let records = grades
            .iter()
            .enumerate()
            .map(|(i, g)| Annotation {
                key: DiscKey::new(format!("P{:04}", i / 5), "T2", DiscLevel::ALL[i % 5]),
                slice_index: 4,
                x: 10.0,
                y: 10.0,
                grade: *g,
            })
            .collect();
        DatasetManifest::new(records, "images")
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(apportion(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(apportion(10, [0.7, 0.15, 0.15]), [7, 2, 1]);
        assert_eq!(apportion(3, [1.0 / 3.0; 3]), [1, 1, 1]);
        assert_eq!(apportion(7, [1.0, 0.0, 0.0]), [7, 0, 0]);
    }

    #[test]
    fn one_grade_ten_discs() {
        let m = manifest(&[SeverityGrade::Normal; 10]);
        let out = stratified_disc_split(&m, SplitFractions::new(0.8, 0.1, 0.1), 1).unwrap();
        let counts = Partition::ALL.map(|p| out.split.keys_in(p).len());
        assert_eq!(counts, [8, 1, 1]);
    }

    #[test]
    fn deterministic_and_all_train() {
        let grades: Vec<_> = (0..40).map(|i| SeverityGrade::ALL[i % 3]).collect();
        let m = manifest(&grades);
        let a = stratified_disc_split(&m, SplitFractions::default(), 9).unwrap();
        let b = stratified_disc_split(&m, SplitFractions::default(), 9).unwrap();
        assert_eq!(a, b);
        let all = stratified_disc_split(&m, SplitFractions::new(1.0, 0.0, 0.0), 9).unwrap();
        assert!(all.split.mapping.values().all(|p| *p == Partition::Train));
    }

    #[test]
    fn tiny_grade_goes_to_train_with_warning() {
        let mut grades = vec![SeverityGrade::Normal; 20];
        grades[3] = SeverityGrade::Severe;
        let m = manifest(&grades);
        let out = stratified_disc_split(&m, SplitFractions::default(), 0).unwrap();
        assert_eq!(out.warnings.len(), 1);
        let severe_key = m.records[3].key.clone();
        assert_eq!(out.split.partition_of(&severe_key), Some(Partition::Train));
    }

    #[test]
    fn audit_flags_shared_disc() {
        let m = manifest(&[SeverityGrade::Normal; 10]);
        let out = stratified_disc_split(&m, SplitFractions::default(), 3).unwrap();
        assert!(audit_leakage(&out.split, &m).unwrap().is_clean());

        let k = m.records[0].key.clone();
        let mut memberships: Vec<_> = out.split.mapping.iter().map(|(k, p)| (k.clone(), *p)).collect();
        memberships.retain(|(key, _)| key != &k);
        memberships.push((k.clone(), Partition::Train));
        memberships.push((k.clone(), Partition::Test));
        let report = audit_memberships(&memberships, &m).unwrap();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].key, k);
        assert_eq!(report.violations[0].partitions, vec![Partition::Train, Partition::Test]);
    }

    #[test]
    fn audit_rejects_unknown_disc() {
        let m = manifest(&[SeverityGrade::Normal; 5]);
        let mut split = stratified_disc_split(&m, SplitFractions::default(), 3).unwrap().split;
        split
            .mapping
            .insert(DiscKey::new("ghost", "T2", DiscLevel::L1L2), Partition::Val);
        assert!(matches!(audit_leakage(&split, &m), Err(Error::Data(_))));
    }

    #[test]
    fn bad_fractions_rejected() {
        let m = manifest(&[SeverityGrade::Normal; 5]);
        assert!(stratified_disc_split(&m, SplitFractions::new(0.5, 0.2, 0.2), 0).is_err());
        assert!(stratified_disc_split(&m, SplitFractions::new(0.0, 0.5, 0.5), 0).is_err());
    }
}
