//! Per-pair CSV and aggregate JSON at the standard accuracy thresholds.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::PairMetrics;
use crate::error::{Error, Result};

pub const ROTATION_THRESHOLDS_DEG: [f64; 3] = [5.0, 10.0, 45.0];
pub const TRANSLATION_THRESHOLDS_CM: [f64; 3] = [5.0, 10.0, 25.0];
pub const CHAMFER_THRESHOLDS_MM: [f64; 3] = [1.0, 5.0, 10.0];

/// Metrics of one registered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub rotation_deg: f64,
    pub translation_cm: f64,
    pub chamfer_mm: f64,
}

impl PairResult {
    pub fn new(id: impl Into<String>, m: &PairMetrics) -> Self {
        Self { id: id.into(), rotation_deg: m.rotation_deg, translation_cm: m.translation_cm, chamfer_mm: m.chamfer_mm }
    }
}

/// An error is accurate at a threshold when strictly below it.
pub fn accurate(error: f64, threshold: f64) -> bool {
    error < threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub threshold: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub median: f64,
    pub accuracy: Vec<Accuracy>,
}

impl MetricSummary {
    pub fn of(values: &[f64], thresholds: &[f64]) -> Self {
        let n = values.len() as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / 2.0 };
        Self {
            mean: values.iter().sum::<f64>() / n,
            median,
            accuracy: thresholds
                .iter()
                .map(|&t| Accuracy {
                    threshold: t,
                    percent: 100.0 * values.iter().filter(|&&v| accurate(v, t)).count() as f64 / n,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub pairs: usize,
    pub rotation_deg: MetricSummary,
    pub translation_cm: MetricSummary,
    pub chamfer_mm: MetricSummary,
}

pub fn aggregate(records: &[PairResult]) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no pair results to aggregate".into()));
    }
    let col = |f: fn(&PairResult) -> f64| records.iter().map(f).collect::<Vec<_>>();
    Ok(AggregateReport {
        pairs: records.len(),
        rotation_deg: MetricSummary::of(&col(|r| r.rotation_deg), &ROTATION_THRESHOLDS_DEG),
        translation_cm: MetricSummary::of(&col(|r| r.translation_cm), &TRANSLATION_THRESHOLDS_CM),
        chamfer_mm: MetricSummary::of(&col(|r| r.chamfer_mm), &CHAMFER_THRESHOLDS_MM),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    rotation_deg: f64,
    translation_cm: f64,
    chamfer_mm: f64,
    rot_5: u8,
    rot_10: u8,
    rot_45: u8,
    trans_5: u8,
    trans_10: u8,
    trans_25: u8,
    chamfer_1: u8,
    chamfer_5: u8,
    chamfer_10: u8,
}

fn flags(v: f64, t: &[f64; 3]) -> [u8; 3] {
    t.map(|t| u8::from(accurate(v, t)))
}

pub fn write_csv(records: &[PairResult], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        let [rot_5, rot_10, rot_45] = flags(r.rotation_deg, &ROTATION_THRESHOLDS_DEG);
        let [trans_5, trans_10, trans_25] = flags(r.translation_cm, &TRANSLATION_THRESHOLDS_CM);
        let [chamfer_1, chamfer_5, chamfer_10] = flags(r.chamfer_mm, &CHAMFER_THRESHOLDS_MM);
        w.serialize(CsvRow {
            id: r.id.clone(),
            rotation_deg: r.rotation_deg,
            translation_cm: r.translation_cm,
            chamfer_mm: r.chamfer_mm,
            rot_5,
            rot_10,
            rot_45,
            trans_5,
            trans_10,
            trans_25,
            chamfer_1,
            chamfer_5,
            chamfer_10,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads the per-pair CSV back.
pub fn read_csv(path: &Path) -> Result<Vec<PairResult>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(PairResult {
                id: row.id,
                rotation_deg: row.rotation_deg,
                translation_cm: row.translation_cm,
                chamfer_mm: row.chamfer_mm,
            })
        })
        .collect()
}

/// Writes the per-pair CSV and the aggregate JSON. Nothing is written for an
/// empty record list.
pub fn emit_report(records: &[PairResult], csv_path: &Path, json_path: &Path) -> Result<AggregateReport> {
    let agg = aggregate(records)?;
    write_csv(records, csv_path)?;
    let json = serde_json::to_string_pretty(&agg)?;
    fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
    Ok(agg)
}

/// Table-style text rendering of an aggregate, values rounded for display.
pub fn format_aggregate(agg: &AggregateReport) -> String {
    let mut s = format!("pairs: {}\n", agg.pairs);
    for (name, unit, m) in [
        ("rotation", "deg", &agg.rotation_deg),
        ("translation", "cm", &agg.translation_cm),
        ("chamfer", "mm", &agg.chamfer_mm),
    ] {
        let acc: Vec<String> = m.accuracy.iter().map(|a| format!("@{}{unit} {:.1}%", a.threshold, a.percent)).collect();
        s += &format!("{name:<12} {}  mean {:.3}  median {:.3}\n", acc.join("  "), m.mean, m.median);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, r: f64) -> PairResult {
        PairResult { id: id.into(), rotation_deg: r, translation_cm: r, chamfer_mm: r }
    }

    #[test]
    fn single_pair_flags() {
        assert_eq!(flags(3.0, &ROTATION_THRESHOLDS_DEG), [1, 1, 1]);
        let a = aggregate(&[rec("a", 3.0)]).unwrap();
        assert!(a.rotation_deg.accuracy.iter().all(|x| x.percent == 100.0));
    }

    #[test]
    fn hand_bucketing() {
        let a = aggregate(&[rec("a", 4.0), rec("b", 6.0), rec("c", 50.0)]).unwrap();
        let p: Vec<f64> = a.rotation_deg.accuracy.iter().map(|x| x.percent).collect();
        assert_eq!(p, vec![100.0 / 3.0, 200.0 / 3.0, 200.0 / 3.0]);
        assert_eq!(a.rotation_deg.median, 6.0);
        assert_eq!(a.rotation_deg.mean, 20.0);
    }

    #[test]
    fn empty_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let (c, j) = (dir.path().join("r.csv"), dir.path().join("r.json"));
        assert!(emit_report(&[], &c, &j).is_err());
        assert!(!c.exists() && !j.exists());
    }

    #[test]
    fn csv_round_trip_reproduces_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let (c, j) = (dir.path().join("r.csv"), dir.path().join("r.json"));
        let recs: Vec<_> = (0..7).map(|i| rec(&format!("{i:03}"), 0.1 + 1.7 * i as f64 / 3.0)).collect();
        let agg = emit_report(&recs, &c, &j).unwrap();
        let back = read_csv(&c).unwrap();
        assert_eq!(back, recs);
        assert_eq!(aggregate(&back).unwrap(), agg);
        let parsed: AggregateReport = serde_json::from_str(&fs::read_to_string(&j).unwrap()).unwrap();
        assert_eq!(parsed, agg);
    }
}
