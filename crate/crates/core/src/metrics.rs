//! Confusion matrices and the three reported scores: per-class IoU and F1,
//! their means over reported classes (MIoU, AF), and overall accuracy.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// `k×k` pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::contract(
                "confusion_matrix",
                format!("{} counts for k={k}, expected {}", counts.len(), k * k),
            ));
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::contract(
                "accumulate",
                format!(
                    "prediction is {}×{}, ground truth is {}×{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        let w = gt.width();
        // Validate before touching counts so a failed call leaves self unchanged.
        for (i, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if p as usize >= self.k || g as usize >= self.k {
                return Err(Error::Data(format!(
                    "label out of range at pixel (y={}, x={}): prediction {p}, ground truth {g}, k={}",
                    i / w,
                    i % w,
                    self.k
                )));
            }
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Element-wise sum; commutative and associative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::contract(
                "merge",
                format!("k={} vs k={}", self.k, other.k),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` for one class.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.k).map(|g| self.get(g, c)).sum();
        (tp, col - tp, row - tp)
    }
}

/// Which pixels overall accuracy counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OaScope {
    /// Every scored pixel, excluded classes included.
    #[default]
    AllPixels,
    /// Only pixels whose ground truth is a reported class.
    ReportedClasses,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScore {
    pub iou: f64,
    pub f1: f64,
    /// No ground-truth or predicted pixels; scores were set to 0.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_class: Vec<ClassScore>,
    pub miou: f64,
    pub af: f64,
    pub oa: f64,
    pub excluded: BTreeSet<usize>,
}

impl MetricReport {
    pub fn reported_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.per_class.len()).filter(|c| !self.excluded.contains(c))
    }
}

pub fn compute_report(
    cm: &ConfusionMatrix,
    excluded: &BTreeSet<usize>,
    scope: OaScope,
) -> Result<MetricReport> {
    if cm.total() == 0 {
        return Err(Error::Data(
            "confusion matrix is empty; nothing was scored".into(),
        ));
    }
    if let Some(&c) = excluded.iter().find(|&&c| c >= cm.k) {
        return Err(Error::Config(format!(
            "excluded class {c} is out of range for k={}",
            cm.k
        )));
    }
    if excluded.len() == cm.k {
        return Err(Error::Config(
            "every class is excluded; no metric is defined".into(),
        ));
    }

    let per_class: Vec<ClassScore> = (0..cm.k)
        .map(|c| {
            let (tp, fp, fn_) = cm.class_counts(c);
            let denom = tp + fp + fn_;
            if denom == 0 {
                if !excluded.contains(&c) {
                    log::warn!(
                        "class {c} has no ground-truth or predicted pixels; scoring it as 0"
                    );
                }
                return ClassScore {
                    iou: 0.0,
                    f1: 0.0,
                    empty: true,
                };
            }
            ClassScore {
                iou: tp as f64 / denom as f64,
                f1: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
                empty: false,
            }
        })
        .collect();

    let reported: Vec<usize> = (0..cm.k).filter(|c| !excluded.contains(c)).collect();
    let mean = |f: fn(&ClassScore) -> f64| {
        reported.iter().map(|&c| f(&per_class[c])).sum::<f64>() / reported.len() as f64
    };
    let oa = match scope {
        OaScope::AllPixels => cm.trace() as f64 / cm.total() as f64,
        OaScope::ReportedClasses => {
            let hit: u64 = reported.iter().map(|&c| cm.get(c, c)).sum();
            let total: u64 = reported
                .iter()
                .flat_map(|&g| (0..cm.k).map(move |p| (g, p)))
                .map(|(g, p)| cm.get(g, p))
                .sum();
            if total == 0 {
                0.0
            } else {
                hit as f64 / total as f64
            }
        }
    };
    Ok(MetricReport {
        miou: mean(|s| s.iou),
        af: mean(|s| s.f1),
        oa,
        per_class,
        excluded: excluded.clone(),
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn reported_columns(reports: &[(String, MetricReport)], class_names: &[String]) -> Vec<usize> {
    let excluded = reports
        .first()
        .map(|(_, r)| r.excluded.clone())
        .unwrap_or_default();
    (0..class_names.len())
        .filter(|c| !excluded.contains(c))
        .collect()
}

/// Fixed-width table: one row per model, per-class `IoU/F1` percentages,
/// then MIoU, AF and OA. Excluded classes get no column.
pub fn format_table(reports: &[(String, MetricReport)], class_names: &[String]) -> String {
    let cols = reported_columns(reports, class_names);
    let mut header = vec!["Model".to_string()];
    header.extend(cols.iter().map(|&c| class_names[c].clone()));
    header.extend(["MIoU", "AF", "OA"].map(String::from));

    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|(name, r)| {
            let mut row = vec![name.clone()];
            row.extend(cols.iter().map(|&c| {
                let s = r.per_class.get(c).copied().unwrap_or(ClassScore {
                    iou: 0.0,
                    f1: 0.0,
                    empty: true,
                });
                format!("{}/{}", pct(s.iou), pct(s.f1))
            }));
            row.extend([pct(r.miou), pct(r.af), pct(r.oa)]);
            row
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header)
                .chain(&rows)
                .map(|r| r[i].len())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| {
                if i == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// The same table as CSV, with separate IoU and F1 columns per class.
pub fn format_csv(reports: &[(String, MetricReport)], class_names: &[String]) -> String {
    let cols = reported_columns(reports, class_names);
    let mut out = String::from("model");
    for &c in &cols {
        let _ = write!(out, ",{0}_iou,{0}_f1", class_names[c]);
    }
    out.push_str(",miou,af,oa\n");
    for (name, r) in reports {
        out.push_str(name);
        for &c in &cols {
            let s = r.per_class.get(c).copied().unwrap_or(ClassScore {
                iou: 0.0,
                f1: 0.0,
                empty: true,
            });
            let _ = write!(out, ",{:.6},{:.6}", s.iou, s.f1);
        }
        let _ = writeln!(out, ",{:.6},{:.6},{:.6}", r.miou, r.af, r.oa);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn hand_computed_two_class_matrix() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let r = compute_report(&cm, &BTreeSet::new(), OaScope::AllPixels).unwrap();
        assert!((r.per_class[0].iou - 0.5).abs() < 1e-12);
        assert!((r.per_class[0].f1 - 6.0 / 9.0).abs() < 1e-12);
        assert!((r.per_class[1].iou - 4.0 / 7.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 8.0 / 11.0).abs() < 1e-12);
        assert!((r.oa - 0.7).abs() < 1e-12);

        let table = format_table(&[("m".into(), r)], &names(2));
        assert!(table.contains("50.00/66.67"), "{table}");
    }

    #[test]
    fn exclusion_drops_class_from_means_not_from_oa() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let ex = BTreeSet::from([1]);
        let r = compute_report(&cm, &ex, OaScope::AllPixels).unwrap();
        assert_eq!(r.miou, r.per_class[0].iou);
        assert!((r.oa - 0.7).abs() < 1e-12);
        let scoped = compute_report(&cm, &ex, OaScope::ReportedClasses).unwrap();
        assert!((scoped.oa - 0.75).abs() < 1e-12);
        assert!(compute_report(&cm, &BTreeSet::from([0, 1]), OaScope::AllPixels).is_err());
    }

    #[test]
    fn zero_support_class_is_flagged() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 5, 0, 0, 0, 0]).unwrap();
        let r = compute_report(&cm, &BTreeSet::new(), OaScope::AllPixels).unwrap();
        assert!(r.per_class[2].empty);
        assert_eq!(r.per_class[2].iou, 0.0);
        assert!((r.miou - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_reports_location() {
        let mut cm = ConfusionMatrix::new(2);
        let gt = LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let pred = LabelMap::new(2, 2, vec![0, 1, 0, 3]).unwrap();
        let err = cm.accumulate(&pred, &gt).unwrap_err().to_string();
        assert!(err.contains("y=1, x=1"), "{err}");
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = format_table(&[], &names(3));
        assert_eq!(t.lines().count(), 1);
        assert!(t.starts_with("Model"));
    }
}
