//! Completion IoU and semantic mIoU over known space.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::voxio::SemGrid;

/// Default stabilizer of the per-class IoU ratio.
pub const MIOU_EPS: f64 = 1e-12;

/// Square tally of `(ground truth, prediction)` label pairs, class `0`
/// being empty space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Matrix for `semantic_classes` classes plus empty.
    pub fn new(semantic_classes: usize) -> Self {
        let size = semantic_classes + 1;
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn from_counts(semantic_classes: usize, counts: Vec<u64>) -> Result<Self> {
        let size = semantic_classes + 1;
        if counts.len() != size * size {
            shape_err!("{} counts for a {size}×{size} matrix", counts.len());
        }
        Ok(Self { size, counts })
    }

    pub fn semantic_classes(&self) -> usize {
        self.size - 1
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, n: u64) {
        self.counts[gt * self.size + pred] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every voxel that is valid in `gt`.
    pub fn accumulate(&mut self, pred: &SemGrid, gt: &SemGrid) -> Result<()> {
        if pred.dims() != gt.dims() {
            shape_err!("prediction dims {:?} vs ground truth {:?}", pred.dims(), gt.dims());
        }
        let max = pred.max_label().max(gt.max_label()) as usize;
        if max >= self.size {
            shape_err!("label {max} outside a {}-class matrix", self.size);
        }
        for ((&p, &t), &v) in pred.labels().iter().zip(gt.labels()).zip(gt.valid()) {
            if v {
                self.counts[t as usize * self.size + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            shape_err!("merging {}-class and {}-class matrices", self.size, other.size);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Occupancy `(tp, fp, fn)`.
    pub fn occupancy_counts(&self) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for t in 0..self.size {
            for p in 0..self.size {
                let n = self.get(t, p);
                match (t != 0, p != 0) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fn_ += n,
                    (false, false) => {}
                }
            }
        }
        (tp, fp, fn_)
    }
}

/// Occupancy IoU and whether it came from the all-empty degenerate case.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CompletionIou {
    pub iou: f64,
    pub degenerate: bool,
}

/// Binary empty/occupied IoU. With no occupied voxel in either grid the
/// result is `1` and flagged as degenerate.
pub fn completion_iou(cm: &ConfusionMatrix) -> CompletionIou {
    let (tp, fp, fn_) = cm.occupancy_counts();
    let den = tp + fp + fn_;
    if den == 0 {
        return CompletionIou { iou: 1.0, degenerate: true };
    }
    CompletionIou {
        iou: tp as f64 / den as f64,
        degenerate: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SemanticIou {
    /// IoU of semantic classes `1..=C`.
    pub per_class: Vec<f64>,
    /// Mean over all `C` classes.
    pub mean: f64,
    /// Mean over the classes present in prediction or ground truth.
    pub mean_present: f64,
}

/// Per-class `TP / (TP + FP + FN + eps)` for classes `1..=C` and their mean.
pub fn miou(cm: &ConfusionMatrix, eps: f64) -> SemanticIou {
    let c = cm.semantic_classes();
    let mut per_class = Vec::with_capacity(c);
    let mut present = Vec::new();
    for k in 1..=c {
        let tp = cm.get(k, k);
        let row: u64 = (0..cm.size).map(|p| cm.get(k, p)).sum();
        let col: u64 = (0..cm.size).map(|t| cm.get(t, k)).sum();
        let (fn_, fp) = (row - tp, col - tp);
        let iou = tp as f64 / ((tp + fp + fn_) as f64 + eps);
        if tp + fp + fn_ > 0 {
            present.push(iou);
        }
        per_class.push(iou);
    }
    let mean = if c == 0 { 0.0 } else { per_class.iter().sum::<f64>() / c as f64 };
    let mean_present = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    SemanticIou {
        per_class,
        mean,
        mean_present,
    }
}

/// Scores of one sequence (or of the aggregate).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub sequence: String,
    pub iou: f64,
    pub degenerate: bool,
    pub miou: f64,
    pub miou_present: f64,
    pub per_class: Vec<f64>,
}

impl ReportRow {
    pub fn score(sequence: impl Into<String>, cm: &ConfusionMatrix) -> Self {
        let c = completion_iou(cm);
        let s = miou(cm, MIOU_EPS);
        Self {
            sequence: sequence.into(),
            iou: c.iou,
            degenerate: c.degenerate,
            miou: s.mean,
            miou_present: s.mean_present,
            per_class: s.per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Scores of the summed matrices.
    pub aggregate: ReportRow,
}

/// Scores every named matrix and their micro-averaged aggregate.
pub fn report_table(sequences: &[(String, ConfusionMatrix)]) -> Result<Report> {
    let Some((_, first)) = sequences.first() else {
        shape_err!("report needs at least one confusion matrix");
    };
    let mut total = ConfusionMatrix::new(first.semantic_classes());
    for (_, cm) in sequences {
        total.merge(cm)?;
    }
    Ok(Report {
        rows: sequences.iter().map(|(name, cm)| ReportRow::score(name.clone(), cm)).collect(),
        aggregate: ReportRow::score("all", &total),
    })
}

impl Report {
    fn all_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().chain(std::iter::once(&self.aggregate))
    }

    /// Percentages, one row per sequence followed by the aggregate.
    pub fn to_text(&self, class_names: Option<&[String]>) -> String {
        let c = self.aggregate.per_class.len();
        let names: Vec<String> = match class_names {
            Some(n) if n.len() == c => n.to_vec(),
            _ => (1..=c).map(|k| format!("c{k}")).collect(),
        };
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:>7} {:>7} {:>9}", "sequence", "IoU", "mIoU", "mIoU(p)");
        for n in &names {
            let _ = write!(out, " {n:>8}");
        }
        out.push('\n');
        for r in self.all_rows() {
            let flag = if r.degenerate { "*" } else { "" };
            let _ = write!(
                out,
                "{:<12} {:>7} {:>7.2} {:>9.2}",
                r.sequence,
                format!("{:.2}{flag}", 100.0 * r.iou),
                100.0 * r.miou,
                100.0 * r.miou_present
            );
            for v in &r.per_class {
                let _ = write!(out, " {:>8.2}", 100.0 * v);
            }
            out.push('\n');
        }
        if self.all_rows().any(|r| r.degenerate) {
            out.push_str("* no occupied voxel in prediction or ground truth\n");
        }
        out
    }

    /// Fractions in `[0, 1]`, header `sequence,iou,miou,c1,...,cC`.
    pub fn to_csv(&self) -> String {
        let c = self.aggregate.per_class.len();
        let mut out = String::from("sequence,iou,miou");
        for k in 1..=c {
            let _ = write!(out, ",c{k}");
        }
        out.push('\n');
        for r in self.all_rows() {
            let _ = write!(out, "{},{},{}", r.sequence, r.iou, r.miou);
            for v in &r.per_class {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}
