//! Multi-class confusion matrix and the per-class metrics derived from it.
//!
//! Orientation is fixed: rows are true classes, columns are predictions.

use std::fmt::Write as _;

use thiserror::Error;

use crate::faults::ClassLabel;

pub const ORIENTATION: &str = "rows = true class, columns = predicted class";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{predictions} predictions for {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("no samples")]
    Empty,
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("matrices of different sizes")]
    ShapeMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerClassCounts {
    pub class: usize,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PerClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    /// Builds a matrix from row-major counts (`rows[t][p]`).
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(MetricsError::ShapeMismatch);
        }
        Ok(ConfusionMatrix { classes, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<(), MetricsError> {
        for class in [truth, predicted] {
            if class >= self.classes {
                return Err(MetricsError::ClassOutOfRange { class, classes: self.classes });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn per_class(&self, i: usize) -> Result<PerClassCounts, MetricsError> {
        if i >= self.classes {
            return Err(MetricsError::ClassOutOfRange { class: i, classes: self.classes });
        }
        let tp = self.get(i, i);
        let fn_ = self.row_sum(i) - tp;
        let fp = self.col_sum(i) - tp;
        let tn = self.total() - tp - fn_ - fp;
        Ok(PerClassCounts { class: i, tp, tn, fp, fn_ })
    }

    /// Mean over classes of (TP_i + TN_i) / (TP_i + TN_i + FP_i + FN_i).
    pub fn average_accuracy(&self) -> Result<f64, MetricsError> {
        if self.classes == 0 || self.total() == 0 {
            return Err(MetricsError::Empty);
        }
        let sum: f64 = (0..self.classes)
            .map(|i| {
                let c = self.per_class(i).expect("in range");
                (c.tp + c.tn) as f64 / c.total() as f64
            })
            .sum();
        Ok(sum / self.classes as f64)
    }

    /// TP_i / (TP_i + FP_i); `None` when class `i` is never predicted.
    pub fn precision(&self, i: usize) -> Option<f64> {
        let c = self.per_class(i).ok()?;
        (c.tp + c.fp > 0).then(|| c.tp as f64 / (c.tp + c.fp) as f64)
    }

    /// TP_i / (TP_i + FN_i); `None` when class `i` never occurs.
    pub fn recall(&self, i: usize) -> Option<f64> {
        let c = self.per_class(i).ok()?;
        (c.tp + c.fn_ > 0).then(|| c.tp as f64 / (c.tp + c.fn_) as f64)
    }

    /// Row-normalized matrix; empty rows stay zero.
    pub fn normalize(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|i| {
                let sum = self.row_sum(i);
                (0..self.classes)
                    .map(|j| if sum == 0 { 0.0 } else { self.get(i, j) as f64 / sum as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Confusion matrix over `classes` classes.
pub fn confusion(
    predictions: &[ClassLabel],
    truths: &[ClassLabel],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    if truths.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (p, t) in predictions.iter().zip(truths) {
        cm.add(t.index(), p.index())?;
    }
    Ok(cm)
}

/// Cellwise mean of the row-normalized matrices.
pub fn fold_average(cms: &[ConfusionMatrix]) -> Result<Vec<Vec<f64>>, MetricsError> {
    let first = cms.first().ok_or(MetricsError::Empty)?;
    if cms.iter().any(|c| c.classes != first.classes) {
        return Err(MetricsError::ShapeMismatch);
    }
    let n = first.classes;
    let mut acc = vec![vec![0.0; n]; n];
    for cm in cms {
        for (row, norm) in acc.iter_mut().zip(cm.normalize()) {
            for (a, v) in row.iter_mut().zip(norm) {
                *a += v;
            }
        }
    }
    let k = cms.len() as f64;
    for row in &mut acc {
        for a in row {
            *a /= k;
        }
    }
    Ok(acc)
}

pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "undefined".to_string(),
    }
}

/// Human-readable report of one matrix.
pub fn report(title: &str, cm: &ConfusionMatrix) -> String {
    let n = cm.classes();
    let mut out = String::new();
    writeln!(out, "== {title}").unwrap();
    writeln!(out, "orientation: {ORIENTATION}").unwrap();
    writeln!(out, "samples: {}", cm.total()).unwrap();
    writeln!(out, "counts:").unwrap();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{:>6}", cm.get(i, j))).collect();
        writeln!(out, "  C{i} {}", row.join("")).unwrap();
    }
    writeln!(out, "normalized:").unwrap();
    write_matrix(&mut out, &cm.normalize());
    match cm.average_accuracy() {
        Ok(ac) => writeln!(out, "AC: {ac:.4}").unwrap(),
        Err(_) => writeln!(out, "AC: undefined").unwrap(),
    }
    writeln!(out, "class  precision  recall").unwrap();
    for i in 0..n {
        writeln!(out, "C{i}     {:>9}  {:>9}", fmt_opt(cm.precision(i)), fmt_opt(cm.recall(i))).unwrap();
    }
    out
}

pub fn write_matrix(out: &mut String, m: &[Vec<f64>]) {
    for (i, row) in m.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>8.4}")).collect();
        writeln!(out, "  C{i} {}", cells.join("")).unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[usize]) -> Vec<ClassLabel> {
        v.iter().map(|&i| ClassLabel::new(i).unwrap()).collect()
    }

    fn two_class() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![5, 1], vec![2, 4]]).unwrap()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let y = labels(&[0, 1, 2, 3, 4, 5, 6, 7, 7]);
        let cm = confusion(&y, &y, 8).unwrap();
        assert_eq!(cm.trace(), 9);
        assert_eq!(cm.average_accuracy().unwrap(), 1.0);
        for i in 0..8 {
            let c = cm.per_class(i).unwrap();
            assert_eq!((c.fp, c.fn_), (0, 0));
            assert_eq!(cm.precision(i), Some(1.0));
            assert_eq!(cm.recall(i), Some(1.0));
        }
        let norm = cm.normalize();
        for (i, row) in norm.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn single_sample_cell() {
        let cm = confusion(&labels(&[5]), &labels(&[3]), 8).unwrap();
        assert_eq!(cm.get(3, 5), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn two_class_counts_and_metrics() {
        let cm = two_class();
        let c0 = cm.per_class(0).unwrap();
        assert_eq!((c0.tp, c0.fn_, c0.fp, c0.tn), (5, 1, 2, 4));
        assert_eq!(cm.average_accuracy().unwrap(), 0.75);
        assert_eq!(cm.precision(0), Some(5.0 / 7.0));
        assert_eq!(cm.recall(0), Some(5.0 / 6.0));
        assert!(cm.per_class(2).is_err());
    }

    #[test]
    fn undefined_precision_and_recall() {
        let cm = confusion(&labels(&[0, 0]), &labels(&[0, 1]), 3).unwrap();
        assert_eq!(cm.precision(1), None);
        assert_eq!(cm.recall(2), None);
        assert_eq!(cm.precision(2), None);
        assert_eq!(fmt_opt(cm.recall(2)), "undefined");
        assert_eq!(cm.normalize()[2], vec![0.0; 3]);
    }

    #[test]
    fn errors() {
        assert_eq!(
            confusion(&labels(&[0]), &labels(&[0, 1]), 8),
            Err(MetricsError::LengthMismatch { predictions: 1, truths: 2 })
        );
        assert_eq!(confusion(&[], &[], 8), Err(MetricsError::Empty));
        assert!(matches!(
            confusion(&labels(&[7]), &labels(&[0]), 2),
            Err(MetricsError::ClassOutOfRange { .. })
        ));
        assert_eq!(ConfusionMatrix::zeros(8).average_accuracy(), Err(MetricsError::Empty));
        assert_eq!(
            fold_average(&[two_class(), ConfusionMatrix::zeros(3)]),
            Err(MetricsError::ShapeMismatch)
        );
    }

    #[test]
    fn fold_average_by_hand() {
        let a = two_class(); // rows [5/6, 1/6], [2/6, 4/6]
        let b = ConfusionMatrix::from_rows(&[vec![1, 1], vec![0, 4]]).unwrap(); // [.5, .5], [0, 1]
        let c = ConfusionMatrix::from_rows(&[vec![0, 0], vec![3, 1]]).unwrap(); // [0, 0], [.75, .25]
        let avg = fold_average(&[a.clone(), b, c]).unwrap();
        let expect = [
            [(5.0 / 6.0 + 0.5 + 0.0) / 3.0, (1.0 / 6.0 + 0.5 + 0.0) / 3.0],
            [(2.0 / 6.0 + 0.0 + 0.75) / 3.0, (4.0 / 6.0 + 1.0 + 0.25) / 3.0],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((avg[i][j] - expect[i][j]).abs() < 1e-15);
            }
        }
        assert_eq!(fold_average(&[a.clone()]).unwrap(), a.normalize());
        assert_eq!(fold_average(&[a.clone(), a.clone(), a.clone()]).unwrap(), a.normalize());
    }

    #[test]
    fn report_spells_out_undefined() {
        let cm = confusion(&labels(&[0, 1]), &labels(&[0, 1]), 8).unwrap();
        let text = report("fold 0", &cm);
        assert!(text.contains(ORIENTATION));
        assert!(text.contains("undefined"));
        assert!(text.contains("AC: 1.0000"));
    }
}
