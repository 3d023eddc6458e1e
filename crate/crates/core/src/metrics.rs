//! Confusion matrices, accuracy measures, agreement with a truth raster and
//! per-class area counts.
//!
//! Matrices are oriented rows = predicted class, columns = reference class,
//! so producer accuracy reads down a column and user accuracy along a row.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geocore::GeoPoint;
use crate::rasterstack::{sample_pixel, RasterError, RasterGrid};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{predicted} predictions but {reference} reference labels")]
    LengthMismatch { predicted: usize, reference: usize },
    #[error("label {label} is not one of the {classes} classes")]
    UnknownLabel { label: usize, classes: usize },
    #[error("unknown class name {0:?}")]
    UnknownClass(String),
    #[error("{metric} undefined for class {class:?}: zero denominator")]
    UndefinedMetric { metric: &'static str, class: String },
    #[error("overall accuracy undefined for an empty matrix")]
    EmptyMatrix,
    #[error("matrix must be square with one row per class: {0}")]
    Shape(String),
    #[error("class lists differ")]
    ClassMismatch,
    #[error("map cell value {0} is not a class index")]
    InvalidClassValue(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    class_names: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: &[impl AsRef<str>]) -> Self {
        let k = class_names.len();
        Self {
            class_names: class_names.iter().map(|s| s.as_ref().to_string()).collect(),
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(class_names: &[impl AsRef<str>], counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = class_names.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(MetricsError::Shape(format!("{k} classes")));
        }
        let mut cm = Self::new(class_names);
        cm.counts = counts;
        Ok(cm)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, predicted: usize, reference: usize) -> u64 {
        self.counts[predicted][reference]
    }

    pub fn class_index(&self, name: &str) -> Result<usize, MetricsError> {
        self.class_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| MetricsError::UnknownClass(name.to_string()))
    }

    pub fn record(&mut self, predicted: usize, reference: usize) -> Result<(), MetricsError> {
        let k = self.len();
        for label in [predicted, reference] {
            if label >= k {
                return Err(MetricsError::UnknownLabel { label, classes: k });
            }
        }
        self.counts[predicted][reference] += 1;
        Ok(())
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Correct / reference total for the class (recall).
    pub fn producer_accuracy(&self, class: usize) -> Result<f64, MetricsError> {
        let d = self.col_sum(class);
        if d == 0 {
            return Err(self.undefined("producer accuracy", class));
        }
        Ok(self.counts[class][class] as f64 / d as f64)
    }

    /// Correct / predicted total for the class (precision).
    pub fn user_accuracy(&self, class: usize) -> Result<f64, MetricsError> {
        let d = self.row_sum(class);
        if d == 0 {
            return Err(self.undefined("user accuracy", class));
        }
        Ok(self.counts[class][class] as f64 / d as f64)
    }

    pub fn overall_accuracy(&self) -> Result<f64, MetricsError> {
        match self.total() {
            0 => Err(MetricsError::EmptyMatrix),
            t => Ok(self.trace() as f64 / t as f64),
        }
    }

    fn undefined(&self, metric: &'static str, class: usize) -> MetricsError {
        MetricsError::UndefinedMetric {
            metric,
            class: self.class_names[class].clone(),
        }
    }

    /// Elementwise sum with a matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.class_names != other.class_names {
            return Err(MetricsError::ClassMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// The same matrix with classes reordered; `order[k]` is the old index
    /// of the class placed at position `k`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            class_names: order.iter().map(|&i| self.class_names[i].clone()).collect(),
            counts: order
                .iter()
                .map(|&i| order.iter().map(|&j| self.counts[i][j]).collect())
                .collect(),
        }
    }

    /// Plain-text table: counts with a UA column and PA / OA footer rows.
    pub fn to_table(&self) -> String {
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(0).max(9);
        let mut s = format!("{:<width$}", "pred\\ref");
        for n in &self.class_names {
            let _ = write!(s, " {n:>width$}");
        }
        let _ = writeln!(s, " {:>width$}", "UA");
        for i in 0..self.len() {
            let _ = write!(s, "{:<width$}", self.class_names[i]);
            for c in &self.counts[i] {
                let _ = write!(s, " {c:>width$}");
            }
            let _ = writeln!(s, " {:>width$}", fmt_metric(self.user_accuracy(i).ok()));
        }
        let _ = write!(s, "{:<width$}", "PA");
        for j in 0..self.len() {
            let _ = write!(s, " {:>width$}", fmt_metric(self.producer_accuracy(j).ok()));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "OA {}", fmt_metric(self.overall_accuracy().ok()));
        s
    }

    /// `class,PA,UA` rows followed by one `OA,<value>,` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,PA,UA\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{}",
                self.class_names[i],
                fmt_metric(self.producer_accuracy(i).ok()),
                fmt_metric(self.user_accuracy(i).ok())
            );
        }
        let _ = writeln!(s, "OA,{},", fmt_metric(self.overall_accuracy().ok()));
        s
    }

    /// Raw counts as CSV with a header of class names.
    pub fn counts_csv(&self) -> String {
        let mut s = format!("predicted\\reference,{}\n", self.class_names.join(","));
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}"))
}

pub fn confusion_matrix(
    predicted: &[usize],
    reference: &[usize],
    class_names: &[impl AsRef<str>],
) -> Result<ConfusionMatrix, MetricsError> {
    if predicted.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            reference: reference.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(class_names);
    for (&p, &r) in predicted.iter().zip(reference) {
        cm.record(p, r)?;
    }
    Ok(cm)
}

/// Integer percent with halves rounded up, in exact integer arithmetic.
pub fn percent_half_up(matching: u64, total: u64) -> Option<u64> {
    (total > 0).then(|| (200 * matching + total) / (2 * total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAgreement {
    pub class: String,
    pub matching: u64,
    pub total: u64,
}

impl ClassAgreement {
    pub fn fraction(&self) -> f64 {
        self.matching as f64 / self.total as f64
    }

    pub fn percent(&self) -> u64 {
        percent_half_up(self.matching, self.total).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    /// Classes with at least one point, in taxonomy order.
    pub classes: Vec<ClassAgreement>,
}

impl AgreementReport {
    pub fn from_counts(class_names: &[impl AsRef<str>], matching: &[u64], total: &[u64]) -> Self {
        let classes = class_names
            .iter()
            .zip(matching.iter().zip(total))
            .filter(|(_, (_, &t))| t > 0)
            .map(|(n, (&m, &t))| ClassAgreement {
                class: n.as_ref().to_string(),
                matching: m,
                total: t,
            })
            .collect();
        Self { classes }
    }

    pub fn class(&self, name: &str) -> Option<&ClassAgreement> {
        self.classes.iter().find(|c| c.class == name)
    }

    pub fn matching(&self) -> u64 {
        self.classes.iter().map(|c| c.matching).sum()
    }

    pub fn total(&self) -> u64 {
        self.classes.iter().map(|c| c.total).sum()
    }

    pub fn overall(&self) -> Option<f64> {
        (self.total() > 0).then(|| self.matching() as f64 / self.total() as f64)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("class        matching    total  fraction  percent\n");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>8} {:>9.4} {:>7}%",
                c.class,
                c.matching,
                c.total,
                c.fraction(),
                c.percent()
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>8} {:>9}",
            "overall",
            self.matching(),
            self.total(),
            self.overall().map_or("NA".into(), |v| format!("{v:.4}"))
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,matching,total,fraction\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{},{:.4}", c.class, c.matching, c.total, c.fraction());
        }
        let _ = writeln!(
            s,
            "overall,{},{},{}",
            self.matching(),
            self.total(),
            self.overall().map_or("NA".into(), |v| format!("{v:.4}"))
        );
        s
    }
}

/// Reads a class index from a map cell. Nodata gives `None`.
pub fn class_at(grid: &RasterGrid, row: usize, col: usize) -> Result<Option<usize>, MetricsError> {
    match grid.value(row, col) {
        None => Ok(None),
        Some(v) if v >= 0.0 && v.fract() == 0.0 => Ok(Some(v as usize)),
        Some(v) => Err(MetricsError::InvalidClassValue(v)),
    }
}

/// Fraction of labeled points per class whose truth-raster class matches.
/// Points on nodata truth cells count as disagreeing.
pub fn agreement_report(
    points: &[(GeoPoint, usize)],
    truth: &RasterGrid,
    class_names: &[impl AsRef<str>],
) -> Result<AgreementReport, MetricsError> {
    let k = class_names.len();
    let mut matching = vec![0u64; k];
    let mut total = vec![0u64; k];
    for &(p, label) in points {
        if label >= k {
            return Err(MetricsError::UnknownLabel { label, classes: k });
        }
        let v = sample_pixel(truth, p)?;
        total[label] += 1;
        if !truth.is_nodata(v) && v == label as f64 {
            matching[label] += 1;
        }
    }
    Ok(AgreementReport::from_counts(class_names, &matching, &total))
}

/// Cells per class index, over non-nodata cells.
pub fn area_counts(map: &RasterGrid, classes: usize) -> Result<Vec<u64>, MetricsError> {
    let mut counts = vec![0u64; classes];
    for &v in map.values() {
        if map.is_nodata(v) {
            continue;
        }
        if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
            return Err(MetricsError::InvalidClassValue(v));
        }
        counts[v as usize] += 1;
    }
    Ok(counts)
}
