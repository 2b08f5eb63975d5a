//! Multilabel evaluation: precision, recall, F1, rank-based average precision,
//! mAP, the micro ("overall") and macro ("class") aggregates, precision-recall
//! curves and label co-occurrence.
//!
//! Quantities that are not defined for the input (precision with no predicted
//! positives, AP for a class with no positives, ...) are `None` rather than 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{DecisionRule, LabelVector};

/// `N x C` predicted probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
    pub row_ids: Vec<String>,
    pub column_ids: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>) -> Result<Self> {
        let row_ids = (0..rows).map(|i| i.to_string()).collect();
        let column_ids = (0..cols).map(|j| format!("class_{j}")).collect();
        Self::with_ids(scores, row_ids, column_ids)
    }

    pub fn with_ids(scores: Vec<f64>, row_ids: Vec<String>, column_ids: Vec<String>) -> Result<Self> {
        let (rows, cols) = (row_ids.len(), column_ids.len());
        if rows == 0 || cols == 0 {
            return Err(Error::shape("score matrix needs at least one row and one column"));
        }
        if scores.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} scores for a {rows}x{cols} matrix",
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Validation(format!("score {s} outside [0, 1]")));
        }
        Ok(ScoreMatrix {
            rows,
            cols,
            scores,
            row_ids,
            column_ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// `N x C` binary ground truth aligned with a [`ScoreMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    rows: usize,
    cols: usize,
    targets: Vec<u8>,
}

impl TargetMatrix {
    pub fn new(rows: usize, cols: usize, targets: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("target matrix needs at least one row and one column"));
        }
        if targets.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} targets for a {rows}x{cols} matrix",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t > 1) {
            return Err(Error::Validation(format!("target entries must be 0 or 1, got {t}")));
        }
        Ok(TargetMatrix { rows, cols, targets })
    }

    pub fn from_labels(labels: &[LabelVector]) -> Result<Self> {
        let cols = labels.first().map_or(0, |l| l.len());
        if let Some(bad) = labels.iter().find(|l| l.len() != cols) {
            return Err(Error::shape(format!(
                "label vectors of differing widths {cols} and {}",
                bad.len()
            )));
        }
        let targets = labels.iter().flat_map(|l| l.bits().iter().copied()).collect();
        Self::new(labels.len(), cols, targets)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.targets[i * self.cols + j] == 1
    }

    pub fn column(&self, j: usize) -> Vec<bool> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

fn check_aligned(score: &ScoreMatrix, target: &TargetMatrix) -> Result<()> {
    if score.rows != target.rows || score.cols != target.cols {
        return Err(Error::shape(format!(
            "score matrix is {}x{} but target matrix is {}x{}",
            score.rows, score.cols, target.rows, target.cols
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn tally(predicted: bool, actual: bool, counts: &mut Self) {
        match (predicted, actual) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn precision(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.tp + c.fp;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

pub fn recall(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.tp + c.fn_;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Image indices ordered by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// One point of a precision-recall curve, taken after the item at `rank` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rank: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall after each rank of the score ordering.
///
/// `None` when there are no positives (the curve is empty).
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Option<Vec<PrPoint>>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let points = ranking(scores)
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            if labels[i] {
                hits += 1;
            }
            PrPoint {
                rank: k + 1,
                recall: hits as f64 / positives as f64,
                precision: hits as f64 / (k + 1) as f64,
            }
        })
        .collect();
    Ok(Some(points))
}

/// Non-interpolated AP: `sum_k (R_k - R_{k-1}) * P_k` over every rank, `R_0 = 0`.
pub fn ap_from_curve(points: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in points {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    ap
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    Ok(pr_curve(scores, labels)?.map(|c| ap_from_curve(&c)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanAveragePrecision {
    /// Mean over classes with a defined AP; `None` if no class has positives.
    pub map: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Classes left out of the mean because they have no positives.
    pub excluded: usize,
}

pub fn mean_average_precision(score: &ScoreMatrix, target: &TargetMatrix) -> Result<MeanAveragePrecision> {
    check_aligned(score, target)?;
    let per_class = (0..score.cols)
        .map(|j| average_precision(&score.column(j), &target.column(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_ap(per_class))
}

fn summarize_ap(per_class: Vec<Option<f64>>) -> MeanAveragePrecision {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    MeanAveragePrecision {
        map: mean(&defined),
        excluded: per_class.len() - defined.len(),
        per_class,
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// The seven headline aggregates plus their ingredients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub op: Option<f64>,
    pub cp: Option<f64>,
    #[serde(rename = "or")]
    pub or_: Option<f64>,
    pub cr: Option<f64>,
    pub of1: Option<f64>,
    pub cf1: Option<f64>,
    pub excluded_classes: usize,
    pub decision_rule: DecisionRule,
    #[serde(skip)]
    pub class_names: Vec<String>,
    #[serde(skip)]
    pub per_class_counts: Vec<ConfusionCounts>,
    #[serde(skip)]
    pub pr_curves: Vec<Option<Vec<PrPoint>>>,
}

/// Applies `rule` to every row, then computes mAP (rank-based, independent of
/// the rule), micro-averaged OP/OR from pooled counts, macro-averaged CP/CR
/// over classes where each is defined, and OF1/CF1 as harmonic means of those.
pub fn table3_report(score: &ScoreMatrix, target: &TargetMatrix, rule: DecisionRule) -> Result<MetricsReport> {
    check_aligned(score, target)?;
    rule.validate()?;

    let predictions = (0..score.rows)
        .map(|i| rule.apply(score.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![ConfusionCounts::default(); score.cols];
    for (i, pred) in predictions.iter().enumerate() {
        for (j, c) in counts.iter_mut().enumerate() {
            ConfusionCounts::tally(pred.get(j), target.get(i, j), c);
        }
    }
    let pooled = counts.iter().fold(ConfusionCounts::default(), |a, &c| a + c);
    let op = precision(&pooled);
    let or_ = recall(&pooled);
    let cp = mean(&counts.iter().filter_map(precision).collect::<Vec<_>>());
    let cr = mean(&counts.iter().filter_map(recall).collect::<Vec<_>>());

    let pr_curves = (0..score.cols)
        .map(|j| pr_curve(&score.column(j), &target.column(j)))
        .collect::<Result<Vec<_>>>()?;
    let ap = summarize_ap(pr_curves.iter().map(|c| c.as_deref().map(ap_from_curve)).collect());

    Ok(MetricsReport {
        map: ap.map,
        per_class_ap: ap.per_class,
        op,
        cp,
        or_,
        cr,
        of1: op.zip(or_).map(|(p, r)| f1(p, r)),
        cf1: cp.zip(cr).map(|(p, r)| f1(p, r)),
        excluded_classes: ap.excluded,
        decision_rule: rule,
        class_names: score.column_ids.clone(),
        per_class_counts: counts,
        pr_curves,
    })
}

pub const TABLE_ROW_LABELS: [&str; 7] = [
    "MAP",
    "Overall Precision",
    "Class Precision",
    "Overall Recall",
    "Class Recall",
    "Overall F1 Score",
    "Class F1 Score",
];

impl MetricsReport {
    /// The seven aggregates in table row order.
    pub fn headline(&self) -> [Option<f64>; 7] {
        [self.map, self.op, self.cp, self.or_, self.cr, self.of1, self.cf1]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Single-column table with the standard row labels.
    pub fn render_table(&self, column_title: &str) -> String {
        render_table(&[(column_title, self.headline())])
    }

    /// `class,rank,recall,precision` rows for one class; `None` for classes without positives.
    pub fn pr_curve_csv(&self, class: usize) -> Option<String> {
        let points = self.pr_curves.get(class)?.as_ref()?;
        let name = self.class_names.get(class).map_or("", String::as_str);
        let mut out = String::from("class,rank,recall,precision\n");
        for p in points {
            let _ = writeln!(out, "{name},{},{},{}", p.rank, p.recall, p.precision);
        }
        Some(out)
    }
}

/// Formats a metric with four decimals, dropping a single trailing zero
/// (0.7940 -> "0.794", 0.9947 -> "0.9947"); undefined renders as "n/a".
pub fn format_metric(value: Option<f64>) -> String {
    match value {
        None => "n/a".to_string(),
        Some(v) => {
            let s = format!("{v:.4}");
            match s.strip_suffix('0') {
                Some(trimmed) => trimmed.to_string(),
                None => s,
            }
        }
    }
}

/// Multi-column metrics table: one row per aggregate, one column per model.
pub fn render_table(columns: &[(&str, [Option<f64>; 7])]) -> String {
    let label_width = TABLE_ROW_LABELS.iter().map(|l| l.len()).max().unwrap_or(0).max("Eval. Matrix".len());
    let cells: Vec<Vec<String>> = columns
        .iter()
        .map(|(_, values)| values.iter().map(|&v| format_metric(v)).collect())
        .collect();
    let widths: Vec<usize> = columns
        .iter()
        .zip(&cells)
        .map(|((title, _), col)| col.iter().map(String::len).chain([title.len()]).max().unwrap_or(0))
        .collect();

    let mut out = format!("{:<label_width$}", "Eval. Matrix");
    for ((title, _), w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {title:>w$}");
    }
    out.push('\n');
    for (r, label) in TABLE_ROW_LABELS.iter().enumerate() {
        let _ = write!(out, "{label:<label_width$}");
        for (col, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$}", col[r]);
        }
        out.push('\n');
    }
    out
}

/// Empirical `P(label j | label i)`; row `i` is `None` when class `i` never occurs.
pub fn cooccurrence_matrix(target: &TargetMatrix) -> Vec<Option<Vec<f64>>> {
    let c = target.cols;
    let mut joint = vec![0u64; c * c];
    for i in 0..target.rows {
        let present: Vec<usize> = (0..c).filter(|&j| target.get(i, j)).collect();
        for &a in &present {
            for &b in &present {
                joint[a * c + b] += 1;
            }
        }
    }
    (0..c)
        .map(|a| {
            let occurrences = joint[a * c + a];
            (occurrences > 0).then(|| {
                (0..c)
                    .map(|b| joint[a * c + b] as f64 / occurrences as f64)
                    .collect()
            })
        })
        .collect()
}
