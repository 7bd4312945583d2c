//! Pixel confusion counts and precision / recall / F1 / OA.

use serde::{Deserialize, Serialize};

use crate::error::{AqsError, Result};

pub const BACKGROUND: u8 = 0;
pub const MISSED: u8 = 1;
pub const MISTAKEN: u8 = 2;

/// One-vs-rest pixel counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

fn check_labels(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(AqsError::Validation(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    if let Some(i) = pred.iter().chain(gt).position(|&l| l > MISTAKEN) {
        return Err(AqsError::Validation(format!("label at flat index {i} is outside {{0, 1, 2}}")));
    }
    Ok(())
}

pub fn confusion_counts(pred: &[u8], gt: &[u8], class: u8) -> Result<ConfusionCounts> {
    check_labels(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else if precision == recall {
        // The closed form rounds away from x for about 8% of inputs.
        precision
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Percentages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        Self { precision, recall, f1: f1(precision, recall) }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub missed: ConfusionCounts,
    pub mistaken: ConfusionCounts,
    /// Pixels assigned their correct class, any class.
    pub correct: u64,
    pub total: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub missed: ClassMetrics,
    pub mistaken: ClassMetrics,
    /// 3-class overall accuracy, percent.
    pub oa: f64,
    pub counts: ReportCounts,
}

pub const CSV_HEADER: &str = "missed_precision,missed_recall,missed_f1,mistaken_precision,mistaken_recall,mistaken_f1,oa";

impl MetricsReport {
    pub fn from_counts(counts: ReportCounts) -> Self {
        Self {
            missed: ClassMetrics::from_counts(&counts.missed),
            mistaken: ClassMetrics::from_counts(&counts.mistaken),
            oa: ratio(counts.correct, counts.total),
            counts,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Header plus one row: precision, recall and F1 per error class, then OA.
    pub fn to_csv(&self) -> String {
        let v = [
            self.missed.precision,
            self.missed.recall,
            self.missed.f1,
            self.mistaken.precision,
            self.mistaken.recall,
            self.mistaken.f1,
            self.oa,
        ];
        let row: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
        format!("{CSV_HEADER}\n{}\n", row.join(","))
    }
}

/// Pixel-pooled accumulator; images are added one at a time and the metrics
/// computed once from the summed counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    counts: ReportCounts,
}

impl Tally {
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        let c = &mut self.counts;
        c.missed.merge(&confusion_counts(pred, gt, MISSED)?);
        c.mistaken.merge(&confusion_counts(pred, gt, MISTAKEN)?);
        c.correct += pred.iter().zip(gt).filter(|(p, g)| p == g).count() as u64;
        c.total += pred.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, o: &Tally) {
        let (c, d) = (&mut self.counts, &o.counts);
        c.missed.merge(&d.missed);
        c.mistaken.merge(&d.mistaken);
        c.correct += d.correct;
        c.total += d.total;
    }

    pub fn is_empty(&self) -> bool {
        self.counts.total == 0
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport::from_counts(self.counts)
    }
}
