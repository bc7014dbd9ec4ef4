//! Pixel confusion counts and the five change-detection scores.

use std::io::Write;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positive class is "changed".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `FP / (FP + TN)`; 0 when there are no negatives.
    pub fn false_positive_rate(&self) -> f64 {
        let neg = self.fp + self.tn;
        if neg == 0 {
            0.0
        } else {
            self.fp as f64 / neg as f64
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Tallies two `{0, 1}` masks of equal length.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "confusion",
            "data",
            format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => {
                return Err(Error::Validation(format!(
                    "confusion: non-binary value at pixel {i} (pred {p}, gt {g})"
                )))
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub iou: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub beta: f64,
}

pub const CSV_HEADER: [&str; 5] = ["oa", "iou", "f1", "recall", "precision"];

impl MetricsReport {
    fn values(&self) -> [f64; 5] {
        [self.oa, self.iou, self.f1, self.recall, self.precision]
    }

    /// JSON object with the five scores at six decimals.
    pub fn to_json(&self) -> String {
        let body: Vec<String> = CSV_HEADER
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("\"{k}\": {v:.6}"))
            .collect();
        format!("{{{}}}", body.join(", "))
    }

    pub fn csv_row(&self) -> Vec<String> {
        self.values().iter().map(|v| format!("{v:.6}")).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER)?;
        wr.write_record(self.csv_row())?;
        wr.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }
}

pub fn compute_metrics(c: &ConfusionCounts, beta: f64) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Usage("compute_metrics: no pixels counted".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::param("compute_metrics", format!("beta must be positive, got {beta}")));
    }
    let vacuous = c.tp == 0 && c.fp == 0 && c.fn_ == 0;
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            if vacuous {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let iou = ratio(c.tp, c.tp + c.fn_ + c.fp);
    let oa = (c.tp + c.tn) as f64 / total as f64;
    let b2 = beta * beta;
    let f1 = if precision + recall > 0.0 {
        (1.0 + b2) * precision * recall / (b2 * (precision + recall))
    } else if vacuous {
        1.0
    } else {
        0.0
    };
    Ok(MetricsReport {
        oa,
        iou,
        f1,
        recall,
        precision,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_outcomes() {
        let c = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(c, ConfusionCounts::new(1, 1, 1, 1));
    }

    #[test]
    fn complement_has_no_hits() {
        let gt = [1, 0, 0, 1, 1];
        let pred: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn non_binary_and_mismatch_rejected() {
        assert!(matches!(confusion(&[2], &[1]), Err(Error::Validation(_))));
        assert!(matches!(confusion(&[1, 0], &[1]), Err(Error::Shape { .. })));
    }

    #[test]
    fn reference_counts() {
        let m = compute_metrics(&ConfusionCounts::new(50, 10, 20, 920), 1.0).unwrap();
        assert!((m.precision - 50.0 / 60.0).abs() < 1e-12);
        assert!((m.recall - 50.0 / 70.0).abs() < 1e-12);
        assert!((m.iou - 0.625).abs() < 1e-12);
        assert!((m.oa - 0.97).abs() < 1e-12);
        assert!((m.f1 - 100.0 / 130.0).abs() < 1e-12);
    }

    #[test]
    fn all_negative_is_vacuously_perfect() {
        let m = compute_metrics(&ConfusionCounts::new(0, 0, 0, 10), 1.0).unwrap();
        assert_eq!([m.oa, m.iou, m.f1, m.recall, m.precision], [1.0; 5]);
    }

    #[test]
    fn empty_counts_are_usage_error() {
        assert!(matches!(
            compute_metrics(&ConfusionCounts::default(), 1.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn json_has_six_decimals() {
        let m = compute_metrics(&ConfusionCounts::new(1, 1, 1, 1), 1.0).unwrap();
        assert_eq!(
            m.to_json(),
            "{\"oa\": 0.500000, \"iou\": 0.333333, \"f1\": 0.500000, \"recall\": 0.500000, \"precision\": 0.500000}"
        );
    }
}
