//! Confusion-matrix metrics (rows = predicted class, columns = true class),
//! part-segmentation instance mIoU, latency timing and the evaluation report.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

/// Precision, recall and F1 of one class, in percent. `flagged` marks a zero
/// denominator (the affected values are reported as 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub flagged: bool,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput {
                op: "confusion",
                detail: "matrix must be square".into(),
            });
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    /// `counts[pred][true]`.
    pub fn get(&self, pred: usize, truth: usize) -> u64 {
        self.counts[pred * self.k + truth]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(|c| c.to_vec()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, predictions: &[usize], labels: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::InvalidInput {
                op: "confusion update",
                detail: format!("{} predictions vs {} labels", predictions.len(), labels.len()),
            });
        }
        if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= self.k) {
            return Err(Error::LabelRange {
                label: bad as i64,
                classes: self.k,
            });
        }
        for (&p, &t) in predictions.iter().zip(labels) {
            self.counts[p * self.k + t] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for combining partial evaluations.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.k != self.k {
            return Err(Error::InvalidInput {
                op: "confusion merge",
                detail: format!("{} vs {} classes", self.k, other.k),
            });
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row_sum(&self, k: usize) -> u64 {
        (0..self.k).map(|j| self.get(k, j)).sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, k)).sum()
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidInput {
                op: "overall_accuracy",
                detail: "empty confusion matrix".into(),
            });
        }
        let trace: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        Ok(100.0 * trace as f64 / total as f64)
    }

    pub fn per_class_prf(&self) -> Vec<ClassScores> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let (pred, truth) = (self.row_sum(c), self.col_sum(c));
                let precision = if pred > 0 { 100.0 * tp / pred as f64 } else { 0.0 };
                let recall = if truth > 0 { 100.0 * tp / truth as f64 } else { 0.0 };
                ClassScores {
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                    flagged: pred == 0 || truth == 0,
                }
            })
            .collect()
    }

    /// Mean over classes of `tp / (pred + truth − tp)`. Classes absent from both
    /// predictions and labels are skipped.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = (0..self.k)
            .filter_map(|c| {
                let tp = self.get(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| 100.0 * tp as f64 / union as f64)
            })
            .collect();
        if ious.is_empty() {
            return Err(Error::InvalidInput {
                op: "miou",
                detail: "every class is empty".into(),
            });
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    /// Unweighted mean of the per-class F1 scores.
    pub fn average_f1(&self) -> f64 {
        let s = self.per_class_prf();
        if s.is_empty() {
            return 0.0;
        }
        s.iter().map(|c| c.f1).sum::<f64>() / s.len() as f64
    }
}

/// `2PR / (P + R)`, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Part-segmentation mIoU: for each shape, the mean IoU over the parts of its
/// category (a part absent from both prediction and truth counts as 1), then the
/// mean over shapes, in percent.
pub fn instance_miou(shapes: &[(&[usize], &[usize], &[usize])]) -> Result<f64> {
    if shapes.is_empty() {
        return Err(Error::InvalidInput {
            op: "instance_miou",
            detail: "no shapes".into(),
        });
    }
    let mut total = 0.0;
    for &(pred, truth, parts) in shapes {
        if pred.len() != truth.len() || parts.is_empty() {
            return Err(Error::InvalidInput {
                op: "instance_miou",
                detail: "mismatched prediction/label lengths or empty part list".into(),
            });
        }
        let mut sum = 0.0;
        for &p in parts {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in pred.iter().zip(truth) {
                inter += usize::from(a == p && b == p);
                union += usize::from(a == p || b == p);
            }
            sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        }
        total += sum / parts.len() as f64;
    }
    Ok(100.0 * total / shapes.len() as f64)
}

/// Median wall-clock milliseconds of `f` over `repeats` runs after 3 warm-ups.
pub fn measure_latency(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::Config("latency needs at least one repeat".into()));
    }
    for _ in 0..3 {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    };
    Ok(median.max(f64::MIN_POSITIVE))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oa: f64,
    pub miou: f64,
    pub avg_f1: f64,
    pub per_class: BTreeMap<String, ClassScores>,
    pub confusion: Vec<Vec<u64>>,
    /// Absent unless timing was requested (timings differ between runs).
    pub latency_ms: Option<f64>,
    pub config_echo: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn build(
        cm: &ConfusionMatrix,
        class_names: &[String],
        latency_ms: Option<f64>,
        config_echo: String,
        seed: u64,
    ) -> Result<Self> {
        if class_names.len() != cm.classes() {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                cm.classes()
            )));
        }
        Ok(Self {
            oa: cm.overall_accuracy()?,
            miou: cm.miou()?,
            avg_f1: cm.average_f1(),
            per_class: class_names.iter().cloned().zip(cm.per_class_prf()).collect(),
            confusion: cm.rows(),
            latency_ms,
            config_echo,
            seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn update_examples() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        cm.update(&[], &[]).unwrap();
        assert_eq!(cm.total(), 3);
        // predictions [0, 0, 1, 2] vs truth [0, 1, 1, 1]
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 0, 1, 2], &[0, 1, 1, 1]).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 1, 0]]);
        assert!(cm.update(&[3], &[0]).is_err());
    }

    #[test]
    fn oa_examples() {
        let cm = ConfusionMatrix::from_counts(&[vec![5, 0], vec![0, 7]]).unwrap();
        assert_eq!(cm.overall_accuracy().unwrap(), 100.0);
        let cm = ConfusionMatrix::from_counts(&[vec![3, 3], vec![3, 3]]).unwrap();
        assert_eq!(cm.overall_accuracy().unwrap(), 50.0);
        assert!(ConfusionMatrix::new(2).overall_accuracy().is_err());
    }

    #[test]
    fn prf_examples() {
        assert!((f1_score(93.1, 82.5) - 87.5).abs() < 0.05);
        assert!((f1_score(89.1, 95.9) - 92.4).abs() < 0.05);
        let cm = ConfusionMatrix::from_counts(&[vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 0]]).unwrap();
        let s = cm.per_class_prf();
        assert_eq!(
            s[2],
            ClassScores {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                flagged: true
            }
        );
        assert!(!s[0].flagged);
    }

    #[test]
    fn miou_examples() {
        let cm = ConfusionMatrix::from_counts(&[vec![50, 10], vec![10, 30]]).unwrap();
        let expect = 100.0 * (50.0 / 70.0 + 30.0 / 50.0) / 2.0;
        assert!((cm.miou().unwrap() - expect).abs() < 1e-12);
        assert!((cm.miou().unwrap() - 65.71).abs() < 0.005);
        let cm = ConfusionMatrix::from_counts(&[vec![4, 0], vec![0, 9]]).unwrap();
        assert_eq!(cm.miou().unwrap(), 100.0);
        // class 1 never predicted correctly
        let cm = ConfusionMatrix::from_counts(&[vec![4, 3], vec![0, 0]]).unwrap();
        assert!((cm.miou().unwrap() - 100.0 * (4.0 / 7.0) / 2.0).abs() < 1e-12);
        assert!(ConfusionMatrix::new(2).miou().is_err());
    }

    #[test]
    fn average_f1_examples() {
        let cm = ConfusionMatrix::from_counts(&[vec![2, 0], vec![0, 2]]).unwrap();
        assert_eq!(cm.average_f1(), 100.0);
        let f: Vec<f64> = [(93.1, 82.5), (89.1, 95.9), (99.0, 98.8), (94.1, 97.7), (77.4, 55.9), (94.3, 86.3)]
            .iter()
            .map(|&(p, r)| f1_score(p, r))
            .collect();
        let avg = f.iter().sum::<f64>() / 6.0;
        // reference average F1: 88.3
        assert!((avg - 88.3).abs() < 0.05, "{avg}");
    }

    #[test]
    fn instance_miou_hand() {
        // shape A parts {0,1}: IoU(0) = 1/2, IoU(1) = 1/2 → 0.5; shape B parts {2,3}: part 3 absent → (1 + 1)/2
        let a = (&[0, 1, 1][..], &[0, 0, 1][..], &[0, 1][..]);
        let b = (&[2, 2][..], &[2, 2][..], &[2, 3][..]);
        assert!((instance_miou(&[a, b]).unwrap() - 75.0).abs() < 1e-12);
    }

    #[test]
    fn latency_positive() {
        let mut x = 0u64;
        let ms = measure_latency(3, || {
            x = x.wrapping_add(1);
            Ok(())
        })
        .unwrap();
        assert!(ms > 0.0);
        assert_eq!(x, 6);
    }

    #[test]
    fn report_has_keys() {
        let cm = ConfusionMatrix::from_counts(&[vec![1, 0], vec![1, 2]]).unwrap();
        let r = EvalReport::build(&cm, &["a".into(), "b".into()], None, "x = 1".into(), 7).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in ["oa", "miou", "avg_f1", "per_class", "confusion", "latency_ms", "config_echo", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["per_class"]["a"].get("flagged").is_some());
    }

    proptest! {
        #[test]
        fn metrics_in_range_and_permutation_invariant(
            preds in proptest::collection::vec(0usize..4, 1..60),
            seed in 0u64..1000,
        ) {
            let labels: Vec<usize> = preds.iter().enumerate().map(|(i, &p)| (p + (i as u64 * 7 + seed) as usize % 3) % 4).collect();
            let mut cm = ConfusionMatrix::new(4);
            cm.update(&preds, &labels).unwrap();
            let perm = [2usize, 0, 3, 1];
            let mut pm = ConfusionMatrix::new(4);
            let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
            let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            pm.update(&pp, &pl).unwrap();
            for (a, b) in [
                (cm.overall_accuracy().unwrap(), pm.overall_accuracy().unwrap()),
                (cm.miou().unwrap(), pm.miou().unwrap()),
                (cm.average_f1(), pm.average_f1()),
            ] {
                prop_assert!((0.0..=100.0).contains(&a));
                prop_assert!((a - b).abs() < 1e-9);
            }
            // recall equals the diagonal of the column-normalized matrix
            for (c, s) in cm.per_class_prf().iter().enumerate() {
                let col: u64 = (0..4).map(|i| cm.get(i, c)).sum();
                if col > 0 {
                    prop_assert!((s.recall - 100.0 * cm.get(c, c) as f64 / col as f64).abs() < 1e-12);
                }
            }
        }
    }
}
