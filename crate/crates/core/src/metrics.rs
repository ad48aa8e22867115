//! Per-class confusion counts and the unweighted mean F1 over all classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl MetricsAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn update(&mut self, prediction: usize, label: usize) -> Result<()> {
        let c = self.classes();
        if prediction >= c || label >= c {
            return Err(Error::Data(format!(
                "class id out of range [0, {c}): prediction {prediction}, label {label}"
            )));
        }
        if prediction == label {
            self.tp[label] += 1;
        } else {
            self.fp[prediction] += 1;
            self.fn_[label] += 1;
        }
        Ok(())
    }

    pub fn extend(&mut self, predictions: &[usize], labels: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::Dimension {
                op: "metrics",
                left: vec![predictions.len()],
                right: vec![labels.len()],
            });
        }
        for (i, (&p, &l)) in predictions.iter().zip(labels).enumerate() {
            self.update(p, l)
                .map_err(|e| Error::Data(format!("frame {i}: {e}")))?;
        }
        Ok(())
    }

    /// Associative, commutative merge of two shards.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Dimension {
                op: "metrics merge",
                left: vec![self.classes()],
                right: vec![other.classes()],
            });
        }
        for c in 0..self.classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        Ok(())
    }

    pub fn evaluated(&self) -> u64 {
        self.tp.iter().sum::<u64>() + self.fn_.iter().sum::<u64>()
    }

    pub fn report(&self) -> MetricsReport {
        let per_class_f1: Vec<f64> = (0..self.classes())
            .map(|c| {
                let denom = 2 * self.tp[c] + self.fp[c] + self.fn_[c];
                if denom == 0 {
                    0.0
                } else {
                    2.0 * self.tp[c] as f64 / denom as f64
                }
            })
            .collect();
        let mean_f1 = per_class_f1.iter().sum::<f64>() / self.classes() as f64;
        MetricsReport {
            mean_f1,
            per_class_f1,
            tp: self.tp.clone(),
            fp: self.fp.clone(),
            fn_: self.fn_.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
}

/// Mean F1 over all `classes`; a class with no support and no predictions
/// contributes 0.
pub fn mean_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Data("mean_f1 needs at least one prediction".into()));
    }
    let mut acc = MetricsAccumulator::new(classes);
    acc.extend(predictions, labels)?;
    Ok(acc.report())
}

/// One JSON-lines record per (epoch, split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub strategy: String,
    pub mean_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub loss: f64,
    pub lr: f64,
}
