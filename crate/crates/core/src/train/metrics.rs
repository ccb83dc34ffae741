use serde::Serialize;

use crate::error::{Error, Result};

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Diagonal over row sum; 0 for classes without samples.
    pub fn recall(&self) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let row: u64 = (0..self.n_classes).map(|p| self.get(c, p)).sum();
                if row == 0 { 0.0 } else { self.get(c, c) as f64 / row as f64 }
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.n_classes).map(|c| self.get(c, c)).sum();
        if self.total() == 0 { 0.0 } else { hits as f64 / self.total() as f64 }
    }

    /// One row per true class: the counts followed by the recall.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true");
        for p in 0..self.n_classes {
            s.push_str(&format!(",pred_{p}"));
        }
        s.push_str(",recall\n");
        for (c, r) in self.recall().iter().enumerate() {
            s.push_str(&c.to_string());
            for p in 0..self.n_classes {
                s.push_str(&format!(",{}", self.get(c, p)));
            }
            s.push_str(&format!(",{r:.6}\n"));
        }
        s
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::ShapeMismatch(format!("class index {} for {n_classes} classes", p.max(t))));
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("epoch,split,accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6}\n", r.epoch, r.split, r.accuracy));
    }
    s
}
