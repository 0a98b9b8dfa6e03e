//! Test-set prediction, confusion matrices and per-class metrics.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{forward_batched, ModelParams};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub logits: Vec<Vec<f32>>,
}

/// Predicted class per image. Batches are evaluated concurrently.
pub fn predict(
    params: &ModelParams<f32>,
    images: &[&Tensor<f32>],
    batch_size: usize,
) -> Result<Predictions> {
    let logits = forward_batched(params, images, batch_size)?;
    Ok(Predictions {
        labels: logits.iter().map(|l| argmax(l)).collect(),
        logits,
    })
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.k..(truth + 1) * self.k]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, pred)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Each nonzero row divided by its sum; zero rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        (0..self.k)
            .map(|t| {
                let s = self.row_sum(t);
                self.row(t)
                    .iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = header(names);
        for (t, name) in names.iter().enumerate() {
            let cells: Vec<String> = self.row(t).iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }

    pub fn to_normalized_csv(&self, names: &[String]) -> String {
        let mut out = header(names);
        for (row, name) in self.normalized().iter().zip(names) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }
}

fn header(names: &[String]) -> String {
    format!("true\\pred,{}\n", names.join(","))
}

pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(k);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::Contract(format!(
                "label pair ({t}, {p}) outside {k} classes"
            )));
        }
        m.counts[t * k + p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub total: u64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn report(m: &ConfusionMatrix) -> ClassReport {
    let k = m.num_classes();
    let classes: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = m.get(c, c);
            let precision = ratio(tp, m.col_sum(c));
            let recall = ratio(tp, m.row_sum(c));
            ClassMetrics {
                support: m.row_sum(c),
                precision,
                recall,
                f1: f1_score(precision, recall),
            }
        })
        .collect();
    let total = m.total();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if k == 0 {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / k as f64
        }
    };
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            classes.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
        }
    };
    let macro_avg = Averages {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
    };
    // Support-weighted recall is Σ tp / total, i.e. the accuracy; computing
    // it from counts keeps the two bitwise equal.
    let accuracy = ratio(m.trace(), total);
    let weighted_avg = Averages {
        precision: weighted(|c| c.precision),
        recall: accuracy,
        f1: weighted(|c| c.f1),
    };
    ClassReport {
        accuracy,
        total,
        classes,
        macro_avg,
        weighted_avg,
    }
}

impl ClassReport {
    /// Aligned table with one row per class and the two average rows.
    pub fn to_table(&self, names: &[String]) -> String {
        let width = names.iter().map(String::len).max().unwrap_or(0).max(12);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}\n",
            "class", "precision", "recall", "f1-score", "support"
        );
        for (c, name) in self.classes.iter().zip(names) {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>9.4}  {:>6.4}  {:>8.4}  {:>7}",
                c.precision, c.recall, c.f1, c.support
            );
        }
        for (label, a) in [
            ("macro avg", &self.macro_avg),
            ("weighted avg", &self.weighted_avg),
        ] {
            let _ = writeln!(
                out,
                "{label:<width$}  {:>9.4}  {:>6.4}  {:>8.4}  {:>7}",
                a.precision, a.recall, a.f1, self.total
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>6}  {:>8}  {:>7}",
            "accuracy", self.accuracy, "", "", self.total
        );
        out
    }

    /// `key=value` lines, one metric per line.
    pub fn to_kv(&self, names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy={}", self.accuracy);
        let _ = writeln!(out, "total={}", self.total);
        for (c, name) in self.classes.iter().zip(names) {
            let _ = writeln!(out, "class.{name}.precision={}", c.precision);
            let _ = writeln!(out, "class.{name}.recall={}", c.recall);
            let _ = writeln!(out, "class.{name}.f1={}", c.f1);
            let _ = writeln!(out, "class.{name}.support={}", c.support);
        }
        for (label, a) in [("macro", &self.macro_avg), ("weighted", &self.weighted_avg)] {
            let _ = writeln!(out, "{label}.precision={}", a.precision);
            let _ = writeln!(out, "{label}.recall={}", a.recall);
            let _ = writeln!(out, "{label}.f1={}", a.f1);
        }
        out
    }
}
