use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Test-set accuracy, its spread over seeded repetitions, and confusion
/// counts summed over repetitions (`confusion[true][predicted]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Sample standard deviation across repetitions; 0 for a single run.
    pub accuracy_std: f64,
    pub runs: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
    pub class_names: Vec<String>,
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl Metrics {
    pub fn from_predictions(pred: &[usize], labels: &[usize], class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        if pred.len() != labels.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Data("no samples to score".into()));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&p, &l) in pred.iter().zip(labels) {
            if p >= k || l >= k {
                return Err(Error::Config(format!("class index outside {k} classes")));
            }
            confusion[l][p] += 1;
        }
        let support = confusion.iter().map(|r| r.iter().sum()).collect();
        let acc = accuracy(pred, labels);
        Ok(Self {
            accuracy: acc,
            accuracy_std: 0.0,
            runs: vec![acc],
            confusion,
            support,
            class_names: class_names.to_vec(),
        })
    }

    /// Pools single-run metrics into mean and spread.
    pub fn combine(runs: &[Metrics]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Data("no runs to combine".into()))?;
        let mut out = first.clone();
        for m in &runs[1..] {
            if m.class_names != first.class_names {
                return Err(Error::Config("runs disagree on classes".into()));
            }
            for (a, b) in out.confusion.iter_mut().zip(&m.confusion) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            for (a, b) in out.support.iter_mut().zip(&m.support) {
                *a += b;
            }
        }
        out.runs = runs.iter().flat_map(|m| m.runs.iter().copied()).collect();
        out.accuracy = out.runs.iter().sum::<f64>() / out.runs.len() as f64;
        out.accuracy_std = sample_std(&out.runs);
        Ok(out)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "accuracy {:.2}% ± {:.2}% over {} run(s) (std across seeded repetitions)",
            100.0 * self.accuracy,
            100.0 * self.accuracy_std,
            self.runs.len()
        );
        let w = self.class_names.iter().map(|c| c.len()).max().unwrap_or(4).max(8);
        let _ = write!(s, "{:>w$} |", "true\\pred");
        for c in &self.class_names {
            let _ = write!(s, " {c:>w$}");
        }
        let _ = writeln!(s, " | {:>w$}", "support");
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{:>w$} |", self.class_names[i]);
            for v in row {
                let _ = write!(s, " {v:>w$}");
            }
            let _ = writeln!(s, " | {:>w$}", self.support[i]);
        }
        s
    }
}
