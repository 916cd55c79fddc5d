//! Confusion matrix, overall accuracy and Cohen's kappa.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    /// Row = true class, column = predicted class.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Data(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut c = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            c.add(t, p)?;
        }
        Ok(c)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Data(format!(
                "class pair ({truth}, {pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn diagonal(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Fraction of correctly classified samples, 0 when empty.
    pub fn overall_accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.diagonal() as f64 / n as f64
    }

    /// Per-class recall; `None` for classes without samples.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let row: u64 = (0..self.classes).map(|j| self.get(i, j)).sum();
                (row > 0).then(|| self.get(i, i) as f64 / row as f64)
            })
            .collect()
    }

    /// Mean of the defined per-class recalls.
    pub fn average_accuracy(&self) -> f64 {
        let defined: Vec<f64> = self.class_accuracy().into_iter().flatten().collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }

    /// `(p_o - p_e) / (1 - p_e)`. When chance agreement is already 1 the kappa is 1 for
    /// perfect agreement and 0 otherwise.
    pub fn kappa(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let po = self.diagonal() as f64 / n;
        let pe: f64 = (0..self.classes)
            .map(|i| {
                let row: u64 = (0..self.classes).map(|j| self.get(i, j)).sum();
                let col: u64 = (0..self.classes).map(|j| self.get(j, i)).sum();
                row as f64 * col as f64
            })
            .sum::<f64>()
            / (n * n);
        if (1.0 - pe).abs() < 1e-12 {
            return if po >= 1.0 { 1.0 } else { 0.0 };
        }
        (po - pe) / (1.0 - pe)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.classes {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for i in 0..self.classes {
            let _ = write!(s, "{i}");
            for j in 0..self.classes {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl EvalReport {
    pub fn new(confusion: Confusion) -> Self {
        Self {
            oa: confusion.overall_accuracy(),
            aa: confusion.average_accuracy(),
            kappa: confusion.kappa(),
            confusion,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "OA={:.4} AA={:.4} Kappa={:.4} n={}",
            self.oa,
            self.aa,
            self.kappa,
            self.confusion.total()
        )
    }
}
