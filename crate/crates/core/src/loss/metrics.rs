use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `C x C` counts, row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Counts given row by row.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::input(format!(
                "{} counts do not fill a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::input(format!(
                "class pair ({truth}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    /// Add another shard's counts.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::input("cannot merge confusion matrices of different sizes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn report(&self) -> Result<EvalReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::input("cannot score an empty evaluation set"));
        }
        let per_class_recall: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let support: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                (support > 0).then(|| self.get(c, c) as f64 / support as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let uar = present.iter().sum::<f64>() / present.len() as f64;
        let war = self.trace() as f64 / total as f64;
        Ok(EvalReport {
            confusion: self.clone(),
            uar,
            war,
            per_class_recall,
        })
    }
}

/// Confusion matrix, UAR, WAR and per-class recall. A class with no true
/// samples has recall `None` and is left out of the UAR mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub uar: f64,
    pub war: f64,
    pub per_class_recall: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn absent_classes(&self) -> Vec<usize> {
        self.per_class_recall
            .iter()
            .enumerate()
            .filter_map(|(c, r)| r.is_none().then_some(c))
            .collect()
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let c = self.confusion.classes();
        let mut s = String::new();
        writeln!(s, "samples: {}", self.confusion.total()).unwrap();
        writeln!(s, "UAR: {:.4}", self.uar).unwrap();
        writeln!(s, "WAR: {:.4}", self.war).unwrap();
        for (k, r) in self.per_class_recall.iter().enumerate() {
            match r {
                Some(r) => writeln!(s, "class {k} recall: {r:.4}").unwrap(),
                None => writeln!(s, "class {k} recall: absent (excluded from UAR)").unwrap(),
            }
        }
        writeln!(s, "confusion (rows = true, columns = predicted):").unwrap();
        for t in 0..c {
            let row: Vec<String> = (0..c).map(|p| format!("{:>6}", self.confusion.get(t, p))).collect();
            writeln!(s, "{}", row.join("")).unwrap();
        }
        s
    }

    /// Confusion counts as CSV with a header row of predicted classes.
    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.classes();
        let mut s = String::from("true\\pred");
        for p in 0..c {
            write!(s, ",{p}").unwrap();
        }
        s.push('\n');
        for t in 0..c {
            write!(s, "{t}").unwrap();
            for p in 0..c {
                write!(s, ",{}", self.confusion.get(t, p)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Scalars as `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        writeln!(s, "samples={}", self.confusion.total()).unwrap();
        writeln!(s, "uar={}", self.uar).unwrap();
        writeln!(s, "war={}", self.war).unwrap();
        for (k, r) in self.per_class_recall.iter().enumerate() {
            match r {
                Some(r) => writeln!(s, "recall_{k}={r}").unwrap(),
                None => writeln!(s, "recall_{k}=absent").unwrap(),
            }
        }
        s
    }
}

/// Score predictions against labels.
pub fn uar_war(predictions: &[usize], labels: &[usize], classes: usize) -> Result<EvalReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::input(format!(
            "need equal-length nonempty lists, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&p, &y) in predictions.iter().zip(labels) {
        m.record(y, p)?;
    }
    m.report()
}
