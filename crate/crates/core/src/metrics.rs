//! Confusion matrices and precision / recall / F1 / accuracy.

use std::fmt::Display;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `(true class, predicted class)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|k| self.counts[k][k]).sum()
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<usize>>) -> Result<Self> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidParameter(format!(
                "confusion matrix must be {k}x{k}"
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    /// CSV with a `true\predicted` corner cell and one row per true class.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let ctx = "confusion csv";
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header).map_err(|e| Error::csv(ctx, e))?;
        for (name, row) in self.classes.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec).map_err(|e| Error::csv(ctx, e))?;
        }
        w.flush().map_err(|e| Error::io(ctx, e))
    }
}

pub fn confusion<T: PartialEq + Display>(
    truth: &[T],
    predicted: &[T],
    classes: &[T],
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: predicted.len(),
        });
    }
    let index = |v: &T| {
        classes
            .iter()
            .position(|c| c == v)
            .ok_or_else(|| Error::UnknownLabel(v.to_string()))
    };
    let k = classes.len();
    let mut counts = vec![vec![0; k]; k];
    for (t, p) in truth.iter().zip(predicted) {
        counts[index(t)?][index(p)?] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.iter().map(|c| c.to_string()).collect(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// A metric that was set to 0 because its denominator was 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroDivision {
    pub class: String,
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: AveragedMetrics,
    pub weighted_avg: AveragedMetrics,
    pub zero_division: Vec<ZeroDivision>,
}

/// Which score drives model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroPrecision,
    MacroRecall,
    MacroF1,
    WeightedF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroPrecision => "macro_precision",
            Metric::MacroRecall => "macro_recall",
            Metric::MacroF1 => "macro_f1",
            Metric::WeightedF1 => "weighted_f1",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidParameter(format!("unknown metric `{s}`")))
    }
}

impl EvaluationReport {
    pub fn score(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::MacroPrecision => self.macro_avg.precision,
            Metric::MacroRecall => self.macro_avg.recall,
            Metric::MacroF1 => self.macro_avg.f1,
            Metric::WeightedF1 => self.weighted_avg.f1,
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn evaluate(cm: &ConfusionMatrix) -> Result<EvaluationReport> {
    let k = cm.classes.len();
    let total = cm.total();
    if k == 0 || total == 0 {
        return Err(Error::EmptyInput("confusion matrix has no samples"));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut zero_division = Vec::new();
    let mut flag = |class: &str, metric: &str| {
        zero_division.push(ZeroDivision {
            class: class.to_string(),
            metric: metric.to_string(),
        })
    };
    for c in 0..k {
        let name = &cm.classes[c];
        let tp = cm.counts[c][c];
        let predicted: usize = (0..k).map(|r| cm.counts[r][c]).sum();
        let support: usize = cm.counts[c].iter().sum();
        let precision = ratio(tp, predicted).unwrap_or_else(|| {
            flag(name, "precision");
            0.0
        });
        let recall = ratio(tp, support).unwrap_or_else(|| {
            flag(name, "recall");
            0.0
        });
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            flag(name, "f1");
            0.0
        };
        per_class.push(ClassMetrics {
            class: name.clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let kf = k as f64;
    let macro_avg = AveragedMetrics {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / kf,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / kf,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / kf,
    };
    let weight = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / total as f64
    };
    let weighted_avg = AveragedMetrics {
        precision: weight(|m| m.precision),
        recall: weight(|m| m.recall),
        f1: weight(|m| m.f1),
    };
    Ok(EvaluationReport {
        accuracy: cm.trace() as f64 / total as f64,
        confusion: cm.clone(),
        per_class,
        macro_avg,
        weighted_avg,
        zero_division,
    })
}

/// Confusion matrix plus metrics in one call.
pub fn evaluate_labels(truth: &[usize], predicted: &[usize], classes: &[String]) -> Result<EvaluationReport> {
    let names: Vec<&str> = classes.iter().map(String::as_str).collect();
    let t: Vec<&str> = truth
        .iter()
        .map(|&i| names.get(i).copied().ok_or_else(|| Error::UnknownLabel(i.to_string())))
        .collect::<Result<_>>()?;
    let p: Vec<&str> = predicted
        .iter()
        .map(|&i| names.get(i).copied().ok_or_else(|| Error::UnknownLabel(i.to_string())))
        .collect::<Result<_>>()?;
    evaluate(&confusion(&t, &p, &names)?)
}
