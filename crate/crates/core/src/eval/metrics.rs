use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub weighted_f1: f64,
    pub per_class_f1: BTreeMap<String, f64>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
    pub support: Vec<usize>,
}

/// Rounds to four decimal places.
pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

impl MetricsReport {
    /// Copy with every real-valued metric rounded to four decimals.
    pub fn rounded(&self) -> Self {
        Self {
            accuracy: round4(self.accuracy),
            macro_precision: round4(self.macro_precision),
            macro_recall: round4(self.macro_recall),
            weighted_f1: round4(self.weighted_f1),
            per_class_f1: self
                .per_class_f1
                .iter()
                .map(|(k, v)| (k.clone(), round4(*v)))
                .collect(),
            confusion: self.confusion.clone(),
            class_names: self.class_names.clone(),
            support: self.support.clone(),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro averages run over classes that occur in the truths or the
/// predictions. Classes without support carry zero weight in the weighted F1.
pub fn compute_metrics(
    predictions: &[usize],
    truths: &[usize],
    class_names: &[String],
) -> Result<MetricsReport, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::Input(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(EvalError::Input("nothing to score".into()));
    }
    let c = class_names.len();
    if let Some(bad) = predictions.iter().chain(truths).find(|&&l| l >= c) {
        return Err(EvalError::Input(format!(
            "label {bad} outside the {c} known classes"
        )));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &t) in predictions.iter().zip(truths) {
        confusion[t][p] += 1;
    }
    let n = truths.len();
    let support: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
    let predicted: Vec<usize> = (0..c).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
    let trace: usize = (0..c).map(|i| confusion[i][i]).sum();

    let mut per_class_f1 = BTreeMap::new();
    let (mut p_sum, mut r_sum, mut active, mut weighted) = (0.0, 0.0, 0usize, 0.0);
    for i in 0..c {
        let tp = confusion[i][i];
        let precision = ratio(tp, predicted[i]);
        let recall = ratio(tp, support[i]);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class_f1.insert(class_names[i].clone(), f1);
        if support[i] == 0 {
            log::warn!("class {} has no test samples; excluded from weighted F1", class_names[i]);
        }
        if support[i] > 0 || predicted[i] > 0 {
            p_sum += precision;
            r_sum += recall;
            active += 1;
        }
        weighted += support[i] as f64 * f1;
    }
    Ok(MetricsReport {
        accuracy: ratio(trace, n),
        macro_precision: p_sum / active as f64,
        macro_recall: r_sum / active as f64,
        weighted_f1: weighted / n as f64,
        per_class_f1,
        confusion,
        class_names: class_names.to_vec(),
        support,
    })
}
