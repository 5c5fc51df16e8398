//! Final classifiers: k-NN, standardized softmax regression, and an
//! external gradient-boosting adapter.
//!
//! External adapter contract: the command is run as
//! `<program> <args>... <train.csv> <test.csv> <predictions.csv>`.
//! `train.csv` has a header `label,f0,f1,...` and one row per sample;
//! `test.csv` has a header `f0,f1,...`. The program must write one integer
//! class id per line to `predictions.csv`, in test-row order.

use std::fmt::Write as _;
use std::fs;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::features::{knn, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClassifierSpec {
    Knn {
        #[serde(default = "default_k")]
        k: usize,
    },
    LinearSoftmax {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_epochs")]
        epochs: usize,
        #[serde(default)]
        seed: u64,
    },
    ExternalGbdt { command: Vec<String> },
}

fn default_k() -> usize {
    5
}
fn default_lr() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    500
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec::Knn { k: default_k() }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        match self {
            ClassifierSpec::Knn { k } if *k == 0 => Err(EvalError::Config("k must be positive".into())),
            ClassifierSpec::LinearSoftmax { lr, .. } if !(*lr > 0.0 && lr.is_finite()) => {
                Err(EvalError::Config(format!("learning rate {lr} must be positive")))
            }
            ClassifierSpec::ExternalGbdt { command } if command.is_empty() => {
                Err(EvalError::Config("external classifier needs a command".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Softmax {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `classes x dim`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Knn { train: FeatureMatrix, k: usize },
    Softmax(Softmax),
    External { train: FeatureMatrix, command: Vec<String> },
}

pub fn train_classifier(spec: &ClassifierSpec, train: &FeatureMatrix) -> Result<Classifier, EvalError> {
    spec.validate()?;
    let distinct: std::collections::BTreeSet<usize> = train.labels().iter().copied().collect();
    if distinct.len() < 2 {
        return Err(EvalError::Config(format!(
            "a classifier needs at least 2 classes, got {}",
            distinct.len()
        )));
    }
    Ok(match spec {
        ClassifierSpec::Knn { k } => Classifier::Knn {
            train: train.clone(),
            k: *k,
        },
        ClassifierSpec::LinearSoftmax { lr, epochs, seed } => {
            Classifier::Softmax(fit_softmax(train, *lr, *epochs, *seed))
        }
        ClassifierSpec::ExternalGbdt { command } => Classifier::External {
            train: train.clone(),
            command: command.clone(),
        },
    })
}

impl Classifier {
    pub fn predict(&self, queries: &FeatureMatrix) -> Result<Vec<usize>, EvalError> {
        match self {
            Classifier::Knn { train, k } => {
                check_dim(train.dim(), queries.dim())?;
                Ok(knn::predict(train, queries, *k))
            }
            Classifier::Softmax(s) => {
                check_dim(s.mean.len(), queries.dim())?;
                Ok(queries.rows().map(|r| s.predict_row(r)).collect())
            }
            Classifier::External { train, command } => {
                check_dim(train.dim(), queries.dim())?;
                run_external(command, train, queries)
            }
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), EvalError> {
    if expected != got {
        return Err(EvalError::Input(format!(
            "classifier trained on {expected} features, queried with {got}"
        )));
    }
    Ok(())
}

impl Softmax {
    fn standardize(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&x, (m, s))| (x as f64 - m) / s)
            .collect()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..self.classes)
            .map(|c| {
                self.bias[c]
                    + self.weights[c * d..(c + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    fn predict_row(&self, row: &[f32]) -> usize {
        let z = self.logits(&self.standardize(row));
        // first maximum wins
        z.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

const CONVERGED: f64 = 1e-9;

/// Full-batch gradient descent on mean cross-entropy over standardized
/// features; stops early once the loss moves by less than 1e-9.
fn fit_softmax(train: &FeatureMatrix, lr: f64, epochs: usize, seed: u64) -> Softmax {
    let n = train.n();
    let d = train.dim();
    let classes = train.num_classes();
    let mut mean = vec![0.0; d];
    for r in train.rows() {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x as f64 / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for r in train.rows() {
        for ((s, &x), m) in scale.iter_mut().zip(r).zip(&mean) {
            *s += (x as f64 - m) * (x as f64 - m) / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid");
    let mut model = Softmax {
        mean,
        scale,
        weights: (0..classes * d).map(|_| normal.sample(&mut rng)).collect(),
        bias: vec![0.0; classes],
        classes,
        epochs_run: 0,
    };
    let xs: Vec<Vec<f64>> = train.rows().map(|r| model.standardize(r)).collect();
    let labels = train.labels();
    let mut previous = f64::INFINITY;
    for _ in 0..epochs {
        let mut gw = vec![0.0; classes * d];
        let mut gb = vec![0.0; classes];
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            let mut p = model.logits(x);
            softmax_in_place(&mut p);
            loss -= p[y].max(1e-300).ln();
            p[y] -= 1.0;
            for c in 0..classes {
                gb[c] += p[c];
                for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += p[c] * v;
                }
            }
        }
        loss /= n as f64;
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= lr * g / n as f64;
        }
        for (b, g) in model.bias.iter_mut().zip(&gb) {
            *b -= lr * g / n as f64;
        }
        model.epochs_run += 1;
        if (previous - loss).abs() < CONVERGED {
            break;
        }
        previous = loss;
    }
    model
}

fn run_external(command: &[String], train: &FeatureMatrix, test: &FeatureMatrix) -> Result<Vec<usize>, EvalError> {
    let dir = tempfile::tempdir().map_err(|e| EvalError::External(e.to_string()))?;
    let header = |prefix: &str| {
        let mut h = prefix.to_string();
        for j in 0..train.dim() {
            if !h.is_empty() {
                h.push(',');
            }
            let _ = write!(h, "f{j}");
        }
        h.push('\n');
        h
    };
    let mut train_csv = header("label");
    for (r, &y) in train.rows().zip(train.labels()) {
        let _ = write!(train_csv, "{y}");
        for v in r {
            let _ = write!(train_csv, ",{v:?}");
        }
        train_csv.push('\n');
    }
    let mut test_csv = header("");
    for r in test.rows() {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        test_csv.push_str(&cells.join(","));
        test_csv.push('\n');
    }
    let train_path = dir.path().join("train.csv");
    let test_path = dir.path().join("test.csv");
    let pred_path = dir.path().join("predictions.csv");
    fs::write(&train_path, train_csv).map_err(|e| EvalError::io(&train_path, e))?;
    fs::write(&test_path, test_csv).map_err(|e| EvalError::io(&test_path, e))?;
    let status = Command::new(&command[0])
        .args(&command[1..])
        .arg(&train_path)
        .arg(&test_path)
        .arg(&pred_path)
        .status()
        .map_err(|e| EvalError::External(format!("cannot run {}: {e}", command[0])))?;
    if !status.success() {
        return Err(EvalError::External(format!("{} exited with {status}", command[0])));
    }
    let text = fs::read_to_string(&pred_path).map_err(|e| EvalError::io(&pred_path, e))?;
    let preds = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| EvalError::External(format!("unreadable prediction {l:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if preds.len() != test.n() {
        return Err(EvalError::External(format!(
            "{} predictions for {} test rows",
            preds.len(),
            test.n()
        )));
    }
    Ok(preds)
}
