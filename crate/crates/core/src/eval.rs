//! Fold assignment, confusion matrices and the precision/recall/F metrics.
//!
//! Classes are indexed in model order: quadrotor, fixed-wing, hexarotor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ulog::VehicleType;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("class {class} has {size} instances, fewer than the {k} folds")]
    ClassTooSmall {
        class: VehicleType,
        size: usize,
        k: usize,
    },
    #[error("{predictions} predictions for {truth} labels")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("aggregation needs at least two folds, got {0}")]
    TooFewFolds(usize),
    #[error("invalid fold count {0}")]
    InvalidK(usize),
    #[error("class index {0} out of range")]
    InvalidClass(usize),
}

/// Fold id of every instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Shuffles each class with the seed and deals its members round-robin
/// over the folds. The dealing position carries over from one class to the
/// next so fold sizes stay within one of each other.
pub fn stratified_kfold(labels: &[VehicleType], k: usize, seed: u64) -> Result<FoldAssignment, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0usize; labels.len()];
    let mut next = 0usize;
    for class in VehicleType::CLASSES.into_iter().chain([VehicleType::Other]) {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(EvalError::ClassTooSmall {
                class,
                size: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, folds })
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; 3]; 3]);

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|c| self.0[c][c]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.0[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..3).map(|r| self.0[r][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total()).0
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for r in 0..3 {
            for c in 0..3 {
                self.0[r][c] += other.0[r][c];
            }
        }
    }

    /// Largest off-diagonal cell as `(true, predicted, count)`; ties go to
    /// the first in row-major order.
    pub fn largest_off_diagonal(&self) -> (usize, usize, u64) {
        let mut best = (0, 1, self.0[0][1]);
        for r in 0..3 {
            for c in 0..3 {
                if r != c && self.0[r][c] > best.2 {
                    best = (r, c, self.0[r][c]);
                }
            }
        }
        best
    }
}

pub fn confusion(predictions: &[usize], truth: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(truth) {
        if p >= 3 || t >= 3 {
            return Err(EvalError::InvalidClass(p.max(t)));
        }
        cm.0[t][p] += 1;
    }
    Ok(cm)
}

/// `num / den`, or 0 flagged as undefined when `den` is 0.
fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    /// Set when the class was never predicted.
    pub precision_undefined: bool,
    /// Set when the class never occurs.
    pub recall_undefined: bool,
}

impl ClassMetric {
    pub fn new(precision: f64, recall: f64) -> Self {
        ClassMetric {
            precision,
            recall,
            f: f_score(precision, recall),
            precision_undefined: false,
            recall_undefined: false,
        }
    }
}

pub fn class_metrics(cm: &ConfusionMatrix) -> [ClassMetric; 3] {
    std::array::from_fn(|c| {
        let (precision, precision_undefined) = ratio(cm.0[c][c], cm.col_sum(c));
        let (recall, recall_undefined) = ratio(cm.0[c][c], cm.row_sum(c));
        ClassMetric {
            precision,
            recall,
            f: f_score(precision, recall),
            precision_undefined,
            recall_undefined,
        }
    })
}

/// Unweighted mean of per-class F-scores.
pub fn macro_f(f_scores: &[f64]) -> f64 {
    f_scores.iter().sum::<f64>() / f_scores.len() as f64
}

/// Metrics of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub per_class: [ClassMetric; 3],
    pub macro_f: f64,
    pub confusion: ConfusionMatrix,
}

impl FoldMetrics {
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        let per_class = class_metrics(&cm);
        FoldMetrics {
            macro_f: macro_f(&per_class.map(|m| m.f)),
            per_class,
            confusion: cm,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd, EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewFolds(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(MeanStd { mean, std: var.sqrt() })
}

/// Fold-averaged metrics, indexed by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: [MeanStd; 3],
    pub recall: [MeanStd; 3],
    pub f: [MeanStd; 3],
    pub macro_f: MeanStd,
}

pub fn aggregate_folds(folds: &[FoldMetrics]) -> Result<Aggregate, EvalError> {
    if folds.len() < 2 {
        return Err(EvalError::TooFewFolds(folds.len()));
    }
    let per = |get: &dyn Fn(&ClassMetric) -> f64| -> Result<[MeanStd; 3], EvalError> {
        let mut out = [MeanStd::default(); 3];
        for (c, slot) in out.iter_mut().enumerate() {
            let values: Vec<f64> = folds.iter().map(|m| get(&m.per_class[c])).collect();
            *slot = mean_std(&values)?;
        }
        Ok(out)
    };
    Ok(Aggregate {
        precision: per(&|m| m.precision)?,
        recall: per(&|m| m.recall)?,
        f: per(&|m| m.f)?,
        macro_f: mean_std(&folds.iter().map(|m| m.macro_f).collect::<Vec<_>>())?,
    })
}

/// Sum of the per-fold confusion matrices.
pub fn pooled_confusion(folds: &[FoldMetrics]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    folds.iter().for_each(|m| cm.add(&m.confusion));
    cm
}

/// Scores of two trivial classifiers on a class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub majority: [ClassMetric; 3],
    pub majority_macro_f: f64,
    pub uniform: [ClassMetric; 3],
    pub uniform_macro_f: f64,
}

/// Always predicting the largest class, and guessing uniformly at random
/// (expected precision equals prevalence, expected recall 1/3).
pub fn baseline_scores(counts: [usize; 3]) -> Baselines {
    let total: usize = counts.iter().sum();
    let largest = (0..3).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
    let mut majority = [ClassMetric::default(); 3];
    majority[largest] = ClassMetric::new(counts[largest] as f64 / total as f64, 1.0);
    let uniform: [ClassMetric; 3] =
        std::array::from_fn(|c| ClassMetric::new(counts[c] as f64 / total as f64, 1.0 / 3.0));
    Baselines {
        majority_macro_f: macro_f(&majority.map(|m| m.f)),
        majority,
        uniform_macro_f: macro_f(&uniform.map(|m| m.f)),
        uniform,
    }
}
