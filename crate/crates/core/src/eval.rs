//! Class-wise clean and robust accuracy, worst-class summaries and the
//! train/test agreement statistics (covariance and Kendall τ-b).

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{adversarial_set, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{argmax, FeedForwardNet};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracyVector {
    pub values: Vec<f64>,
}

impl ClassAccuracyVector {
    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    /// Worst-class accuracy.
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Mean over classes (equals overall accuracy on class-balanced sets).
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Worst-class error `1 − min`.
    pub fn worst_error(&self) -> f64 {
        1.0 - self.min()
    }
}

/// Predicted class of every sample (smallest index wins ties).
pub fn predictions(net: &FeedForwardNet, ds: &Dataset) -> Result<Vec<usize>> {
    (0..ds.len())
        .into_par_iter()
        .map(|q| net.logits(ds.sample(q).0).map(|z| argmax(&z)))
        .collect()
}

pub fn per_class_accuracy(net: &FeedForwardNet, ds: &Dataset) -> Result<ClassAccuracyVector> {
    let counts = ds.require_all_classes()?;
    let preds = predictions(net, ds)?;
    let mut correct = vec![0usize; ds.num_classes()];
    for (&p, &y) in preds.iter().zip(ds.labels()) {
        if p == y {
            correct[y] += 1;
        }
    }
    Ok(ClassAccuracyVector {
        values: correct
            .iter()
            .zip(&counts)
            .map(|(&c, &m)| c as f64 / m as f64)
            .collect(),
    })
}

/// Per-class accuracy on the PGD adversarial copy of `ds`.
pub fn robust_per_class(
    net: &FeedForwardNet,
    ds: &Dataset,
    cfg: &AttackConfig,
) -> Result<ClassAccuracyVector> {
    ds.require_all_classes()?;
    per_class_accuracy(net, &adversarial_set(net, ds, cfg)?)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("need at least two values".into()));
    }
    Ok(())
}

/// Sample covariance with the `n − 1` denominator.
pub fn covariance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1.0))
}

/// Counts pairs `(i, j)` with `i < j` sharing a value in a sorted run.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that returns the number of inversions (strictly decreasing pairs).
fn sort_counting_swaps(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid]) + sort_counting_swaps(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Kendall rank correlation τ-b (tie-adjusted), computed with Knight's
/// sort-and-merge algorithm.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("NaN in kendall_tau input".into()));
    }
    let n = a.len() as u64;
    let n0 = n * (n - 1) / 2;
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|p, q| p.partial_cmp(q).expect("no NaN"));
    let a_sorted: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ties_a = tied_pairs(&a_sorted);
    let ties_joint = tied_pairs(&pairs);
    let mut bs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let discordant = sort_counting_swaps(&mut bs);
    let ties_b = tied_pairs(&bs);
    if ties_a == n0 || ties_b == n0 {
        return Err(Error::InvalidArgument(
            "kendall_tau undefined for a constant vector".into(),
        ));
    }
    let num =
        n0 as f64 - ties_a as f64 - ties_b as f64 + ties_joint as f64 - 2.0 * discordant as f64;
    let den = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

/// One row of the per-class report table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub class: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

/// Summary row: accuracies (as reported in tables) and the matching
/// worst-class errors side by side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub avg_clean: f64,
    pub worst_clean: f64,
    pub avg_robust: f64,
    pub worst_robust: f64,
    pub worst_clean_error: f64,
    pub worst_robust_error: f64,
    /// Kendall τ-b between train and test class-wise robust accuracy.
    pub kendall_train_test: Option<f64>,
    /// Covariance between train and test class-wise robust accuracy.
    pub cov_train_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassRow>,
    pub summary: Summary,
}

impl EvalReport {
    /// Builds the report for one evaluation set. `train_robust`, when given,
    /// is the class-wise robust accuracy on the training set and fills the
    /// agreement statistics.
    pub fn new(
        clean: &ClassAccuracyVector,
        robust: &ClassAccuracyVector,
        train_robust: Option<&ClassAccuracyVector>,
    ) -> Self {
        let per_class = clean
            .values
            .iter()
            .zip(&robust.values)
            .enumerate()
            .map(|(class, (&c, &r))| ClassRow {
                class,
                clean_acc: c,
                robust_acc: r,
            })
            .collect();
        let (kendall, cov) = match train_robust {
            Some(tr) => (
                kendall_tau(&tr.values, &robust.values).ok(),
                covariance(&tr.values, &robust.values).ok(),
            ),
            None => (None, None),
        };
        Self {
            per_class,
            summary: Summary {
                avg_clean: clean.mean(),
                worst_clean: clean.min(),
                avg_robust: robust.mean(),
                worst_robust: robust.min(),
                worst_clean_error: clean.worst_error(),
                worst_robust_error: robust.worst_error(),
                kendall_train_test: kendall,
                cov_train_test: cov,
            },
        }
    }

    pub fn write_csvs(
        &self,
        per_class_path: impl AsRef<Path>,
        summary_path: impl AsRef<Path>,
    ) -> Result<()> {
        let mut w = csv::Writer::from_path(per_class_path)?;
        for row in &self.per_class {
            w.serialize(row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(summary_path)?;
        w.serialize(&self.summary)?;
        w.flush()?;
        Ok(())
    }
}
