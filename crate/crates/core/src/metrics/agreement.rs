use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{MetricError, Rate};
use crate::model::ConfusionMatrix;

/// Quadratic-weighted Cohen's kappa.
///
/// `1 - Σ w·O / Σ w·E` with `w_ij = (i-j)² / (k-1)²` and `E_ij = row_i·col_j / n`.
pub fn quadratic_weighted_kappa(m: &ConfusionMatrix) -> Result<f64, MetricError> {
    let n = m.n();
    if n == 0 {
        return Err(MetricError::EmptyMatrix);
    }
    let k = m.k();
    let norm = ((k - 1) * (k - 1)) as f64;
    let rows = m.row_totals();
    let cols = m.column_totals();
    let n = n as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d = i.abs_diff(j);
            if d == 0 {
                continue;
            }
            let w = (d * d) as f64 / norm;
            observed += w * m.get(i, j) as f64;
            expected += w * rows[i] as f64 * cols[j] as f64 / n;
        }
    }
    if expected <= 0.0 {
        return Err(MetricError::DegenerateMarginals);
    }
    Ok(1.0 - observed / expected)
}

/// Collapses a k-class ordinal matrix to 2×2 with classes at or above
/// `cutoff` as the positive class. Index 0 is negative, 1 positive.
pub fn binarize(m: &ConfusionMatrix, cutoff: usize) -> Result<ConfusionMatrix, MetricError> {
    let k = m.k();
    if cutoff == 0 || cutoff >= k {
        return Err(MetricError::InvalidCutoff { cutoff, k });
    }
    let mut counts = vec![vec![0u64; 2]; 2];
    for (i, row) in m.counts().iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            counts[usize::from(i >= cutoff)][usize::from(j >= cutoff)] += c;
        }
    }
    Ok(ConfusionMatrix::new(vec!["negative".into(), "positive".into()], counts)
        .expect("2x2 is well formed"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensSpec {
    pub sensitivity: Rate,
    pub specificity: Rate,
}

/// Sensitivity and specificity of a 2×2 matrix (row/column 1 = positive).
pub fn sens_spec(b: &ConfusionMatrix) -> Result<SensSpec, MetricError> {
    if b.k() != 2 {
        return Err(MetricError::NotBinary(b.k()));
    }
    let (tn, fp) = (b.get(0, 0), b.get(0, 1));
    let (fn_, tp) = (b.get(1, 0), b.get(1, 1));
    if tp + fn_ == 0 {
        return Err(MetricError::NoPositives);
    }
    if tn + fp == 0 {
        return Err(MetricError::NoNegatives);
    }
    Ok(SensSpec {
        sensitivity: Rate::new(tp, tp + fn_),
        specificity: Rate::new(tn, tn + fp),
    })
}

/// Tally of disagreements by signed ordinal step (test column minus
/// reference row).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAnalysis {
    pub by_signed_step: BTreeMap<i64, u64>,
    /// Test grade above the reference.
    pub over_count: u64,
    /// Test grade below the reference.
    pub under_count: u64,
    pub total_disagreements: u64,
}

impl StepAnalysis {
    pub fn with_magnitude(&self, steps: u64) -> u64 {
        self.by_signed_step
            .iter()
            .filter(|(s, _)| s.unsigned_abs() == steps)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn at_least(&self, steps: u64) -> u64 {
        self.by_signed_step
            .iter()
            .filter(|(s, _)| s.unsigned_abs() >= steps)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn over_at_least(&self, steps: u64) -> u64 {
        self.by_signed_step
            .iter()
            .filter(|(&s, _)| s > 0 && s.unsigned_abs() >= steps)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn under_at_least(&self, steps: u64) -> u64 {
        self.by_signed_step
            .iter()
            .filter(|(&s, _)| s < 0 && s.unsigned_abs() >= steps)
            .map(|(_, c)| c)
            .sum()
    }
}

pub fn step_analysis(m: &ConfusionMatrix) -> StepAnalysis {
    let mut out = StepAnalysis::default();
    for (i, row) in m.counts().iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if i == j || c == 0 {
                continue;
            }
            let step = j as i64 - i as i64;
            *out.by_signed_step.entry(step).or_default() += c;
            if step > 0 {
                out.over_count += c;
            } else {
                out.under_count += c;
            }
            out.total_disagreements += c;
        }
    }
    out
}
