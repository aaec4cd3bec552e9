//! Agreement and discrimination metrics.
//!
//! Confusion matrices have the reference label on rows and the test label on
//! columns. Every rate is kept as an exact numerator/denominator pair and is
//! only turned into a float or a rounded percentage at the edges.

mod agreement;
mod bootstrap;
mod roc;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfusionMatrix, DmeStatus, ReferenceStandard, SeverityGrade};

pub use agreement::{binarize, quadratic_weighted_kappa, sens_spec, step_analysis, SensSpec, StepAnalysis};
pub use bootstrap::{
    bootstrap_ci, percentile_interval, BootstrapConfig, BootstrapInterval, ResampleUnit,
};
pub use roc::{auc, roc, RocCurve, RocPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no images are labelled in both the reference and the test set")]
    EmptyIntersection,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("expected weighted disagreement is zero; kappa is undefined")]
    DegenerateMarginals,
    #[error("expected a 2x2 matrix, got {0}x{0}")]
    NotBinary(usize),
    #[error("cutoff index {cutoff} out of range for {k} classes")]
    InvalidCutoff { cutoff: usize, k: usize },
    #[error("no reference positives; sensitivity is undefined")]
    NoPositives,
    #[error("no reference negatives; specificity is undefined")]
    NoNegatives,
    #[error("ROC needs at least one positive and one negative")]
    OneClassOnly,
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("score {0} is not a finite number")]
    InvalidScore(f64),
    #[error("bootstrap configuration invalid: {0}")]
    InvalidBootstrapConfig(String),
    #[error("metric undefined on the full sample")]
    PointUndefined,
    #[error("{redraws} degenerate resamples exceed the allowed {allowed}")]
    TooManyDegenerateResamples { redraws: usize, allowed: usize },
}

/// An exact proportion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rate {
    pub numerator: u64,
    pub denominator: u64,
}

impl Rate {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        Self {
            numerator,
            denominator,
        }
    }

    /// `None` when the denominator is zero.
    pub fn value(&self) -> Option<f64> {
        (self.denominator > 0).then(|| self.numerator as f64 / self.denominator as f64)
    }

    /// Percentage rounded half-to-even at `decimals` places, computed exactly
    /// in integer arithmetic.
    pub fn percent(&self, decimals: u32) -> Option<String> {
        if self.denominator == 0 {
            return None;
        }
        let scale = 10u128.pow(decimals);
        let scaled = u128::from(self.numerator) * 100 * scale;
        let den = u128::from(self.denominator);
        let (mut q, r) = (scaled / den, scaled % den);
        if 2 * r > den || (2 * r == den && q % 2 == 1) {
            q += 1;
        }
        let whole = q / scale;
        Some(if decimals == 0 {
            format!("{whole}%")
        } else {
            let frac = q % scale;
            format!("{whole}.{frac:0width$}%", width = decimals as usize)
        })
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.percent(1) {
            Some(p) => write!(f, "{p} ({}/{})", self.numerator, self.denominator),
            None => write!(f, "n/a (0/0)"),
        }
    }
}

/// Rounds half-to-even at `decimals` places and formats with exactly that
/// many digits.
pub fn format_decimal(value: f64, decimals: u32) -> String {
    let scale = 10f64.powi(decimals as i32);
    let rounded = (value * scale).round_ties_even() / scale;
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded:.prec$}", prec = decimals as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelField {
    Dr,
    Dme,
}

impl LabelField {
    pub fn classes(self) -> Vec<String> {
        match self {
            LabelField::Dr => SeverityGrade::class_labels(),
            LabelField::Dme => DmeStatus::class_labels(),
        }
    }
}

/// A confusion matrix together with the image bookkeeping behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub field: LabelField,
    pub matrix: ConfusionMatrix,
    /// Images counted in the matrix.
    pub compared: usize,
    /// Reference images with a label that the test set does not label.
    pub missing_in_test: Vec<String>,
}

impl Confusion {
    /// True when the test set did not cover the whole reference.
    pub fn is_partial(&self) -> bool {
        !self.missing_in_test.is_empty()
    }
}

/// Cross-tabulates `reference` (rows) against `test` (columns) over the
/// fully gradable reference images that both sides label.
pub fn confusion(
    reference: &ReferenceStandard,
    test: &ReferenceStandard,
    field: LabelField,
) -> Result<Confusion, MetricError> {
    let mut matrix = ConfusionMatrix::zeros(field.classes()).expect("static class list");
    let mut missing = Vec::new();
    let mut compared = 0;
    for entry in reference.gradable() {
        let Some(r) = label_index(entry.dr, entry.dme, field) else {
            continue;
        };
        let t = test
            .get(&entry.image_id)
            .filter(|t| t.is_gradable())
            .and_then(|t| label_index(t.dr, t.dme, field));
        match t {
            Some(t) => {
                matrix.increment(r, t);
                compared += 1;
            }
            None => missing.push(entry.image_id.clone()),
        }
    }
    if compared == 0 {
        return Err(MetricError::EmptyIntersection);
    }
    Ok(Confusion {
        field,
        matrix,
        compared,
        missing_in_test: missing,
    })
}

fn label_index(dr: Option<SeverityGrade>, dme: Option<DmeStatus>, field: LabelField) -> Option<usize> {
    match field {
        LabelField::Dr => dr.map(SeverityGrade::index),
        LabelField::Dme => dme.map(DmeStatus::index),
    }
}

/// Confusion matrix from parallel label slices.
pub fn confusion_from_pairs(
    classes: Vec<String>,
    pairs: impl IntoIterator<Item = (usize, usize)>,
) -> Result<ConfusionMatrix, crate::model::ModelError> {
    let mut m = ConfusionMatrix::zeros(classes)?;
    for (r, t) in pairs {
        m.increment(r, t);
    }
    Ok(m)
}

/// Sensitivity/specificity at every DR cutoff, Mild through Proliferative.
pub fn sens_spec_by_cutoff(
    m: &ConfusionMatrix,
) -> BTreeMap<SeverityGrade, Result<SensSpec, MetricError>> {
    SeverityGrade::ALL[1..]
        .iter()
        .map(|&c| (c, binarize(m, c.index()).and_then(|b| sens_spec(&b))))
        .collect()
}
