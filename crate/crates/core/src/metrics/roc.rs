use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Images with score >= threshold are called positive. `None` is the
    /// starting point above every observed score.
    pub threshold: Option<f64>,
    pub sensitivity: f64,
    pub false_positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Decreasing threshold; starts at (0, 0) and ends at (1, 1).
    pub points: Vec<RocPoint>,
    pub positive_count: usize,
    pub negative_count: usize,
}

/// Empirical ROC curve with one point per distinct score. Tied scores move
/// together, which makes the trapezoidal area equal the rank statistic with
/// ties counted as one half.
pub fn roc(labels: &[bool], scores: &[f64]) -> Result<RocCurve, MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricError::InvalidScore(bad));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::OneClassOnly);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::with_capacity(order.len() + 1);
    points.push(RocPoint {
        threshold: None,
        sensitivity: 0.0,
        false_positive_rate: 0.0,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut idx = 0;
    while idx < order.len() {
        let threshold = scores[order[idx]];
        while idx < order.len() && scores[order[idx]] == threshold {
            if labels[order[idx]] {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        points.push(RocPoint {
            threshold: Some(threshold),
            sensitivity: tp as f64 / positives as f64,
            false_positive_rate: fp as f64 / negatives as f64,
        });
    }
    Ok(RocCurve {
        points,
        positive_count: positives,
        negative_count: negatives,
    })
}

/// Trapezoidal area under the curve over the false-positive-rate axis.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            (b.false_positive_rate - a.false_positive_rate) * (a.sensitivity + b.sensitivity) / 2.0
        })
        .sum()
}
