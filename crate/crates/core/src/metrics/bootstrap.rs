use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResampleUnit {
    #[default]
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    pub level: f64,
    pub unit: ResampleUnit,
    /// Largest tolerated share of redrawn (degenerate) resamples.
    pub max_redraw_fraction: f64,
    pub parallel: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 2000,
            seed: 0,
            level: 0.95,
            unit: ResampleUnit::Image,
            max_redraw_fraction: 0.01,
            parallel: false,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.resamples == 0 {
            return Err(MetricError::InvalidBootstrapConfig("resamples must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(MetricError::InvalidBootstrapConfig(format!(
                "level {} not in (0, 1)",
                self.level
            )));
        }
        if !(0.0..1.0).contains(&self.max_redraw_fraction) {
            return Err(MetricError::InvalidBootstrapConfig(format!(
                "max_redraw_fraction {} not in [0, 1)",
                self.max_redraw_fraction
            )));
        }
        Ok(())
    }

    fn redraw_budget(&self) -> usize {
        (self.resamples as f64 * self.max_redraw_fraction).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub resamples: usize,
    /// Resamples that were rejected as degenerate and drawn again.
    pub redraws: usize,
    /// Sorted replicate values.
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

/// Percentile interval from sorted replicates: the order statistics at
/// ranks `floor(α/2·B)` and `ceil((1-α/2)·B) - 1`, α = 1 - level.
pub fn percentile_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    assert!(!sorted.is_empty(), "no replicates");
    let b = sorted.len();
    let alpha = 1.0 - level;
    let lo = ((alpha / 2.0) * b as f64).floor() as usize;
    let hi = (((1.0 - alpha / 2.0) * b as f64).ceil() as usize).saturating_sub(1);
    (sorted[lo.min(b - 1)], sorted[hi.min(b - 1)])
}

/// Image-level percentile bootstrap of `metric`.
///
/// `metric` receives the indices of one resample (with repetition) and
/// returns `None` where it is undefined; such resamples are redrawn from the
/// same replicate stream. Replicate `r` draws from a ChaCha stream keyed by
/// `(seed, r)`, so serial and parallel runs produce identical replicates.
pub fn bootstrap_ci<F>(
    n_items: usize,
    metric: F,
    cfg: &BootstrapConfig,
) -> Result<BootstrapInterval, MetricError>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    cfg.validate()?;
    let all: Vec<usize> = (0..n_items).collect();
    let point = metric(&all).ok_or(MetricError::PointUndefined)?;
    let budget = cfg.redraw_budget();

    let replicate = |r: usize| -> (Option<f64>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let mut sample = vec![0usize; n_items];
        let mut redraws = 0;
        loop {
            for slot in sample.iter_mut() {
                *slot = rng.random_range(0..n_items);
            }
            if let Some(v) = metric(&sample) {
                return (Some(v), redraws);
            }
            redraws += 1;
            if redraws > budget {
                return (None, redraws);
            }
        }
    };

    let results: Vec<(Option<f64>, usize)> = if cfg.parallel {
        (0..cfg.resamples).into_par_iter().map(replicate).collect()
    } else {
        (0..cfg.resamples).map(replicate).collect()
    };

    let redraws: usize = results.iter().map(|(_, r)| r).sum();
    if redraws > budget || results.iter().any(|(v, _)| v.is_none()) {
        return Err(MetricError::TooManyDegenerateResamples {
            redraws,
            allowed: budget,
        });
    }
    let mut replicates: Vec<f64> = results.into_iter().filter_map(|(v, _)| v).collect();
    replicates.sort_by(f64::total_cmp);
    let (low, high) = percentile_interval(&replicates, cfg.level);
    Ok(BootstrapInterval {
        point,
        low,
        high,
        level: cfg.level,
        resamples: cfg.resamples,
        redraws,
        replicates,
    })
}
