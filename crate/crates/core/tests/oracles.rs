//! Independent oracles for the ranking and threshold-fitting code.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retgrade_core::metrics::{auc, roc};
use retgrade_core::model::{PredictionRecord, SeverityGrade};
use retgrade_core::operating::{apply_cascade, fit_cascade, stage_score, CascadeTargets, ScoreMode, Threshold};

/// Mann-Whitney statistic: share of positive/negative pairs ranked
/// correctly, ties counting one half.
fn pairwise_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[test]
fn trapezoid_auc_equals_pairwise_statistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(20180101);
    let mut checked = 0;
    while checked < 200 {
        let n = rng.random_range(2..=12);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        // coarse grid so ties are common
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 8.0).collect();
        let got = auc(&roc(&labels, &scores).unwrap());
        let want = pairwise_auc(&labels, &scores);
        assert!((got - want).abs() <= 1e-12, "{labels:?} {scores:?}: {got} vs {want}");
        checked += 1;
    }
}

struct TuneSet {
    preds: Vec<PredictionRecord>,
    reference: BTreeMap<String, SeverityGrade>,
    targets: CascadeTargets,
}

fn random_tune_set(rng: &mut ChaCha8Rng) -> TuneSet {
    let n = rng.random_range(1..=20);
    let mut preds = Vec::new();
    let mut reference = BTreeMap::new();
    for i in 0..n {
        let raw: [f64; 5] = std::array::from_fn(|_| f64::from(rng.random_range(0..10u8)));
        let total: f64 = raw.iter().sum::<f64>().max(1.0);
        let id = format!("t{i:02}");
        preds.push(PredictionRecord {
            image_id: id.clone(),
            model_id: "m".into(),
            p_dr: raw.map(|x| x / total),
            p_dme: 0.0,
            p_gradable: 1.0,
        });
        reference.insert(id, SeverityGrade::ALL[rng.random_range(0..5)]);
    }
    let mut targets = CascadeTargets::new();
    for level in SeverityGrade::CUTOFFS_DESCENDING {
        if rng.random_bool(0.85) {
            targets.insert(level, f64::from(rng.random_range(1..=20u8)) / 20.0);
        }
    }
    TuneSet { preds, reference, targets }
}

/// Threshold candidates for one stage, best (highest) first: `Never`, then
/// every observed stage score in decreasing order.
fn grid(preds: &[PredictionRecord], level: SeverityGrade, mode: ScoreMode) -> Vec<Threshold> {
    let mut scores: Vec<f64> = preds.iter().map(|p| stage_score(&p.p_dr, level, mode)).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    std::iter::once(Threshold::Never)
        .chain(scores.into_iter().map(Threshold::At))
        .collect()
}

/// Lexicographically largest threshold tuple (Proliferative first) over the
/// observed-score grid such that every targeted stage reaches its target
/// among the images left unclaimed by higher stages.
fn exhaustive(set: &TuneSet, mode: ScoreMode) -> Option<Vec<Threshold>> {
    fn search(
        set: &TuneSet,
        mode: ScoreMode,
        depth: usize,
        remaining: Vec<&PredictionRecord>,
        chosen: &mut Vec<Threshold>,
    ) -> bool {
        if depth == 4 {
            return true;
        }
        let level = SeverityGrade::CUTOFFS_DESCENDING[depth];
        for t in grid(&set.preds, level, mode) {
            let positives: Vec<&&PredictionRecord> =
                remaining.iter().filter(|p| set.reference[&p.image_id] >= level).collect();
            let ok = match set.targets.get(&level) {
                None => true,
                Some(_) if positives.is_empty() => true,
                Some(&target) => {
                    let caught = positives
                        .iter()
                        .filter(|p| t.fires(stage_score(&p.p_dr, level, mode)))
                        .count();
                    caught as f64 / positives.len() as f64 >= target
                }
            };
            if !ok {
                continue;
            }
            let next: Vec<&PredictionRecord> = remaining
                .iter()
                .copied()
                .filter(|p| !t.fires(stage_score(&p.p_dr, level, mode)))
                .collect();
            chosen.push(t);
            if search(set, mode, depth + 1, next, chosen) {
                return true;
            }
            chosen.pop();
        }
        false
    }
    let mut chosen = Vec::new();
    search(set, mode, 0, set.preds.iter().collect(), &mut chosen).then_some(chosen)
}

#[test]
fn fit_cascade_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for round in 0..50 {
        let set = random_tune_set(&mut rng);
        for mode in [ScoreMode::Tail, ScoreMode::SingleClass] {
            let fit = fit_cascade(&set.preds, &set.reference, &set.targets, mode).unwrap();
            let oracle = exhaustive(&set, mode).expect("some tuple is always feasible");
            assert_eq!(fit.policy.thresholds().to_vec(), oracle, "set {round} {mode:?}");
            for s in &fit.stages {
                if let (Some(target), Some(sens)) = (s.target, s.sensitivity) {
                    assert!(
                        sens.numerator as f64 / sens.denominator as f64 >= target,
                        "set {round}: {s:?}"
                    );
                }
            }
        }
    }
}

#[test]
fn cascade_monotone_under_single_component_increase() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let p: [f64; 5] = std::array::from_fn(|_| rng.random::<f64>() * 0.4);
        let mut q = p;
        let k = rng.random_range(0..5);
        q[k] = (q[k] + rng.random::<f64>()).min(1.0);
        let thresholds: [Threshold; 4] = std::array::from_fn(|_| Threshold::At(rng.random()));
        for mode in [ScoreMode::Tail, ScoreMode::SingleClass] {
            let policy = retgrade_core::operating::CascadePolicy::from_thresholds(thresholds, mode);
            assert!(apply_cascade(&q, &policy) >= apply_cascade(&p, &policy), "{p:?} -> {q:?}");
        }
    }
}
