//! Turning model confidences into decisions: ensemble averaging, binary
//! operating points at a target sensitivity, and the descending-severity
//! threshold cascade for five-class grades.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Rate;
use crate::model::{
    tail_score, Assessment, DmeStatus, Gradability, PredictionRecord, ReferenceEntry,
    ReferenceMethod, ReferenceStandard, SeverityGrade,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatingError {
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("ensemble spec lists {expected} members but {got} prediction sets were given")]
    MemberCountMismatch { expected: usize, got: usize },
    #[error("image {image_id} is missing from member {member}")]
    CoverageMismatch { image_id: String, member: String },
    #[error("image {image_id} appears twice in member {member}")]
    DuplicateImage { image_id: String, member: String },
    #[error("target sensitivity {0} exceeds 1 and can never be reached")]
    UnreachableTarget(f64),
    #[error("target sensitivity {0} is not a number in [0, 1]")]
    InvalidTarget(f64),
    #[error("tune set has no positives")]
    NoPositives,
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("no tune image has both a prediction and a reference grade")]
    EmptyTuneSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    #[default]
    ArithmeticMean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub ensemble_id: String,
    pub member_model_ids: Vec<String>,
    #[serde(default)]
    pub combine: CombineRule,
}

/// Per-image elementwise mean over the members. Output is sorted by image
/// id, and values are summed in sorted order so the result does not depend
/// on member or image order.
pub fn ensemble_combine(
    members: &[Vec<PredictionRecord>],
    spec: &EnsembleSpec,
) -> Result<Vec<PredictionRecord>, OperatingError> {
    if members.is_empty() || spec.member_model_ids.is_empty() {
        return Err(OperatingError::EmptyEnsemble);
    }
    if members.len() != spec.member_model_ids.len() {
        return Err(OperatingError::MemberCountMismatch {
            expected: spec.member_model_ids.len(),
            got: members.len(),
        });
    }
    let mut indexed: Vec<BTreeMap<&str, &PredictionRecord>> = Vec::with_capacity(members.len());
    for (records, member) in members.iter().zip(&spec.member_model_ids) {
        let mut map = BTreeMap::new();
        for r in records {
            if map.insert(r.image_id.as_str(), r).is_some() {
                return Err(OperatingError::DuplicateImage {
                    image_id: r.image_id.clone(),
                    member: member.clone(),
                });
            }
        }
        indexed.push(map);
    }
    let images: BTreeSet<&str> = indexed.iter().flat_map(|m| m.keys().copied()).collect();
    let mut out = Vec::with_capacity(images.len());
    for image in images {
        let mut rows = Vec::with_capacity(indexed.len());
        for (map, member) in indexed.iter().zip(&spec.member_model_ids) {
            match map.get(image) {
                Some(r) => rows.push(*r),
                None => {
                    return Err(OperatingError::CoverageMismatch {
                        image_id: image.to_string(),
                        member: member.clone(),
                    })
                }
            }
        }
        let mut p_dr = [0.0; 5];
        for (k, slot) in p_dr.iter_mut().enumerate() {
            *slot = order_free_mean(rows.iter().map(|r| r.p_dr[k]));
        }
        out.push(PredictionRecord {
            image_id: image.to_string(),
            model_id: spec.ensemble_id.clone(),
            p_dr,
            p_dme: order_free_mean(rows.iter().map(|r| r.p_dme)),
            p_gradable: order_free_mean(rows.iter().map(|r| r.p_gradable)),
        });
    }
    Ok(out)
}

fn order_free_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// A decision threshold; `Never` sits above every possible score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    At(f64),
    Never,
}

impl Threshold {
    pub fn fires(self, score: f64) -> bool {
        match self {
            Threshold::At(t) => score >= t,
            Threshold::Never => false,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // Display for f64 is the shortest string that parses back to the same bits
            Threshold::At(t) => write!(f, "{t}"),
            Threshold::Never => f.write_str("never"),
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("never") {
            return Ok(Threshold::Never);
        }
        s.parse::<f64>()
            .ok()
            .filter(|t| t.is_finite())
            .map(Threshold::At)
            .ok_or_else(|| format!("invalid threshold {s:?}"))
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

fn check_target(target: f64) -> Result<(), OperatingError> {
    if target > 1.0 {
        return Err(OperatingError::UnreachableTarget(target));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(OperatingError::InvalidTarget(target));
    }
    Ok(())
}

/// Largest threshold whose sensitivity (score >= threshold) on the tune set
/// reaches `target`. A target of zero returns `Never`.
pub fn pick_threshold(
    scores: &[f64],
    labels: &[bool],
    target: f64,
) -> Result<Threshold, OperatingError> {
    check_target(target)?;
    if scores.len() != labels.len() {
        return Err(OperatingError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    let mut positives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    if positives.is_empty() {
        return Err(OperatingError::NoPositives);
    }
    if target == 0.0 {
        return Ok(Threshold::Never);
    }
    positives.sort_by(|a, b| b.total_cmp(a));
    let total = positives.len() as f64;
    let mut idx = 0;
    while idx < positives.len() {
        let t = positives[idx];
        while idx < positives.len() && positives[idx] >= t {
            idx += 1;
        }
        if idx as f64 / total >= target {
            return Ok(Threshold::At(t));
        }
    }
    // unreachable for target <= 1: the lowest positive score captures all
    Err(OperatingError::UnreachableTarget(target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Confidence mass at or above the stage level.
    #[default]
    Tail,
    /// Confidence of the stage level alone.
    SingleClass,
}

pub fn stage_score(p_dr: &[f64; 5], level: SeverityGrade, mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Tail => tail_score(p_dr, level),
        ScoreMode::SingleClass => p_dr[level.index()].clamp(0.0, 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub level: SeverityGrade,
    pub threshold: Threshold,
    #[serde(default)]
    pub target: Option<f64>,
}

/// Per-severity thresholds checked from Proliferative down to Mild; the
/// first stage that fires assigns its grade, otherwise the image is graded
/// as no DR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadePolicy {
    #[serde(default)]
    pub score_mode: ScoreMode,
    pub stages: Vec<CascadeStage>,
    /// Referable-DME operating point; `None` leaves DME unassigned.
    #[serde(default)]
    pub dme_threshold: Option<Threshold>,
    /// Gradability operating point; `None` treats every image as gradable.
    #[serde(default)]
    pub gradable_threshold: Option<Threshold>,
}

impl CascadePolicy {
    /// Policy from thresholds listed Proliferative, Severe, Moderate, Mild.
    pub fn from_thresholds(thresholds: [Threshold; 4], score_mode: ScoreMode) -> Self {
        let stages = SeverityGrade::CUTOFFS_DESCENDING
            .iter()
            .zip(thresholds)
            .map(|(&level, threshold)| CascadeStage {
                level,
                threshold,
                target: None,
            })
            .collect();
        Self {
            score_mode,
            stages,
            dme_threshold: None,
            gradable_threshold: None,
        }
    }

    pub fn threshold(&self, level: SeverityGrade) -> Threshold {
        self.stages
            .iter()
            .find(|s| s.level == level)
            .map_or(Threshold::Never, |s| s.threshold)
    }

    /// Thresholds in cascade order, with `Never` for absent stages.
    pub fn thresholds(&self) -> [Threshold; 4] {
        SeverityGrade::CUTOFFS_DESCENDING.map(|l| self.threshold(l))
    }
}

pub fn apply_cascade(p_dr: &[f64; 5], policy: &CascadePolicy) -> SeverityGrade {
    SeverityGrade::CUTOFFS_DESCENDING
        .iter()
        .copied()
        .find(|&level| {
            policy
                .threshold(level)
                .fires(stage_score(p_dr, level, policy.score_mode))
        })
        .unwrap_or(SeverityGrade::NoDr)
}

/// Model labels for every prediction under `policy`.
pub fn apply_policy(predictions: &[PredictionRecord], policy: &CascadePolicy) -> ReferenceStandard {
    let mut out = ReferenceStandard::new(ReferenceMethod::ModelOutput);
    for p in predictions {
        let gradable = policy
            .gradable_threshold
            .is_none_or(|t| t.fires(p.p_gradable));
        let assessment = if gradable {
            Assessment {
                gradability: Gradability::FullyGradable,
                dr: Some(apply_cascade(&p.p_dr, policy)),
                dme: policy.dme_threshold.map(|t| {
                    if t.fires(p.p_dme) {
                        DmeStatus::Referable
                    } else {
                        DmeStatus::NotReferable
                    }
                }),
            }
        } else {
            Assessment::ungradable()
        };
        out.insert(ReferenceEntry::from_assessment(p.image_id.clone(), assessment, vec![]));
    }
    out
}

/// Target sensitivity per cascade level; levels left out never fire.
pub type CascadeTargets = BTreeMap<SeverityGrade, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFit {
    pub level: SeverityGrade,
    pub threshold: Threshold,
    pub target: Option<f64>,
    /// Images still unclassified when this stage ran.
    pub remaining: usize,
    /// Sensitivity among remaining images with reference grade >= level.
    pub sensitivity: Option<Rate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeFit {
    pub policy: CascadePolicy,
    pub stages: Vec<StageFit>,
    pub tune_images: usize,
    pub warnings: Vec<String>,
}

/// Fits thresholds from Proliferative down to Mild. Each stage only sees
/// the tune images that no higher stage claimed; its positives are those
/// with reference grade at or above the stage level.
pub fn fit_cascade(
    predictions: &[PredictionRecord],
    reference: &BTreeMap<String, SeverityGrade>,
    targets: &CascadeTargets,
    score_mode: ScoreMode,
) -> Result<CascadeFit, OperatingError> {
    for &t in targets.values() {
        check_target(t)?;
    }
    let mut remaining: Vec<(&PredictionRecord, SeverityGrade)> = predictions
        .iter()
        .filter_map(|p| reference.get(&p.image_id).map(|&g| (p, g)))
        .collect();
    if remaining.is_empty() {
        return Err(OperatingError::EmptyTuneSet);
    }
    let tune_images = remaining.len();
    let mut stages = Vec::with_capacity(4);
    let mut fits = Vec::with_capacity(4);
    let mut warnings = Vec::new();

    for level in SeverityGrade::CUTOFFS_DESCENDING {
        let target = targets.get(&level).copied();
        let scores: Vec<f64> = remaining
            .iter()
            .map(|(p, _)| stage_score(&p.p_dr, level, score_mode))
            .collect();
        let labels: Vec<bool> = remaining.iter().map(|(_, g)| *g >= level).collect();
        let positives = labels.iter().filter(|&&l| l).count();
        let threshold = match target {
            None => Threshold::Never,
            Some(_) if positives == 0 => {
                warnings.push(format!(
                    "no remaining tune images at {level} or worse; stage never fires"
                ));
                Threshold::Never
            }
            Some(t) => pick_threshold(&scores, &labels, t)?,
        };
        let caught = scores
            .iter()
            .zip(&labels)
            .filter(|(&s, &l)| l && threshold.fires(s))
            .count();
        fits.push(StageFit {
            level,
            threshold,
            target,
            remaining: remaining.len(),
            sensitivity: (positives > 0).then(|| Rate::new(caught as u64, positives as u64)),
        });
        stages.push(CascadeStage {
            level,
            threshold,
            target,
        });
        remaining = remaining
            .into_iter()
            .zip(&scores)
            .filter(|(_, &s)| !threshold.fires(s))
            .map(|(r, _)| r)
            .collect();
    }
    Ok(CascadeFit {
        policy: CascadePolicy {
            score_mode,
            stages,
            dme_threshold: None,
            gradable_threshold: None,
        },
        stages: fits,
        tune_images,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, model: &str, p_dr: [f64; 5], p_dme: f64) -> PredictionRecord {
        PredictionRecord {
            image_id: id.into(),
            model_id: model.into(),
            p_dr,
            p_dme,
            p_gradable: 1.0,
        }
    }

    fn spec(n: usize) -> EnsembleSpec {
        EnsembleSpec {
            ensemble_id: "ens".into(),
            member_model_ids: (0..n).map(|i| format!("m{i}")).collect(),
            combine: CombineRule::ArithmeticMean,
        }
    }

    #[test]
    fn single_member_is_identity() {
        let m = vec![record("a", "m0", [0.1, 0.2, 0.3, 0.2, 0.2], 0.3)];
        let out = ensemble_combine(std::slice::from_ref(&m), &spec(1)).unwrap();
        assert_eq!(out[0].p_dr, m[0].p_dr);
        assert_eq!(out[0].p_dme, 0.3);
        assert_eq!(out[0].model_id, "ens");
    }

    #[test]
    fn two_member_mean() {
        let a = vec![record("x", "m0", [1.0, 0.0, 0.0, 0.0, 0.0], 0.2)];
        let b = vec![record("x", "m1", [0.0, 1.0, 0.0, 0.0, 0.0], 0.6)];
        let out = ensemble_combine(&[a, b], &spec(2)).unwrap();
        assert!((out[0].p_dme - 0.4).abs() < 1e-15);
        assert_eq!(out[0].p_dr, [0.5, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_image_in_one_member() {
        let mut members: Vec<Vec<PredictionRecord>> = (0..10)
            .map(|m| {
                (0..5)
                    .map(|i| record(&format!("img{i}"), &format!("m{m}"), [0.2; 5], 0.5))
                    .collect()
            })
            .collect();
        members[6].remove(3);
        assert_eq!(
            ensemble_combine(&members, &spec(10)),
            Err(OperatingError::CoverageMismatch {
                image_id: "img3".into(),
                member: "m6".into()
            })
        );
    }

    #[test]
    fn pick_threshold_examples() {
        let scores = [0.9, 0.7, 0.5];
        let labels = [true, true, false];
        assert_eq!(pick_threshold(&scores, &labels, 1.0), Ok(Threshold::At(0.7)));
        assert_eq!(pick_threshold(&scores, &labels, 0.5), Ok(Threshold::At(0.9)));
        assert_eq!(pick_threshold(&scores, &labels, 0.0), Ok(Threshold::Never));
        assert_eq!(
            pick_threshold(&scores, &labels, 1.5),
            Err(OperatingError::UnreachableTarget(1.5))
        );
        assert!(matches!(
            pick_threshold(&scores, &labels, f64::NAN),
            Err(OperatingError::InvalidTarget(_))
        ));
        assert_eq!(
            pick_threshold(&[0.1], &[false], 0.5),
            Err(OperatingError::NoPositives)
        );
    }

    #[test]
    fn pick_threshold_with_tied_positive_scores() {
        let scores = [0.8, 0.8, 0.8, 0.2];
        let labels = [true, true, true, true];
        // 0.8 catches three of four; 0.75 is needed, so 0.8 suffices
        assert_eq!(pick_threshold(&scores, &labels, 0.75), Ok(Threshold::At(0.8)));
        assert_eq!(pick_threshold(&scores, &labels, 0.76), Ok(Threshold::At(0.2)));
    }

    #[test]
    fn cascade_examples() {
        let half = [Threshold::At(0.5); 4];
        let policy = CascadePolicy::from_thresholds(half, ScoreMode::Tail);
        assert_eq!(apply_cascade(&[1.0, 0.0, 0.0, 0.0, 0.0], &policy), SeverityGrade::NoDr);
        let prolif_only = CascadePolicy::from_thresholds(
            [Threshold::At(0.5), Threshold::Never, Threshold::Never, Threshold::Never],
            ScoreMode::Tail,
        );
        assert_eq!(
            apply_cascade(&[0.0, 0.0, 0.0, 0.0, 1.0], &prolif_only),
            SeverityGrade::Proliferative
        );
        // tails: prolif 0.1, severe 0.3, moderate 0.8
        assert_eq!(
            apply_cascade(&[0.1, 0.1, 0.5, 0.2, 0.1], &policy),
            SeverityGrade::Moderate
        );
        let single = CascadePolicy::from_thresholds(half, ScoreMode::SingleClass);
        assert_eq!(apply_cascade(&[0.1, 0.1, 0.5, 0.2, 0.1], &single), SeverityGrade::Moderate);
        assert_eq!(apply_cascade(&[0.4, 0.2, 0.2, 0.2, 0.0], &single), SeverityGrade::NoDr);
    }

    #[test]
    fn threshold_text_round_trip_is_bit_exact() {
        for t in [0.1 + 0.2, 1.0 / 3.0, 0.7, 5e-324, 0.999_999_999_999_999_9] {
            let s = Threshold::At(t).to_string();
            let back: Threshold = s.parse().unwrap();
            assert_eq!(back, Threshold::At(t));
            let json = serde_json::to_string(&Threshold::At(t)).unwrap();
            assert_eq!(serde_json::from_str::<Threshold>(&json).unwrap(), Threshold::At(t));
        }
        assert_eq!("never".parse::<Threshold>(), Ok(Threshold::Never));
        assert!("inf".parse::<Threshold>().is_err());
    }

    #[test]
    fn single_level_cascade_is_pick_threshold() {
        let preds: Vec<PredictionRecord> = [0.9, 0.7, 0.5]
            .iter()
            .enumerate()
            .map(|(i, &s)| record(&format!("i{i}"), "m", [1.0 - s, 0.0, 0.0, 0.0, s], 0.0))
            .collect();
        let reference: BTreeMap<String, SeverityGrade> = [
            ("i0".to_string(), SeverityGrade::Proliferative),
            ("i1".to_string(), SeverityGrade::Proliferative),
            ("i2".to_string(), SeverityGrade::NoDr),
        ]
        .into();
        let targets: CascadeTargets = [(SeverityGrade::Proliferative, 1.0)].into();
        let fit = fit_cascade(&preds, &reference, &targets, ScoreMode::Tail).unwrap();
        assert_eq!(fit.policy.threshold(SeverityGrade::Proliferative), Threshold::At(0.7));
        for level in &SeverityGrade::CUTOFFS_DESCENDING[1..] {
            assert_eq!(fit.policy.threshold(*level), Threshold::Never);
        }
    }

    #[test]
    fn zero_targets_grade_everything_none() {
        let preds: Vec<PredictionRecord> = (0..6)
            .map(|i| record(&format!("i{i}"), "m", [0.0, 0.0, 0.0, 0.0, 1.0], 0.0))
            .collect();
        let reference: BTreeMap<String, SeverityGrade> = (0..6)
            .map(|i| (format!("i{i}"), SeverityGrade::ALL[i % 5]))
            .collect();
        let targets: CascadeTargets = SeverityGrade::CUTOFFS_DESCENDING
            .iter()
            .map(|&l| (l, 0.0))
            .collect();
        let fit = fit_cascade(&preds, &reference, &targets, ScoreMode::Tail).unwrap();
        assert_eq!(fit.policy.thresholds(), [Threshold::Never; 4]);
        assert!(preds
            .iter()
            .all(|p| apply_cascade(&p.p_dr, &fit.policy) == SeverityGrade::NoDr));
    }

    #[test]
    fn level_without_positives_warns() {
        let preds = vec![record("a", "m", [0.5, 0.5, 0.0, 0.0, 0.0], 0.0)];
        let reference: BTreeMap<String, SeverityGrade> = [("a".to_string(), SeverityGrade::Mild)].into();
        let targets: CascadeTargets = [(SeverityGrade::Severe, 0.9), (SeverityGrade::Mild, 1.0)].into();
        let fit = fit_cascade(&preds, &reference, &targets, ScoreMode::Tail).unwrap();
        assert_eq!(fit.warnings.len(), 1);
        assert_eq!(fit.policy.threshold(SeverityGrade::Severe), Threshold::Never);
        assert_eq!(fit.policy.threshold(SeverityGrade::Mild), Threshold::At(0.5));
    }

    fn arb_p() -> impl Strategy<Value = [f64; 5]> {
        proptest::array::uniform5(0.0f64..=1.0)
    }

    proptest! {
        #[test]
        fn raising_a_component_never_lowers_the_grade(
            p in arb_p(), k in 0usize..5, bump in 0.0f64..1.0,
            t in proptest::array::uniform4(0.0f64..=1.0), single in any::<bool>(),
        ) {
            let mode = if single { ScoreMode::SingleClass } else { ScoreMode::Tail };
            let policy = CascadePolicy::from_thresholds(t.map(Threshold::At), mode);
            let mut q = p;
            q[k] = (q[k] + bump).min(1.0);
            prop_assert!(apply_cascade(&q, &policy) >= apply_cascade(&p, &policy));
        }

        #[test]
        fn lowering_a_threshold_never_loses_sensitivity(
            data in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..30),
            hi in 0.0f64..=1.0, lo_frac in 0.0f64..=1.0,
        ) {
            let lo = hi * lo_frac;
            let sens = |t: f64| data.iter().filter(|(s, l)| *l && *s >= t).count();
            prop_assert!(sens(lo) >= sens(hi));
        }

        #[test]
        fn ensemble_ignores_member_and_image_order(
            values in proptest::collection::vec(proptest::collection::vec(arb_p(), 4), 2..6),
            rot in 0usize..6,
        ) {
            let members: Vec<Vec<PredictionRecord>> = values.iter().enumerate().map(|(m, rows)| {
                rows.iter().enumerate().map(|(i, p)| record(&format!("img{i}"), &format!("m{m}"), *p, p[0])).collect()
            }).collect();
            let base = ensemble_combine(&members, &spec(members.len())).unwrap();
            let mut shuffled = members.clone();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            for m in &mut shuffled { m.reverse(); }
            let ids: Vec<String> = (0..members.len()).map(|i| format!("m{}", (i + r) % members.len())).collect();
            let spec2 = EnsembleSpec { member_model_ids: ids, ..spec(members.len()) };
            let other = ensemble_combine(&shuffled, &spec2).unwrap();
            prop_assert_eq!(base, other);
        }
    }
}
