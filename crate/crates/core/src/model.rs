//! Domain vocabulary shared by every other module: grades, graders, grade
//! events, predictions and confusion matrices.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// ICDR five-point diabetic retinopathy severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SeverityGrade {
    NoDr = 0,
    Mild = 1,
    Moderate = 2,
    Severe = 3,
    Proliferative = 4,
}

impl SeverityGrade {
    pub const ALL: [SeverityGrade; 5] = [
        SeverityGrade::NoDr,
        SeverityGrade::Mild,
        SeverityGrade::Moderate,
        SeverityGrade::Severe,
        SeverityGrade::Proliferative,
    ];

    /// Levels that can act as a referability cutoff, most severe first.
    pub const CUTOFFS_DESCENDING: [SeverityGrade; 4] = [
        SeverityGrade::Proliferative,
        SeverityGrade::Severe,
        SeverityGrade::Moderate,
        SeverityGrade::Mild,
    ];

    pub fn level(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_level(level: u8) -> Option<Self> {
        Self::ALL.get(level as usize).copied()
    }

    /// Number of ordinal steps between two grades.
    pub fn distance(self, other: SeverityGrade) -> u8 {
        self.level().abs_diff(other.level())
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityGrade::NoDr => "none",
            SeverityGrade::Mild => "mild",
            SeverityGrade::Moderate => "moderate",
            SeverityGrade::Severe => "severe",
            SeverityGrade::Proliferative => "proliferative",
        }
    }

    /// Row/column labels used when a matrix is indexed by grade.
    pub fn class_labels() -> Vec<String> {
        Self::ALL.iter().map(|g| g.name().to_string()).collect()
    }
}

impl TryFrom<u8> for SeverityGrade {
    type Error = ModelError;

    fn try_from(level: u8) -> Result<Self, Self::Error> {
        SeverityGrade::from_level(level).ok_or(ModelError::InvalidGrade(i64::from(level)))
    }
}

impl From<SeverityGrade> for u8 {
    fn from(g: SeverityGrade) -> u8 {
        g.level()
    }
}

impl fmt::Display for SeverityGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SeverityGrade {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if let Ok(level) = lower.parse::<i64>() {
            return u8::try_from(level)
                .ok()
                .and_then(SeverityGrade::from_level)
                .ok_or(ModelError::InvalidGrade(level));
        }
        match lower.as_str() {
            "none" | "no" | "no_dr" => Ok(SeverityGrade::NoDr),
            "mild" => Ok(SeverityGrade::Mild),
            "moderate" => Ok(SeverityGrade::Moderate),
            "severe" => Ok(SeverityGrade::Severe),
            "proliferative" | "pdr" => Ok(SeverityGrade::Proliferative),
            _ => Err(ModelError::UnknownGradeName(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmeStatus {
    NotReferable,
    Referable,
}

impl DmeStatus {
    pub fn is_referable(self) -> bool {
        self == DmeStatus::Referable
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn class_labels() -> Vec<String> {
        vec!["not_referable".to_string(), "referable".to_string()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gradability {
    FullyGradable,
    NotFullyGradable,
}

impl Gradability {
    pub fn is_gradable(self) -> bool {
        self == Gradability::FullyGradable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraderRole {
    Ophthalmologist,
    RetinaSpecialist,
    PartnerGradingCenter,
    Model,
}

impl FromStr for GraderRole {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ophthalmologist" => Ok(GraderRole::Ophthalmologist),
            "retina_specialist" | "retinal_specialist" => Ok(GraderRole::RetinaSpecialist),
            "partner_grading_center" | "partner" => Ok(GraderRole::PartnerGradingCenter),
            "model" => Ok(GraderRole::Model),
            other => Err(ModelError::UnknownRole(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GraderIdentity {
    pub id: String,
    pub role: GraderRole,
}

impl GraderIdentity {
    pub fn new(id: impl Into<String>, role: GraderRole) -> Self {
        Self { id: id.into(), role }
    }
}

/// The labels one grader attaches to one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assessment {
    pub gradability: Gradability,
    pub dr: Option<SeverityGrade>,
    pub dme: Option<DmeStatus>,
}

impl Assessment {
    pub fn gradable(dr: SeverityGrade, dme: DmeStatus) -> Self {
        Self {
            gradability: Gradability::FullyGradable,
            dr: Some(dr),
            dme: Some(dme),
        }
    }

    pub fn ungradable() -> Self {
        Self {
            gradability: Gradability::NotFullyGradable,
            dr: None,
            dme: None,
        }
    }
}

/// Grade event as it arrives from a file or a request body, before the
/// field invariants have been checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGradeEvent {
    pub image_id: String,
    pub grader: GraderIdentity,
    pub round: u32,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub dr: Option<i64>,
    #[serde(default)]
    pub dme: Option<DmeStatus>,
    pub gradability: Gradability,
    #[serde(default)]
    pub note: Option<String>,
}

/// One grader's validated assessment of one image at one workflow round.
/// Round 0 is independent grading; rounds from 1 on are adjudication.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeEvent {
    pub image_id: String,
    pub grader: GraderIdentity,
    pub round: u32,
    pub timestamp: DateTime<Utc>,
    pub assessment: Assessment,
    pub note: Option<String>,
    /// Set when the event was fanned out from an eye-level record.
    pub eye_id: Option<String>,
    /// Fields this version does not interpret, kept for lossless rewrites.
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl GradeEvent {
    pub fn key(&self) -> EventKey {
        EventKey {
            image_id: self.image_id.clone(),
            grader_id: self.grader.id.clone(),
            round: self.round,
        }
    }

    pub fn to_raw(&self) -> RawGradeEvent {
        RawGradeEvent {
            image_id: self.image_id.clone(),
            grader: self.grader.clone(),
            round: self.round,
            timestamp: self.timestamp,
            dr: self.assessment.dr.map(|g| i64::from(g.level())),
            dme: self.assessment.dme,
            gradability: self.assessment.gradability,
            note: self.note.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventKey {
    pub image_id: String,
    pub grader_id: String,
    pub round: u32,
}

impl fmt::Display for EventKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/round {}", self.image_id, self.grader_id, self.round)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid DR grade {0}: expected a level in 0..=4")]
    InvalidGrade(i64),
    #[error("unknown DR grade name {0:?}")]
    UnknownGradeName(String),
    #[error("unknown grader role {0:?}")]
    UnknownRole(String),
    #[error("image {image_id} is marked fully gradable but {grader_id} gave no DR grade")]
    MissingAssessment { image_id: String, grader_id: String },
    #[error("duplicate grade event {0}")]
    DuplicateEvent(EventKey),
    #[error("grader {grader_id} appears with roles {first:?} and {second:?}")]
    RoleConflict {
        grader_id: String,
        first: GraderRole,
        second: GraderRole,
    },
    #[error("{field} confidence {value} for image {image_id} is outside [0, 1]")]
    ConfidenceOutOfRange {
        image_id: String,
        field: &'static str,
        value: f64,
    },
    #[error("confusion matrix must be square with at least 2 classes (got {classes} classes, {rows} rows)")]
    MalformedMatrix { classes: usize, rows: usize },
}

/// Checks the per-event invariants and the (image, grader, round) uniqueness
/// constraint across everything it has already accepted.
#[derive(Debug, Default, Clone)]
pub struct EventValidator {
    seen: HashSet<EventKey>,
    roles: BTreeMap<String, GraderRole>,
}

impl EventValidator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn validate(&mut self, raw: RawGradeEvent) -> Result<GradeEvent, ModelError> {
        let event = validate_fields(raw)?;
        self.admit(event)
    }

    /// Registers an already field-validated event.
    pub fn admit(&mut self, event: GradeEvent) -> Result<GradeEvent, ModelError> {
        if let Some(&first) = self.roles.get(&event.grader.id) {
            if first != event.grader.role {
                return Err(ModelError::RoleConflict {
                    grader_id: event.grader.id.clone(),
                    first,
                    second: event.grader.role,
                });
            }
        }
        let key = event.key();
        if self.seen.contains(&key) {
            return Err(ModelError::DuplicateEvent(key));
        }
        self.roles.insert(event.grader.id.clone(), event.grader.role);
        self.seen.insert(key);
        Ok(event)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// Field-level validation of a single event, without the uniqueness check.
pub fn validate_fields(raw: RawGradeEvent) -> Result<GradeEvent, ModelError> {
    let dr = match raw.dr {
        None => None,
        Some(level) => Some(
            u8::try_from(level)
                .ok()
                .and_then(SeverityGrade::from_level)
                .ok_or(ModelError::InvalidGrade(level))?,
        ),
    };
    if raw.gradability.is_gradable() && dr.is_none() {
        return Err(ModelError::MissingAssessment {
            image_id: raw.image_id,
            grader_id: raw.grader.id,
        });
    }
    Ok(GradeEvent {
        image_id: raw.image_id,
        grader: raw.grader,
        round: raw.round,
        timestamp: raw.timestamp,
        assessment: Assessment {
            gradability: raw.gradability,
            dr,
            dme: raw.dme,
        },
        note: raw.note,
        eye_id: None,
        extra: BTreeMap::new(),
    })
}

/// Validates one event against an empty history.
pub fn validate_grade_event(raw: RawGradeEvent) -> Result<GradeEvent, ModelError> {
    EventValidator::new().validate(raw)
}

/// Confidence mass at or above `cutoff`, clamped to [0, 1].
pub fn tail_score(p_dr: &[f64; 5], cutoff: SeverityGrade) -> f64 {
    p_dr[cutoff.index()..].iter().sum::<f64>().clamp(0.0, 1.0)
}

/// Per-image model confidences. `p_dr` is stored as produced; the components
/// are independent per-class outputs and need not sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub model_id: String,
    pub p_dr: [f64; 5],
    pub p_dme: f64,
    pub p_gradable: f64,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        let out_of_range = |field: &'static str, value: f64| ModelError::ConfidenceOutOfRange {
            image_id: self.image_id.clone(),
            field,
            value,
        };
        for &p in &self.p_dr {
            if !(0.0..=1.0).contains(&p) {
                return Err(out_of_range("p_dr", p));
            }
        }
        if !(0.0..=1.0).contains(&self.p_dme) {
            return Err(out_of_range("p_dme", self.p_dme));
        }
        if !(0.0..=1.0).contains(&self.p_gradable) {
            return Err(out_of_range("p_gradable", self.p_gradable));
        }
        Ok(())
    }

    /// `p_dr` rescaled to sum to one. An all-zero vector is returned as is.
    pub fn normalized_dr(&self) -> [f64; 5] {
        let total: f64 = self.p_dr.iter().sum();
        if total <= 0.0 {
            return self.p_dr;
        }
        self.p_dr.map(|p| p / total)
    }
}

/// k×k count table; rows are the reference label, columns the test label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MatrixWire", into = "MatrixWire")]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
    #[serde(default)]
    n: Option<u64>,
}

impl TryFrom<MatrixWire> for ConfusionMatrix {
    type Error = String;

    fn try_from(wire: MatrixWire) -> Result<Self, Self::Error> {
        let m = ConfusionMatrix::new(wire.classes, wire.counts).map_err(|e| e.to_string())?;
        match wire.n {
            Some(n) if n != m.n() => Err(format!("declared n = {n} but cells sum to {}", m.n())),
            _ => Ok(m),
        }
    }
}

impl From<ConfusionMatrix> for MatrixWire {
    fn from(m: ConfusionMatrix) -> Self {
        let n = m.n();
        MatrixWire {
            classes: m.classes,
            counts: m.counts,
            n: Some(n),
        }
    }
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, ModelError> {
        let k = classes.len();
        if k < 2 || counts.len() != k || counts.iter().any(|row| row.len() != k) {
            return Err(ModelError::MalformedMatrix {
                classes: k,
                rows: counts.len(),
            });
        }
        Ok(Self { classes, counts })
    }

    pub fn zeros(classes: Vec<String>) -> Result<Self, ModelError> {
        let k = classes.len();
        Self::new(classes, vec![vec![0; k]; k])
    }

    /// Five-class matrix indexed by `SeverityGrade`.
    pub fn severity(counts: [[u64; 5]; 5]) -> Self {
        Self {
            classes: SeverityGrade::class_labels(),
            counts: counts.iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, reference: usize, test: usize) -> u64 {
        self.counts[reference][test]
    }

    pub fn increment(&mut self, reference: usize, test: usize) {
        self.counts[reference][test] += 1;
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_totals(&self) -> Vec<u64> {
        (0..self.k())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn diagonal_sum(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn transpose(&self) -> Self {
        let k = self.k();
        let counts = (0..k)
            .map(|i| (0..k).map(|j| self.counts[j][i]).collect())
            .collect();
        Self {
            classes: self.classes.clone(),
            counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMethod {
    Majority,
    AdjudicatedConsensus,
    /// Labels derived from model output; used on the test side of comparisons.
    ModelOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub image_id: String,
    pub gradability: Gradability,
    pub dr: Option<SeverityGrade>,
    pub dme: Option<DmeStatus>,
    #[serde(default)]
    pub contributing_graders: Vec<GraderIdentity>,
}

impl ReferenceEntry {
    pub fn from_assessment(
        image_id: impl Into<String>,
        assessment: Assessment,
        contributing_graders: Vec<GraderIdentity>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            gradability: assessment.gradability,
            dr: assessment.dr,
            dme: assessment.dme,
            contributing_graders,
        }
    }

    pub fn is_gradable(&self) -> bool {
        self.gradability.is_gradable()
    }
}

/// Per-image labels with uniform provenance. Entries are keyed by image id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceStandard {
    pub method: ReferenceMethod,
    pub entries: BTreeMap<String, ReferenceEntry>,
}

impl ReferenceStandard {
    pub fn new(method: ReferenceMethod) -> Self {
        Self {
            method,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, entry: ReferenceEntry) {
        self.entries.insert(entry.image_id.clone(), entry);
    }

    pub fn get(&self, image_id: &str) -> Option<&ReferenceEntry> {
        self.entries.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn gradable(&self) -> impl Iterator<Item = &ReferenceEntry> {
        self.entries.values().filter(|e| e.is_gradable())
    }

    /// DR grade per gradable image.
    pub fn dr_labels(&self) -> BTreeMap<String, SeverityGrade> {
        self.gradable()
            .filter_map(|e| e.dr.map(|g| (e.image_id.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn raw(image: &str, grader: &str, round: u32, dr: Option<i64>) -> RawGradeEvent {
        RawGradeEvent {
            image_id: image.into(),
            grader: GraderIdentity::new(grader, GraderRole::RetinaSpecialist),
            round,
            timestamp: Utc.with_ymd_and_hms(2017, 3, 1, 9, 0, 0).unwrap(),
            dr,
            dme: Some(DmeStatus::NotReferable),
            gradability: Gradability::FullyGradable,
            note: None,
        }
    }

    #[test]
    fn accepts_well_formed_event() {
        let e = validate_grade_event(raw("img-1", "rs-a", 0, Some(2))).unwrap();
        assert_eq!(e.assessment.dr, Some(SeverityGrade::Moderate));
        assert_eq!(e.round, 0);
    }

    #[test]
    fn rejects_out_of_range_grade() {
        assert_eq!(
            validate_grade_event(raw("img-1", "rs-a", 0, Some(5))),
            Err(ModelError::InvalidGrade(5))
        );
        assert_eq!(
            validate_grade_event(raw("img-1", "rs-a", 0, Some(-1))),
            Err(ModelError::InvalidGrade(-1))
        );
    }

    #[test]
    fn gradable_without_dr_is_missing_assessment() {
        assert!(matches!(
            validate_grade_event(raw("img-1", "rs-a", 0, None)),
            Err(ModelError::MissingAssessment { .. })
        ));
        let mut ungradable = raw("img-1", "rs-a", 0, None);
        ungradable.gradability = Gradability::NotFullyGradable;
        ungradable.dme = None;
        assert!(validate_grade_event(ungradable).is_ok());
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let mut v = EventValidator::new();
        v.validate(raw("img-1", "rs-a", 0, Some(1))).unwrap();
        v.validate(raw("img-1", "rs-a", 1, Some(1))).unwrap();
        let err = v.validate(raw("img-1", "rs-a", 0, Some(2))).unwrap_err();
        assert!(matches!(err, ModelError::DuplicateEvent(k) if k.round == 0));
    }

    #[test]
    fn role_is_fixed_per_grader() {
        let mut v = EventValidator::new();
        v.validate(raw("img-1", "g", 0, Some(1))).unwrap();
        let mut other = raw("img-2", "g", 0, Some(1));
        other.grader.role = GraderRole::Ophthalmologist;
        assert!(matches!(v.validate(other), Err(ModelError::RoleConflict { .. })));
    }

    #[test]
    fn tail_score_examples() {
        assert_eq!(tail_score(&[1.0, 0.0, 0.0, 0.0, 0.0], SeverityGrade::Moderate), 0.0);
        assert_eq!(tail_score(&[0.0, 0.0, 0.0, 0.0, 1.0], SeverityGrade::Mild), 1.0);
        let t = tail_score(&[0.2, 0.2, 0.3, 0.2, 0.1], SeverityGrade::Moderate);
        assert!((t - 0.6).abs() < 1e-12);
        // unnormalized vectors clamp
        assert_eq!(tail_score(&[0.0, 0.9, 0.9, 0.9, 0.9], SeverityGrade::Mild), 1.0);
    }

    #[test]
    fn grade_parsing() {
        assert_eq!("Moderate".parse::<SeverityGrade>().unwrap(), SeverityGrade::Moderate);
        assert_eq!("4".parse::<SeverityGrade>().unwrap(), SeverityGrade::Proliferative);
        assert_eq!("7".parse::<SeverityGrade>(), Err(ModelError::InvalidGrade(7)));
        assert!(serde_json::from_str::<SeverityGrade>("5").is_err());
        assert_eq!(serde_json::to_string(&SeverityGrade::Severe).unwrap(), "3");
    }

    #[test]
    fn matrix_shape_checked() {
        assert!(ConfusionMatrix::new(vec!["a".into()], vec![vec![1]]).is_err());
        assert!(ConfusionMatrix::new(vec!["a".into(), "b".into()], vec![vec![1, 2]]).is_err());
        let json = r#"{"classes":["a","b"],"counts":[[1,2],[3,4]],"n":11}"#;
        assert!(serde_json::from_str::<ConfusionMatrix>(json).is_err());
        let json = r#"{"classes":["a","b"],"counts":[[1,2],[3,4]]}"#;
        let m: ConfusionMatrix = serde_json::from_str(json).unwrap();
        assert_eq!(m.n(), 10);
        assert_eq!(m.transpose().get(0, 1), 3);
    }

    #[test]
    fn prediction_confidences_checked() {
        let mut p = PredictionRecord {
            image_id: "i".into(),
            model_id: "m".into(),
            p_dr: [0.5, 0.5, 0.0, 0.0, 0.0],
            p_dme: 0.1,
            p_gradable: 1.0,
        };
        assert!(p.validate().is_ok());
        p.p_dr[2] = 1.2;
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn ordinal_distance_is_a_metric(a in 0u8..5, b in 0u8..5, c in 0u8..5) {
            let (a, b, c) = (
                SeverityGrade::from_level(a).unwrap(),
                SeverityGrade::from_level(b).unwrap(),
                SeverityGrade::from_level(c).unwrap(),
            );
            prop_assert_eq!(a.distance(b), b.distance(a));
            prop_assert!(a.distance(c) <= a.distance(b) + b.distance(c));
            prop_assert_eq!(a.distance(a), 0);
        }

        #[test]
        fn tail_score_non_increasing_in_cutoff(p in proptest::array::uniform5(0.0f64..=1.0)) {
            let tails: Vec<f64> = SeverityGrade::ALL[1..].iter().map(|&c| tail_score(&p, c)).collect();
            for w in tails.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            for t in tails {
                prop_assert!((0.0..=1.0).contains(&t));
            }
        }
    }
}
