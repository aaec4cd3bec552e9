//! Reference-standard construction: majority decision over independent
//! grades, and the full-consensus adjudication state machine.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Assessment, DmeStatus, GradeEvent, Gradability, GraderIdentity, GraderRole, ReferenceEntry,
    ReferenceMethod, ReferenceStandard, SeverityGrade,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Lower median of the tied grades.
    #[default]
    OrdinalMedian,
    MostSevere,
    LeastSevere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MajorityPolicy {
    pub tie_rule: TieRule,
    pub min_graders: usize,
}

impl Default for MajorityPolicy {
    fn default() -> Self {
        Self {
            tie_rule: TieRule::OrdinalMedian,
            min_graders: 3,
        }
    }
}

impl MajorityPolicy {
    pub fn with_tie_rule(tie_rule: TieRule) -> Self {
        Self {
            tie_rule,
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefStdError {
    #[error("majority needs at least {required} grades, got {got}")]
    TooFewGraders { required: usize, got: usize },
    #[error("grading incomplete for {} image(s): {}", image_ids.len(), preview(image_ids))]
    IncompleteGrading { image_ids: Vec<String> },
    #[error("event {index} ({image_id}, {grader_id}, round {round}) rejected: {source}")]
    Replay {
        index: usize,
        image_id: String,
        grader_id: String,
        round: u32,
        #[source]
        source: AdjudicationError,
    },
    #[error("reference panel is empty")]
    EmptyPanel,
}

fn preview(ids: &[String]) -> String {
    const SHOWN: usize = 5;
    let mut s = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(", ...");
    }
    s
}

/// Plurality grade; ties among the most frequent grades go to `policy.tie_rule`.
pub fn majority_decision(
    grades: &[SeverityGrade],
    policy: &MajorityPolicy,
) -> Result<SeverityGrade, RefStdError> {
    check_count(grades.len(), policy.min_graders)?;
    Ok(plurality(grades, policy.tie_rule))
}

/// Majority over a binary DME label. An even split goes to the tie rule:
/// `MostSevere` gives Referable, the other two rules NotReferable.
pub fn majority_decision_binary(
    grades: &[DmeStatus],
    policy: &MajorityPolicy,
) -> Result<DmeStatus, RefStdError> {
    check_count(grades.len(), policy.min_graders)?;
    let referable = grades.iter().filter(|g| g.is_referable()).count();
    Ok(
        if binary_majority(referable, grades.len(), policy.tie_rule) {
            DmeStatus::Referable
        } else {
            DmeStatus::NotReferable
        },
    )
}

/// Majority over gradability; "not fully gradable" is the severe side of a tie.
pub fn majority_gradability(
    values: &[Gradability],
    policy: &MajorityPolicy,
) -> Result<Gradability, RefStdError> {
    check_count(values.len(), policy.min_graders)?;
    let ungradable = values.iter().filter(|g| !g.is_gradable()).count();
    Ok(
        if binary_majority(ungradable, values.len(), policy.tie_rule) {
            Gradability::NotFullyGradable
        } else {
            Gradability::FullyGradable
        },
    )
}

/// Image-level majority: gradability first, then DR and DME over the graders
/// that supplied them.
pub fn majority_assessment(
    assessments: &[Assessment],
    policy: &MajorityPolicy,
) -> Result<Assessment, RefStdError> {
    let gradability = majority_gradability(
        &assessments.iter().map(|a| a.gradability).collect::<Vec<_>>(),
        policy,
    )?;
    if !gradability.is_gradable() {
        return Ok(Assessment::ungradable());
    }
    let dr: Vec<SeverityGrade> = assessments.iter().filter_map(|a| a.dr).collect();
    let dme: Vec<DmeStatus> = assessments.iter().filter_map(|a| a.dme).collect();
    let dme_referable = dme.iter().filter(|d| d.is_referable()).count();
    Ok(Assessment {
        gradability,
        dr: (!dr.is_empty()).then(|| plurality(&dr, policy.tie_rule)),
        dme: (!dme.is_empty()).then(|| {
            if binary_majority(dme_referable, dme.len(), policy.tie_rule) {
                DmeStatus::Referable
            } else {
                DmeStatus::NotReferable
            }
        }),
    })
}

fn check_count(got: usize, min_graders: usize) -> Result<(), RefStdError> {
    let required = min_graders.max(1);
    if got < required {
        return Err(RefStdError::TooFewGraders { required, got });
    }
    Ok(())
}

fn plurality(grades: &[SeverityGrade], tie_rule: TieRule) -> SeverityGrade {
    let mut counts = [0usize; 5];
    for g in grades {
        counts[g.index()] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    // ascending ordinal order
    let tied: Vec<SeverityGrade> = SeverityGrade::ALL
        .iter()
        .copied()
        .filter(|g| counts[g.index()] == top)
        .collect();
    match (tied.len(), tie_rule) {
        (1, _) => tied[0],
        (_, TieRule::MostSevere) => tied[tied.len() - 1],
        (_, TieRule::LeastSevere) => tied[0],
        (_, TieRule::OrdinalMedian) => tied[(tied.len() - 1) / 2],
    }
}

/// Whether the positive (more severe) side wins among `total` votes.
fn binary_majority(positive: usize, total: usize, tie_rule: TieRule) -> bool {
    match (2 * positive).cmp(&total) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => tie_rule == TieRule::MostSevere,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CollectingIndependent,
    Unanimous,
    NeedsAdjudication,
    InAdjudication,
    Consensus,
}

impl Phase {
    pub fn is_resolved(self) -> bool {
        matches!(self, Phase::Unanimous | Phase::Consensus)
    }

    pub fn is_disagreement(self) -> bool {
        matches!(self, Phase::NeedsAdjudication | Phase::InAdjudication)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedGrade {
    pub assessment: Assessment,
    pub round: u32,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjudicationError {
    #[error("event for image {got} applied to state of image {expected}")]
    ImageMismatch { expected: String, got: String },
    #[error("grader {0} is not on this image's panel")]
    UnknownGrader(String),
    #[error("image already resolved; consensus is final")]
    EventAfterConsensus,
    #[error("round {round} is stale; image is at round {current}")]
    StaleRound { round: u32, current: u32 },
    #[error("round {round} is not open; image is at round {current}")]
    RoundNotOpen { round: u32, current: u32 },
    #[error("grader {grader_id} already submitted round {round}")]
    DuplicateSubmission { grader_id: String, round: u32 },
}

/// Workflow state of a single image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationState {
    pub image_id: String,
    pub phase: Phase,
    pub required_graders: Vec<GraderIdentity>,
    /// Round-0 grades keyed by grader id.
    pub independent: BTreeMap<String, RecordedGrade>,
    /// Most recent adjudication endorsement per grader id.
    pub endorsements: BTreeMap<String, RecordedGrade>,
    /// 0 while collecting independent grades, then the open adjudication round.
    pub current_round: u32,
    pub consensus: Option<Assessment>,
}

impl AdjudicationState {
    pub fn new(image_id: impl Into<String>, required_graders: Vec<GraderIdentity>) -> Self {
        Self {
            image_id: image_id.into(),
            phase: Phase::CollectingIndependent,
            required_graders,
            independent: BTreeMap::new(),
            endorsements: BTreeMap::new(),
            current_round: 0,
            consensus: None,
        }
    }

    /// Pure transition: returns the successor state or the reason the event
    /// cannot be applied. `self` is never modified.
    pub fn advance(&self, event: &GradeEvent) -> Result<AdjudicationState, AdjudicationError> {
        if event.image_id != self.image_id {
            return Err(AdjudicationError::ImageMismatch {
                expected: self.image_id.clone(),
                got: event.image_id.clone(),
            });
        }
        if !self.required_graders.contains(&event.grader) {
            return Err(AdjudicationError::UnknownGrader(event.grader.id.clone()));
        }
        if self.phase.is_resolved() {
            return Err(AdjudicationError::EventAfterConsensus);
        }
        let grade = RecordedGrade {
            assessment: event.assessment,
            round: event.round,
            timestamp: event.timestamp,
            note: event.note.clone(),
        };
        let grader_id = event.grader.id.clone();
        let mut next = self.clone();
        match (self.phase, event.round) {
            (Phase::CollectingIndependent, 0) => {
                if self.independent.contains_key(&grader_id) {
                    return Err(AdjudicationError::DuplicateSubmission { grader_id, round: 0 });
                }
                next.independent.insert(grader_id, grade);
                if next.all_required(|id| next.independent.contains_key(id)) {
                    match next.unanimous_independent() {
                        Some(assessment) => {
                            next.phase = Phase::Unanimous;
                            next.consensus = Some(assessment);
                        }
                        None => {
                            next.phase = Phase::NeedsAdjudication;
                            next.current_round = 1;
                        }
                    }
                }
            }
            (Phase::CollectingIndependent, round) => {
                return Err(AdjudicationError::RoundNotOpen { round, current: 0 });
            }
            (_, round) if round < self.current_round => {
                return Err(AdjudicationError::StaleRound {
                    round,
                    current: self.current_round,
                });
            }
            (_, round) if round > self.current_round => {
                return Err(AdjudicationError::RoundNotOpen {
                    round,
                    current: self.current_round,
                });
            }
            (_, round) => {
                if self
                    .endorsements
                    .get(&grader_id)
                    .is_some_and(|e| e.round == round)
                {
                    return Err(AdjudicationError::DuplicateSubmission { grader_id, round });
                }
                next.endorsements.insert(grader_id, grade);
                next.phase = Phase::InAdjudication;
                if let Some(agreed) = next.agreed_endorsement() {
                    next.phase = Phase::Consensus;
                    next.consensus = Some(agreed);
                } else if next.all_required(|id| {
                    next.endorsements.get(id).is_some_and(|e| e.round == round)
                }) {
                    // everyone spoke this round without agreeing
                    next.current_round += 1;
                }
            }
        }
        Ok(next)
    }

    fn all_required(&self, pred: impl Fn(&String) -> bool) -> bool {
        self.required_graders.iter().all(|g| pred(&g.id))
    }

    fn unanimous_independent(&self) -> Option<Assessment> {
        let mut grades = self.independent.values().map(|g| g.assessment);
        let first = grades.next()?;
        grades.all(|a| a == first).then_some(first)
    }

    fn agreed_endorsement(&self) -> Option<Assessment> {
        let mut latest = Vec::with_capacity(self.required_graders.len());
        for g in &self.required_graders {
            latest.push(self.endorsements.get(&g.id)?.assessment);
        }
        let first = *latest.first()?;
        latest.iter().all(|a| *a == first).then_some(first)
    }

    /// Oldest round-0 timestamp, used to order the disagreement queue.
    pub fn first_graded_at(&self) -> Option<DateTime<Utc>> {
        self.independent.values().map(|g| g.timestamp).min()
    }

    /// Whether `grader_id` still owes a submission at the open round.
    pub fn awaiting(&self, grader_id: &str) -> bool {
        match self.phase {
            Phase::CollectingIndependent => !self.independent.contains_key(grader_id),
            Phase::NeedsAdjudication | Phase::InAdjudication => !self
                .endorsements
                .get(grader_id)
                .is_some_and(|e| e.round == self.current_round),
            Phase::Unanimous | Phase::Consensus => false,
        }
    }
}

/// Free-function form of [`AdjudicationState::advance`].
pub fn advance_adjudication(
    state: &AdjudicationState,
    event: &GradeEvent,
) -> Result<AdjudicationState, AdjudicationError> {
    state.advance(event)
}

/// Images with an open disagreement, oldest round-0 grading first.
pub fn disagreement_queue<'a>(
    states: impl IntoIterator<Item = &'a AdjudicationState>,
) -> Vec<String> {
    let mut open: Vec<(Option<DateTime<Utc>>, &str)> = states
        .into_iter()
        .filter(|s| s.phase.is_disagreement())
        .map(|s| (s.first_graded_at(), s.image_id.as_str()))
        .collect();
    open.sort();
    open.into_iter().map(|(_, id)| id.to_string()).collect()
}

/// An image set plus the grade events recorded against it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub images: BTreeSet<String>,
    pub events: Vec<GradeEvent>,
}

impl Dataset {
    pub fn from_events(id: impl Into<String>, events: Vec<GradeEvent>) -> Self {
        let images = events.iter().map(|e| e.image_id.clone()).collect();
        Self {
            id: id.into(),
            images,
            events,
        }
    }

    /// Declares images that may not have any events yet.
    pub fn with_images(mut self, images: impl IntoIterator<Item = String>) -> Self {
        self.images.extend(images);
        self
    }

    /// Distinct graders of `role`, sorted by id.
    pub fn graders_with_role(&self, role: GraderRole) -> Vec<GraderIdentity> {
        self.events
            .iter()
            .filter(|e| e.grader.role == role)
            .map(|e| e.grader.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Events in replay order: stable sort by timestamp.
    pub fn ordered_events(&self) -> Vec<&GradeEvent> {
        let mut events: Vec<&GradeEvent> = self.events.iter().collect();
        events.sort_by_key(|e| e.timestamp);
        events
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BuildMethod {
    Majority(MajorityPolicy),
    AdjudicatedConsensus,
}

/// Runs every panel event through the state machine in timestamp order.
/// Events from graders outside the panel are ignored.
pub fn replay(
    dataset: &Dataset,
    panel: &[GraderIdentity],
) -> Result<BTreeMap<String, AdjudicationState>, RefStdError> {
    if panel.is_empty() {
        return Err(RefStdError::EmptyPanel);
    }
    let mut states: BTreeMap<String, AdjudicationState> = dataset
        .images
        .iter()
        .map(|id| (id.clone(), AdjudicationState::new(id.clone(), panel.to_vec())))
        .collect();
    for (index, event) in dataset.ordered_events().into_iter().enumerate() {
        if !panel.contains(&event.grader) {
            continue;
        }
        let state = states
            .entry(event.image_id.clone())
            .or_insert_with(|| AdjudicationState::new(event.image_id.clone(), panel.to_vec()));
        *state = state.advance(event).map_err(|source| RefStdError::Replay {
            index,
            image_id: event.image_id.clone(),
            grader_id: event.grader.id.clone(),
            round: event.round,
            source,
        })?;
    }
    Ok(states)
}

/// Builds a reference standard over every image in `dataset` from the
/// grades of `panel`.
pub fn build_reference(
    dataset: &Dataset,
    panel: &[GraderIdentity],
    method: BuildMethod,
) -> Result<ReferenceStandard, RefStdError> {
    if panel.is_empty() {
        return Err(RefStdError::EmptyPanel);
    }
    match method {
        BuildMethod::Majority(policy) => build_majority(dataset, panel, &policy),
        BuildMethod::AdjudicatedConsensus => build_adjudicated(dataset, panel),
    }
}

fn build_majority(
    dataset: &Dataset,
    panel: &[GraderIdentity],
    policy: &MajorityPolicy,
) -> Result<ReferenceStandard, RefStdError> {
    let mut by_image: BTreeMap<&str, Vec<&GradeEvent>> = dataset
        .images
        .iter()
        .map(|id| (id.as_str(), Vec::new()))
        .collect();
    for e in &dataset.events {
        if e.round == 0 && panel.contains(&e.grader) {
            by_image.entry(e.image_id.as_str()).or_default().push(e);
        }
    }
    let required = policy.min_graders.max(1);
    let incomplete: Vec<String> = by_image
        .iter()
        .filter(|(_, events)| events.len() < required)
        .map(|(id, _)| id.to_string())
        .collect();
    if !incomplete.is_empty() {
        return Err(RefStdError::IncompleteGrading {
            image_ids: incomplete,
        });
    }
    let mut reference = ReferenceStandard::new(ReferenceMethod::Majority);
    for (image_id, events) in by_image {
        let assessments: Vec<Assessment> = events.iter().map(|e| e.assessment).collect();
        let majority = majority_assessment(&assessments, policy)?;
        let mut graders: Vec<GraderIdentity> = events.iter().map(|e| e.grader.clone()).collect();
        graders.sort();
        reference.insert(ReferenceEntry::from_assessment(image_id, majority, graders));
    }
    Ok(reference)
}

fn build_adjudicated(
    dataset: &Dataset,
    panel: &[GraderIdentity],
) -> Result<ReferenceStandard, RefStdError> {
    let states = replay(dataset, panel)?;
    reference_from_states(states.values())
}

/// Adjudicated reference from already-replayed states.
pub fn reference_from_states<'a>(
    states: impl IntoIterator<Item = &'a AdjudicationState>,
) -> Result<ReferenceStandard, RefStdError> {
    let mut reference = ReferenceStandard::new(ReferenceMethod::AdjudicatedConsensus);
    let mut incomplete = Vec::new();
    for state in states {
        match (state.phase.is_resolved(), state.consensus) {
            (true, Some(consensus)) => {
                let mut graders = state.required_graders.clone();
                graders.sort();
                reference.insert(ReferenceEntry::from_assessment(
                    state.image_id.clone(),
                    consensus,
                    graders,
                ));
            }
            _ => incomplete.push(state.image_id.clone()),
        }
    }
    if !incomplete.is_empty() {
        incomplete.sort();
        return Err(RefStdError::IncompleteGrading {
            image_ids: incomplete,
        });
    }
    Ok(reference)
}
