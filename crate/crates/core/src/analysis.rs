//! Study-level comparisons built on the metrics: reference versus reference,
//! disagreement reasons, per-grader agreement and dataset summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Gender, Manifest};
use crate::metrics::{
    binarize, confusion, quadratic_weighted_kappa, sens_spec, step_analysis, Confusion,
    LabelField, MetricError, Rate, SensSpec, StepAnalysis,
};
use crate::model::{
    ConfusionMatrix, GradeEvent, GraderIdentity, ReferenceMethod, ReferenceStandard, SeverityGrade,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no image is labelled by both label sets")]
    EmptyIntersection,
    #[error("reference must be an adjudicated consensus, got {0:?}")]
    NotAdjudicated(ReferenceMethod),
    #[error("no round-0 grades to summarize")]
    MissingRoundZero,
    #[error("disagreement reason for {0} has a zero step")]
    ZeroStep(String),
    #[error("expected a {expected}-class matrix, got {got} classes")]
    MatrixShape { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrComparison {
    pub confusion: Confusion,
    pub steps: StepAnalysis,
    /// `None` when the marginals make kappa undefined.
    pub kappa: Option<f64>,
    /// Sensitivity/specificity with each level as the referable cutoff.
    pub by_cutoff: BTreeMap<SeverityGrade, Option<SensSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmeComparison {
    pub confusion: Confusion,
    pub sens_spec: Option<SensSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub reference_method: ReferenceMethod,
    pub test_method: ReferenceMethod,
    pub dr: Option<DrComparison>,
    pub dme: Option<DmeComparison>,
}

/// Compares `test` against `reference` (rows) over the images both label.
pub fn compare_references(
    reference: &ReferenceStandard,
    test: &ReferenceStandard,
) -> Result<ReferenceComparison, AnalysisError> {
    let dr = match confusion(reference, test, LabelField::Dr) {
        Ok(c) => Some(dr_comparison(c)),
        Err(MetricError::EmptyIntersection) => None,
        Err(e) => unreachable!("confusion only fails on empty intersection: {e}"),
    };
    let dme = match confusion(reference, test, LabelField::Dme) {
        Ok(c) => Some(DmeComparison {
            sens_spec: sens_spec(&c.matrix).ok(),
            confusion: c,
        }),
        Err(_) => None,
    };
    if dr.is_none() && dme.is_none() {
        return Err(AnalysisError::EmptyIntersection);
    }
    Ok(ReferenceComparison {
        reference_method: reference.method,
        test_method: test.method,
        dr,
        dme,
    })
}

fn dr_comparison(c: Confusion) -> DrComparison {
    DrComparison {
        steps: step_analysis(&c.matrix),
        kappa: quadratic_weighted_kappa(&c.matrix).ok(),
        by_cutoff: SeverityGrade::ALL[1..]
            .iter()
            .map(|&g| {
                let s = binarize(&c.matrix, g.index()).and_then(|b| sens_spec(&b)).ok();
                (g, s)
            })
            .collect(),
        confusion: c,
    }
}

/// Comparison from already tabulated matrices: a 5-class DR matrix and/or
/// a 2-class DME matrix, reference on rows.
pub fn compare_matrices(
    reference_method: ReferenceMethod,
    test_method: ReferenceMethod,
    dr: Option<&ConfusionMatrix>,
    dme: Option<&ConfusionMatrix>,
) -> Result<ReferenceComparison, AnalysisError> {
    let wrap = |field: LabelField, m: &ConfusionMatrix| -> Result<Confusion, AnalysisError> {
        let expected = field.classes().len();
        if m.k() != expected {
            return Err(AnalysisError::MatrixShape { expected, got: m.k() });
        }
        let matrix = ConfusionMatrix::new(field.classes(), m.counts().to_vec()).expect("shape checked");
        Ok(Confusion {
            field,
            compared: matrix.n() as usize,
            matrix,
            missing_in_test: Vec::new(),
        })
    };
    if dr.is_none() && dme.is_none() {
        return Err(AnalysisError::EmptyIntersection);
    }
    let dr = dr.map(|m| wrap(LabelField::Dr, m)).transpose()?.map(dr_comparison);
    let dme = dme
        .map(|m| wrap(LabelField::Dme, m))
        .transpose()?
        .map(|c| DmeComparison {
            sens_spec: sens_spec(&c.matrix).ok(),
            confusion: c,
        });
    Ok(ReferenceComparison {
        reference_method,
        test_method,
        dr,
        dme,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCategory {
    ArtifactVsNot,
    ExtentOfLesions,
    HemorrhageVsMa,
    HemorrhageVsNot,
    IrmaVsNot,
    MissedHemorrhage,
    MissedMa,
    MissedNvdNve,
    PrpVsNot,
    Other,
}

impl ReasonCategory {
    pub const ALL: [ReasonCategory; 10] = [
        ReasonCategory::ArtifactVsNot,
        ReasonCategory::ExtentOfLesions,
        ReasonCategory::HemorrhageVsMa,
        ReasonCategory::HemorrhageVsNot,
        ReasonCategory::IrmaVsNot,
        ReasonCategory::MissedHemorrhage,
        ReasonCategory::MissedMa,
        ReasonCategory::MissedNvdNve,
        ReasonCategory::PrpVsNot,
        ReasonCategory::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ReasonCategory::ArtifactVsNot => "Artifact vs not",
            ReasonCategory::ExtentOfLesions => "Extent of Lesions",
            ReasonCategory::HemorrhageVsMa => "Hemorrhage vs MA",
            ReasonCategory::HemorrhageVsNot => "Hemorrhage vs not",
            ReasonCategory::IrmaVsNot => "IRMA vs not",
            ReasonCategory::MissedHemorrhage => "Missed hemorrhage",
            ReasonCategory::MissedMa => "Missed MA",
            ReasonCategory::MissedNvdNve => "Missed NVD/NVE",
            ReasonCategory::PrpVsNot => "PRP vs not",
            ReasonCategory::Other => "Other",
        }
    }

    /// Parses a snake_case key or a display label.
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Self::ALL.into_iter().find(|c| {
            let key: String = serde_json::to_value(c)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
                .replace('_', "");
            let label: String = c
                .label()
                .chars()
                .filter(|ch| ch.is_ascii_alphanumeric())
                .collect::<String>()
                .to_ascii_lowercase();
            norm == key || norm == label
        })
    }
}

impl fmt::Display for ReasonCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Why an adjudicated grade differs from a comparator grade, as recorded by
/// a reviewing specialist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisagreementReason {
    pub image_id: String,
    pub category: ReasonCategory,
    /// Adjudicated grade minus comparator grade.
    pub signed_step: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonsCrosstab {
    /// Observed signed steps, ascending.
    pub steps: Vec<i64>,
    /// Counts per category, aligned with `steps`.
    pub rows: BTreeMap<ReasonCategory, Vec<u64>>,
    pub row_totals: BTreeMap<ReasonCategory, u64>,
    pub column_totals: Vec<u64>,
    pub grand_total: u64,
}

impl ReasonsCrosstab {
    pub fn cell(&self, category: ReasonCategory, step: i64) -> u64 {
        self.steps
            .iter()
            .position(|&s| s == step)
            .map_or(0, |j| self.rows[&category][j])
    }

    pub fn column_total(&self, step: i64) -> u64 {
        self.steps
            .iter()
            .position(|&s| s == step)
            .map_or(0, |j| self.column_totals[j])
    }
}

pub fn reasons_crosstab(reasons: &[DisagreementReason]) -> Result<ReasonsCrosstab, AnalysisError> {
    if let Some(r) = reasons.iter().find(|r| r.signed_step == 0) {
        return Err(AnalysisError::ZeroStep(r.image_id.clone()));
    }
    let steps: Vec<i64> = reasons
        .iter()
        .map(|r| r.signed_step)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rows: BTreeMap<ReasonCategory, Vec<u64>> = ReasonCategory::ALL
        .iter()
        .map(|&c| (c, vec![0; steps.len()]))
        .collect();
    for r in reasons {
        let j = steps.binary_search(&r.signed_step).expect("collected above");
        rows.get_mut(&r.category).expect("all categories present")[j] += 1;
    }
    let row_totals = rows.iter().map(|(&c, v)| (c, v.iter().sum())).collect();
    let column_totals = (0..steps.len())
        .map(|j| rows.values().map(|v| v[j]).sum())
        .collect();
    Ok(ReasonsCrosstab {
        steps,
        rows,
        row_totals,
        column_totals,
        grand_total: reasons.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgreementMode {
    /// Same side of the referability cutoff as the consensus.
    #[default]
    Referability,
    /// Same DR grade as the consensus.
    ExactGrade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderAgreement {
    pub grader: GraderIdentity,
    /// Agreement on images the consensus calls referable DR.
    pub dr_referable: Rate,
    pub dr_nonreferable: Rate,
    pub dme_referable: Rate,
    pub dme_nonreferable: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub cutoff: SeverityGrade,
    pub mode: AgreementMode,
    pub graders: Vec<GraderAgreement>,
}

/// Per-grader agreement of round-0 grades with the adjudicated consensus,
/// split by whether the consensus is referable. Only images the grader
/// graded as gradable count.
pub fn grader_agreement_summary(
    events: &[GradeEvent],
    reference: &ReferenceStandard,
    cutoff: SeverityGrade,
    mode: AgreementMode,
) -> Result<AgreementSummary, AnalysisError> {
    if reference.method != ReferenceMethod::AdjudicatedConsensus {
        return Err(AnalysisError::NotAdjudicated(reference.method));
    }
    let mut per_grader: BTreeMap<&GraderIdentity, [[u64; 2]; 4]> = BTreeMap::new();
    let mut any = false;
    for e in events.iter().filter(|e| e.round == 0) {
        any = true;
        // [agree, total] for dr_ref, dr_non, dme_ref, dme_non
        let tally = per_grader.entry(&e.grader).or_default();
        let Some(entry) = reference.get(&e.image_id).filter(|r| r.is_gradable()) else {
            continue;
        };
        if let (Some(truth), Some(given)) = (entry.dr, e.assessment.dr) {
            let referable = truth >= cutoff;
            let agree = match mode {
                AgreementMode::Referability => (given >= cutoff) == referable,
                AgreementMode::ExactGrade => given == truth,
            };
            let slot = if referable { 0 } else { 1 };
            tally[slot][0] += u64::from(agree);
            tally[slot][1] += 1;
        }
        if let (Some(truth), Some(given)) = (entry.dme, e.assessment.dme) {
            let slot = if truth.is_referable() { 2 } else { 3 };
            tally[slot][0] += u64::from(truth == given);
            tally[slot][1] += 1;
        }
    }
    if !any {
        return Err(AnalysisError::MissingRoundZero);
    }
    let rate = |t: [u64; 2]| Rate::new(t[0], t[1]);
    Ok(AgreementSummary {
        cutoff,
        mode,
        graders: per_grader
            .into_iter()
            .map(|(g, t)| GraderAgreement {
                grader: g.clone(),
                dr_referable: rate(t[0]),
                dr_nonreferable: rate(t[1]),
                dme_referable: rate(t[2]),
                dme_nonreferable: rate(t[3]),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single patient.
    pub sd: f64,
    pub patients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub unique_individuals: usize,
    /// `None` when no patient has a recorded age.
    pub age: Option<AgeStats>,
    /// Female patients over patients with known gender.
    pub female: Rate,
    /// Fully gradable images over images with a gradability assessment.
    pub gradable: Rate,
    /// DR grade counts over gradable images with a DR grade.
    pub dr_distribution: BTreeMap<SeverityGrade, Rate>,
    /// Referable DME over gradable images with a DME label.
    pub dme_referable: Rate,
}

/// Table-style summary of a dataset. Images come from the manifest, falling
/// back to the reference entries when the manifest is empty.
pub fn dataset_summary(manifest: &Manifest, reference: &ReferenceStandard) -> DatasetSummary {
    let image_ids: BTreeSet<&str> = if manifest.images.is_empty() {
        reference.entries.keys().map(String::as_str).collect()
    } else {
        manifest.images.keys().map(String::as_str).collect()
    };
    let patients = manifest.patients_of(&image_ids);

    let ages: Vec<f64> = patients
        .iter()
        .filter_map(|p| manifest.patients.get(*p).and_then(|r| r.age))
        .collect();
    let age = (!ages.is_empty()).then(|| {
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let sd = if ages.len() > 1 {
            (ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        AgeStats {
            mean,
            sd,
            patients: ages.len(),
        }
    });
    let genders: Vec<Gender> = patients
        .iter()
        .filter_map(|p| manifest.patients.get(*p).and_then(|r| r.gender))
        .collect();
    let female = Rate::new(
        genders.iter().filter(|g| **g == Gender::Female).count() as u64,
        genders.len() as u64,
    );

    let assessed: Vec<_> = image_ids
        .iter()
        .filter_map(|id| reference.get(id))
        .collect();
    let gradable_entries: Vec<_> = assessed.iter().filter(|e| e.is_gradable()).collect();
    let gradable = Rate::new(gradable_entries.len() as u64, assessed.len() as u64);

    let dr: Vec<SeverityGrade> = gradable_entries.iter().filter_map(|e| e.dr).collect();
    let dr_distribution = SeverityGrade::ALL
        .iter()
        .map(|&g| {
            let count = dr.iter().filter(|&&d| d == g).count() as u64;
            (g, Rate::new(count, dr.len() as u64))
        })
        .collect();
    let dme: Vec<_> = gradable_entries.iter().filter_map(|e| e.dme).collect();
    let dme_referable = Rate::new(
        dme.iter().filter(|d| d.is_referable()).count() as u64,
        dme.len() as u64,
    );

    DatasetSummary {
        images: image_ids.len(),
        unique_individuals: patients.len(),
        age,
        female,
        gradable,
        dr_distribution,
        dme_referable,
    }
}
