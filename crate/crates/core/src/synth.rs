//! Seeded generators for grading logs and prediction files.
//!
//! [`synthetic_workflow`] produces a complete independent-grading plus
//! adjudication log with injected disagreements. [`validation_replay`]
//! reconstructs a per-image study from published confusion matrices: grade
//! events, manifest, ensemble member predictions and disagreement reasons
//! whose aggregates reproduce those matrices exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{DisagreementReason, ReasonCategory};
use crate::io::{self, IoError, PolicyFile, PredictionFile, TableRecord};
use crate::manifest::{Gender, ImageRecord, Manifest, PatientRecord};
use crate::model::{
    Assessment, ConfusionMatrix, DmeStatus, GradeEvent, Gradability, GraderIdentity, GraderRole,
    PredictionRecord, SeverityGrade,
};
use crate::operating::{CascadePolicy, EnsembleSpec, ScoreMode, Threshold};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("table {0:?} is missing from the tables file")]
    MissingTable(String),
    #[error("inconsistent design: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2017, 3, 1, 8, 0, 0).unwrap()
}

fn grade(level: usize) -> SeverityGrade {
    SeverityGrade::ALL[level]
}

fn dme(referable: bool) -> DmeStatus {
    if referable {
        DmeStatus::Referable
    } else {
        DmeStatus::NotReferable
    }
}

/// Appends events with strictly increasing timestamps.
struct LogBuilder {
    events: Vec<GradeEvent>,
    clock: DateTime<Utc>,
}

impl LogBuilder {
    fn new() -> Self {
        Self {
            events: Vec::new(),
            clock: base_time(),
        }
    }

    fn push(&mut self, image_id: &str, grader: &GraderIdentity, round: u32, assessment: Assessment) {
        self.clock += Duration::seconds(7);
        self.events.push(io::grade_event(image_id, grader, round, self.clock, assessment));
    }
}

pub fn panel(prefix: &str, role: GraderRole, n: usize) -> Vec<GraderIdentity> {
    (0..n)
        .map(|i| GraderIdentity::new(format!("{prefix}-{}", (b'a' + i as u8) as char), role))
        .collect()
}

// ---- synthetic workflow ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    pub images: usize,
    pub graders: usize,
    pub seed: u64,
    /// Share of images whose round-0 grades disagree.
    pub disagreement_rate: f64,
    /// Share of disagreements that need a second adjudication round.
    pub second_round_rate: f64,
    pub ungradable_rate: f64,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            images: 500,
            graders: 3,
            seed: 7,
            disagreement_rate: 0.2,
            second_round_rate: 0.25,
            ungradable_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowLog {
    pub dataset_id: String,
    pub images: Vec<String>,
    pub graders: Vec<GraderIdentity>,
    /// In timestamp order: all round-0 grades, then adjudication rounds.
    pub events: Vec<GradeEvent>,
    /// Images whose round-0 grades were made to disagree.
    pub injected: BTreeSet<String>,
    /// Consensus each image should end with.
    pub truth: BTreeMap<String, Assessment>,
}

pub fn synthetic_workflow(cfg: &WorkflowConfig) -> WorkflowLog {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let graders = panel("rs", GraderRole::RetinaSpecialist, cfg.graders.max(2));
    let images: Vec<String> = (0..cfg.images).map(|i| format!("wf-{:04}", i + 1)).collect();
    let weights = [0.7, 0.1, 0.12, 0.05, 0.03];

    let mut truth = BTreeMap::new();
    let mut round0: BTreeMap<&str, Vec<Assessment>> = BTreeMap::new();
    let mut injected = BTreeSet::new();
    for id in &images {
        let t = if rng.random_bool(cfg.ungradable_rate) {
            Assessment::ungradable()
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let level = weights
                .iter()
                .position(|w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(4);
            Assessment::gradable(grade(level), dme(level >= 2 && rng.random_bool(0.3)))
        };
        let mut grades = vec![t; graders.len()];
        if rng.random_bool(cfg.disagreement_rate) {
            let who = rng.random_range(0..graders.len());
            grades[who] = perturb(t, &mut rng);
            injected.insert(id.clone());
        }
        truth.insert(id.clone(), t);
        round0.insert(id.as_str(), grades);
    }

    let mut log = LogBuilder::new();
    // round 0: graders interleave, each in their own order
    let orders: Vec<Vec<usize>> = graders
        .iter()
        .map(|_| {
            let mut o: Vec<usize> = (0..images.len()).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    for step in 0..images.len() {
        for (g, order) in orders.iter().enumerate() {
            let id = &images[order[step]];
            log.push(id, &graders[g], 0, round0[id.as_str()][g]);
        }
    }
    // adjudication in queue order (oldest first grading)
    let mut first_seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, e) in log.events.iter().enumerate() {
        first_seen.entry(e.image_id.as_str()).or_insert(i);
    }
    let mut queue: Vec<&String> = injected.iter().collect();
    queue.sort_by_key(|id| first_seen[id.as_str()]);
    let queue: Vec<String> = queue.into_iter().cloned().collect();
    for id in &queue {
        let t = truth[id];
        let dissent = round0[id.as_str()]
            .iter()
            .position(|a| *a != t)
            .expect("injected images disagree");
        let second = rng.random_bool(cfg.second_round_rate);
        for (g, grader) in graders.iter().enumerate() {
            let a = if second && g == dissent { round0[id.as_str()][g] } else { t };
            log.push(id, grader, 1, a);
        }
        if second {
            log.push(id, &graders[dissent], 2, t);
        }
    }

    WorkflowLog {
        dataset_id: format!("workflow-{}", cfg.seed),
        images,
        graders,
        events: log.events,
        injected,
        truth,
    }
}

fn perturb(t: Assessment, rng: &mut ChaCha8Rng) -> Assessment {
    match t.dr {
        None => Assessment::gradable(SeverityGrade::NoDr, DmeStatus::NotReferable),
        Some(g) => {
            let level = g.index();
            let other = if level == 0 {
                1
            } else if level == 4 || rng.random_bool(0.5) {
                level - 1
            } else {
                level + 1
            };
            Assessment::gradable(grade(other), t.dme.unwrap_or(DmeStatus::NotReferable))
        }
    }
}

// ---- validation replay ----

/// Table ids the replay reads from the tables file.
pub const SPECIALIST_MAJORITY_DR: &str = "specialist_majority_dr";
pub const OPHTHALMOLOGIST_MAJORITY_DR: &str = "ophthalmologist_majority_dr";
pub const OPHTHALMOLOGIST_MAJORITY_DME: &str = "ophthalmologist_majority_dme";
pub const ALGORITHM_DR: &str = "algorithm_dr";
pub const ALGORITHM_DME: &str = "algorithm_dme";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonCounts {
    pub category: ReasonCategory,
    /// Count per signed step (adjudicated minus comparator).
    pub steps: BTreeMap<i64, u64>,
}

/// Study-level facts that are not confusion matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub schema: String,
    pub dataset_id: String,
    pub seed: u64,
    pub images: usize,
    pub patients: usize,
    pub female: usize,
    pub age_mean: f64,
    pub age_sd: f64,
    pub ensemble_members: usize,
    #[serde(default)]
    pub input_resolution: Option<u32>,
    pub reasons: Vec<ReasonCounts>,
}

pub const STUDY_SCHEMA: &str = "retgrade.study/1";

pub fn load_study(path: &Path) -> Result<StudyDesign, SynthError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let design: StudyDesign = serde_json::from_str(&text).map_err(|e| IoError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if design.schema != STUDY_SCHEMA {
        return Err(IoError::SchemaMismatch {
            expected: STUDY_SCHEMA.into(),
            found: design.schema,
        }
        .into());
    }
    Ok(design)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReplay {
    pub dataset_id: String,
    pub manifest: Manifest,
    pub events: Vec<GradeEvent>,
    pub specialists: Vec<GraderIdentity>,
    pub ophthalmologists: Vec<GraderIdentity>,
    pub members: Vec<PredictionFile>,
    pub policy: PolicyFile,
    pub reasons: Vec<DisagreementReason>,
}

/// Everything the generator decides about one gradable image.
#[derive(Debug, Clone)]
struct Plan {
    adj_dr: usize,
    adj_dme: bool,
    spec_dr: usize,
    /// `None` = ophthalmologist majority calls the image ungradable.
    oph_dr: Option<usize>,
    /// `None` = no ophthalmologist DME grade.
    oph_dme: Option<bool>,
    model_dr: usize,
    model_dme: bool,
}

fn table<'a>(tables: &'a [TableRecord], id: &str) -> Result<&'a ConfusionMatrix, SynthError> {
    tables
        .iter()
        .find(|t| t.id == id)
        .map(|t| &t.matrix)
        .ok_or_else(|| SynthError::MissingTable(id.into()))
}

fn expand(counts: &[u64]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(j, &c)| std::iter::repeat_n(j, c as usize))
        .collect()
}

pub fn validation_replay(tables: &[TableRecord], design: &StudyDesign) -> Result<ValidationReplay, SynthError> {
    let spec = table(tables, SPECIALIST_MAJORITY_DR)?;
    let oph = table(tables, OPHTHALMOLOGIST_MAJORITY_DR)?;
    let oph_dme_t = table(tables, OPHTHALMOLOGIST_MAJORITY_DME)?;
    let alg = table(tables, ALGORITHM_DR)?;
    let alg_dme = table(tables, ALGORITHM_DME)?;
    if spec.k() != 5 || oph.k() != 5 || alg.k() != 5 || oph_dme_t.k() != 2 || alg_dme.k() != 2 {
        return Err(SynthError::Inconsistent("expected 5-class DR and 2-class DME tables".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);

    let adj_rows = spec.row_totals();
    if alg.row_totals() != adj_rows {
        return Err(SynthError::Inconsistent(
            "specialist and algorithm DR tables disagree on adjudicated row totals".into(),
        ));
    }
    let gradable: u64 = adj_rows.iter().sum();
    if gradable as usize > design.images {
        return Err(SynthError::Inconsistent("more gradable images than images".into()));
    }
    let adj_dme_rows = alg_dme.row_totals();
    if adj_dme_rows.iter().sum::<u64>() != gradable {
        return Err(SynthError::Inconsistent("DME table does not cover the gradable images".into()));
    }

    // DR columns per adjudicated row
    let mut plans: Vec<Plan> = Vec::with_capacity(gradable as usize);
    for a in 0..5 {
        let n = adj_rows[a] as usize;
        let mut spec_labels = expand(&spec.counts()[a]);
        let mut alg_labels = expand(&alg.counts()[a]);
        let oph_row = &oph.counts()[a];
        let oph_total: u64 = oph_row.iter().sum();
        if oph_total > adj_rows[a] {
            return Err(SynthError::Inconsistent(format!("ophthalmologist row {a} exceeds adjudicated row")));
        }
        let mut oph_labels: Vec<Option<usize>> = expand(oph_row).into_iter().map(Some).collect();
        oph_labels.extend(std::iter::repeat_n(None, (adj_rows[a] - oph_total) as usize));
        spec_labels.shuffle(&mut rng);
        alg_labels.shuffle(&mut rng);
        oph_labels.shuffle(&mut rng);
        for i in 0..n {
            plans.push(Plan {
                adj_dr: a,
                adj_dme: false,
                spec_dr: spec_labels[i],
                oph_dr: oph_labels[i],
                oph_dme: None,
                model_dr: alg_labels[i],
                model_dme: false,
            });
        }
    }

    // DME: images ungradable for the ophthalmologists take missing DME slots
    let oph_dme_rows = oph_dme_t.row_totals();
    let mut missing: [u64; 2] = [
        adj_dme_rows[0]
            .checked_sub(oph_dme_rows[0])
            .ok_or_else(|| SynthError::Inconsistent("DME row 0".into()))?,
        adj_dme_rows[1]
            .checked_sub(oph_dme_rows[1])
            .ok_or_else(|| SynthError::Inconsistent("DME row 1".into()))?,
    ];
    let oph_ungradable: Vec<usize> = (0..plans.len()).filter(|&i| plans[i].oph_dr.is_none()).collect();
    let mut ungradable_dme: BTreeMap<usize, bool> = BTreeMap::new();
    for &i in &oph_ungradable {
        let class = if missing[0] >= missing[1] { 0 } else { 1 };
        if missing[class] == 0 {
            return Err(SynthError::Inconsistent("not enough missing DME slots".into()));
        }
        missing[class] -= 1;
        ungradable_dme.insert(i, class == 1);
    }
    let forced_referable = ungradable_dme.values().filter(|&&r| r).count() as u64;
    let mut candidates: Vec<usize> = (0..plans.len()).filter(|i| !ungradable_dme.contains_key(i)).collect();
    // referable DME is more likely with more severe DR
    let keys: BTreeMap<usize, usize> = candidates
        .iter()
        .map(|&i| (i, rng.random_range(0..100) + 40 * plans[i].adj_dr))
        .collect();
    candidates.sort_by_key(|i| (std::cmp::Reverse(keys[i]), *i));
    let referable: BTreeSet<usize> = candidates
        .iter()
        .take((adj_dme_rows[1] - forced_referable) as usize)
        .copied()
        .chain(ungradable_dme.iter().filter(|(_, &r)| r).map(|(&i, _)| i))
        .collect();
    for (i, p) in plans.iter_mut().enumerate() {
        p.adj_dme = referable.contains(&i);
    }
    for class in 0..2 {
        let want = class == 1;
        let members: Vec<usize> = (0..plans.len()).filter(|&i| plans[i].adj_dme == want).collect();
        let mut oph_labels: Vec<Option<bool>> = expand(&oph_dme_t.counts()[class])
            .into_iter()
            .map(|j| Some(j == 1))
            .collect();
        oph_labels.extend(std::iter::repeat_n(None, missing[class] as usize));
        let mut alg_labels: Vec<bool> = expand(&alg_dme.counts()[class]).into_iter().map(|j| j == 1).collect();
        oph_labels.shuffle(&mut rng);
        alg_labels.shuffle(&mut rng);
        let open: Vec<usize> = members.iter().copied().filter(|i| !ungradable_dme.contains_key(i)).collect();
        if open.len() != oph_labels.len() || members.len() != alg_labels.len() {
            return Err(SynthError::Inconsistent(format!("DME class {class} counts do not line up")));
        }
        for (i, l) in open.into_iter().zip(oph_labels) {
            plans[i].oph_dme = l;
        }
        for (i, l) in members.into_iter().zip(alg_labels) {
            plans[i].model_dme = l;
        }
    }

    // image ids, patients and gradability
    let n_images = design.images;
    let image_ids: Vec<String> = (0..n_images).map(|i| format!("img-{:04}", i + 1)).collect();
    let mut slots: Vec<usize> = (0..n_images).collect();
    slots.shuffle(&mut rng);
    let plan_of: BTreeMap<usize, usize> = slots[..plans.len()].iter().enumerate().map(|(p, &img)| (img, p)).collect();

    let manifest = build_manifest(&image_ids, design, &mut rng)?;

    let specialists = panel("rs", GraderRole::RetinaSpecialist, 3);
    let ophthalmologists = panel("oph", GraderRole::Ophthalmologist, 3);

    // round-0 assessments per image
    let mut spec_r0: Vec<[Assessment; 3]> = Vec::with_capacity(n_images);
    let mut oph_r0: Vec<[Assessment; 3]> = Vec::with_capacity(n_images);
    let mut truth: Vec<Assessment> = Vec::with_capacity(n_images);
    for img in 0..n_images {
        match plan_of.get(&img) {
            Some(&p) => {
                let plan = &plans[p];
                let t = Assessment::gradable(grade(plan.adj_dr), dme(plan.adj_dme));
                truth.push(t);
                spec_r0.push(specialist_grades(plan, t, &mut rng));
                oph_r0.push(ophthalmologist_grades(plan, &mut rng));
            }
            None => {
                let t = Assessment::ungradable();
                truth.push(t);
                let mut s = [t; 3];
                if rng.random_bool(0.1) {
                    s[rng.random_range(0..3)] = Assessment::gradable(SeverityGrade::NoDr, DmeStatus::NotReferable);
                }
                spec_r0.push(s);
                let mut o = [t; 3];
                if rng.random_bool(0.2) {
                    o[rng.random_range(0..3)] = Assessment::gradable(grade(rng.random_range(0..2)), DmeStatus::NotReferable);
                }
                oph_r0.push(o);
            }
        }
    }

    // events: round 0 interleaved by grader, then adjudication
    let mut log = LogBuilder::new();
    let graders: Vec<(&GraderIdentity, bool, usize)> = specialists
        .iter()
        .enumerate()
        .map(|(k, g)| (g, true, k))
        .chain(ophthalmologists.iter().enumerate().map(|(k, g)| (g, false, k)))
        .collect();
    let orders: Vec<Vec<usize>> = graders
        .iter()
        .map(|_| {
            let mut o: Vec<usize> = (0..n_images).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    for step in 0..n_images {
        for (gi, &(g, is_spec, k)) in graders.iter().enumerate() {
            let img = orders[gi][step];
            let a = if is_spec { spec_r0[img][k] } else { oph_r0[img][k] };
            log.push(&image_ids[img], g, 0, a);
        }
    }
    let mut first_seen: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, e) in log.events.iter().enumerate() {
        if e.grader.role == GraderRole::RetinaSpecialist {
            let img = image_ids.binary_search(&e.image_id).expect("known image");
            first_seen.entry(img).or_insert(i);
        }
    }
    let mut queue: Vec<usize> = (0..n_images)
        .filter(|&img| spec_r0[img].iter().any(|a| *a != spec_r0[img][0]))
        .collect();
    queue.sort_by_key(|img| first_seen[img]);
    for img in queue {
        let t = truth[img];
        let dissent = spec_r0[img].iter().position(|a| *a != t);
        let second = dissent.is_some() && rng.random_bool(0.2);
        for (k, g) in specialists.iter().enumerate() {
            let a = if second && Some(k) == dissent { spec_r0[img][k] } else { t };
            log.push(&image_ids[img], g, 1, a);
        }
        if let (true, Some(k)) = (second, dissent) {
            log.push(&image_ids[img], &specialists[k], 2, t);
        }
    }

    let members = member_predictions(&image_ids, &plans, &plan_of, design, &mut rng);
    let spec_ids: Vec<String> = members.iter().map(|m| m.model_id.clone()).collect();
    let mut policy = CascadePolicy::from_thresholds([Threshold::At(0.5); 4], ScoreMode::Tail);
    policy.dme_threshold = Some(Threshold::At(0.5));
    let policy = PolicyFile::new(
        policy,
        Some(EnsembleSpec {
            ensemble_id: "ensemble".into(),
            member_model_ids: spec_ids,
            combine: Default::default(),
        }),
    );

    let reasons = assign_reasons(&image_ids, &plans, &plan_of, &design.reasons, &mut rng)?;

    Ok(ValidationReplay {
        dataset_id: design.dataset_id.clone(),
        manifest,
        events: log.events,
        specialists,
        ophthalmologists,
        members,
        policy,
        reasons,
    })
}

/// Two graders give the majority grade; the third gives the adjudicated
/// grade when it differs, otherwise occasionally a neighbouring grade.
fn specialist_grades(plan: &Plan, t: Assessment, rng: &mut ChaCha8Rng) -> [Assessment; 3] {
    let maj = Assessment::gradable(grade(plan.spec_dr), t.dme.unwrap_or(DmeStatus::NotReferable));
    let odd = if plan.spec_dr != plan.adj_dr {
        t
    } else if rng.random_bool(0.12) {
        let other = if plan.adj_dr == 0 { 1 } else { plan.adj_dr - 1 };
        Assessment::gradable(grade(other), t.dme.unwrap_or(DmeStatus::NotReferable))
    } else {
        maj
    };
    let mut out = [maj; 3];
    out[rng.random_range(0..3)] = odd;
    out
}

fn ophthalmologist_grades(plan: &Plan, rng: &mut ChaCha8Rng) -> [Assessment; 3] {
    let Some(m) = plan.oph_dr else {
        let mut out = [Assessment::ungradable(); 3];
        if rng.random_bool(0.3) {
            out[rng.random_range(0..3)] = Assessment::gradable(grade(plan.adj_dr), dme(plan.adj_dme));
        }
        return out;
    };
    let maj = Assessment {
        gradability: Gradability::FullyGradable,
        dr: Some(grade(m)),
        dme: plan.oph_dme.map(dme),
    };
    let mut out = [maj; 3];
    if rng.random_bool(0.3) {
        let other = if m != plan.adj_dr {
            plan.adj_dr
        } else if m == 4 || (m > 0 && rng.random_bool(0.5)) {
            m - 1
        } else {
            m + 1
        };
        // DME stays with the majority unless the majority has one to flip
        let odd_dme = match plan.oph_dme {
            Some(d) if rng.random_bool(0.2) => Some(dme(!d)),
            d => d.map(dme),
        };
        out[rng.random_range(0..3)] = Assessment {
            gradability: Gradability::FullyGradable,
            dr: Some(grade(other)),
            dme: odd_dme,
        };
    }
    out
}

fn build_manifest(image_ids: &[String], design: &StudyDesign, rng: &mut ChaCha8Rng) -> Result<Manifest, SynthError> {
    let (n, p) = (image_ids.len(), design.patients);
    if p == 0 || p > n || n > 2 * p {
        return Err(SynthError::Inconsistent(format!("{n} images cannot be spread over {p} patients at 1-2 per patient")));
    }
    if design.female > p {
        return Err(SynthError::Inconsistent("more female patients than patients".into()));
    }
    let two_image = n - p;
    let mut female: Vec<bool> = (0..p).map(|i| i < design.female).collect();
    female.shuffle(rng);
    let ages = standardized_ages(p, design.age_mean, design.age_sd, rng);

    let mut manifest = Manifest::default();
    let mut next = 0;
    for i in 0..p {
        let patient_id = format!("pt-{:04}", i + 1);
        manifest.add_patient(PatientRecord {
            patient_id: patient_id.clone(),
            age: Some(ages[i]),
            gender: Some(if female[i] { Gender::Female } else { Gender::Male }),
        });
        let eyes: &[&str] = if i < two_image { &["left", "right"] } else { &["left"] };
        for eye in eyes {
            manifest.add_image(ImageRecord {
                image_id: image_ids[next].clone(),
                patient_id: patient_id.clone(),
                eye_id: Some(format!("{patient_id}-{eye}")),
                field: Some("primary".into()),
                uri: Some(format!("images/{}.jpg", image_ids[next])),
            });
            next += 1;
        }
    }
    Ok(manifest)
}

/// Ages with sample mean and sd equal to the targets before rounding to
/// one decimal.
fn standardized_ages(n: usize, mean: f64, sd: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0)
        .collect();
    if n < 2 {
        return vec![mean; n];
    }
    let m = raw.iter().sum::<f64>() / n as f64;
    let s = (raw.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    raw.iter()
        .map(|x| (((x - m) / s * sd + mean) * 10.0).round() / 10.0)
        .collect()
}

fn member_predictions(
    image_ids: &[String],
    plans: &[Plan],
    plan_of: &BTreeMap<usize, usize>,
    design: &StudyDesign,
    rng: &mut ChaCha8Rng,
) -> Vec<PredictionFile> {
    // per-image centre; members scatter around it by at most ±0.02 per
    // component, which keeps every stage score on the designed side of 0.5
    let centres: Vec<([f64; 5], f64, f64)> = (0..image_ids.len())
        .map(|img| match plan_of.get(&img) {
            Some(&p) => {
                let plan = &plans[p];
                (
                    dr_vector(plan.model_dr, rng),
                    if plan.model_dme { rng.random_range(0.6..0.95) } else { rng.random_range(0.02..0.4) },
                    rng.random_range(0.6..0.99),
                )
            }
            None => (dr_vector(0, rng), rng.random_range(0.02..0.4), rng.random_range(0.05..0.5)),
        })
        .collect();
    (0..design.ensemble_members)
        .map(|k| {
            let model_id = format!("member-{:02}", k + 1);
            let records = image_ids
                .iter()
                .zip(&centres)
                .map(|(id, (p_dr, p_dme, p_grad))| {
                    let mut jitter = |v: f64, amp: f64| (v + rng.random_range(-amp..=amp)).clamp(0.0, 1.0);
                    let p_dr = p_dr.map(|v| round6(jitter(v, 0.02)));
                    PredictionRecord {
                        image_id: id.clone(),
                        model_id: model_id.clone(),
                        p_dr,
                        p_dme: round6(jitter(*p_dme, 0.05)),
                        p_gradable: round6(jitter(*p_grad, 0.05)),
                    }
                })
                .collect();
            PredictionFile {
                model_id,
                input_resolution: design.input_resolution,
                records,
            }
        })
        .collect()
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Class confidences with most mass on `target`: tail sums above the target
/// stay below 0.4 and at or below it stay above 0.65.
fn dr_vector(target: usize, rng: &mut ChaCha8Rng) -> [f64; 5] {
    let peak = rng.random_range(0.65..0.9);
    let mut rest = [0.0f64; 5];
    let mut total = 0.0;
    for (j, r) in rest.iter_mut().enumerate() {
        if j != target {
            *r = rng.random_range(0.05..1.0);
            total += *r;
        }
    }
    let mut out = [0.0; 5];
    for j in 0..5 {
        out[j] = if j == target { peak } else { (1.0 - peak) * rest[j] / total };
    }
    out
}

fn assign_reasons(
    image_ids: &[String],
    plans: &[Plan],
    plan_of: &BTreeMap<usize, usize>,
    design: &[ReasonCounts],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DisagreementReason>, SynthError> {
    let mut pools: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (&img, &p) in plan_of {
        if let Some(m) = plans[p].oph_dr {
            let step = plans[p].adj_dr as i64 - m as i64;
            if step != 0 {
                pools.entry(step).or_default().push(img);
            }
        }
    }
    for pool in pools.values_mut() {
        pool.shuffle(rng);
    }
    let mut used: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    let mut reasons = Vec::new();
    for row in design {
        for (&step, &count) in &row.steps {
            for _ in 0..count {
                let img = match pools.get_mut(&step).and_then(Vec::pop) {
                    Some(img) => img,
                    // more reasons than disagreements at this step: the image
                    // carries a second reason
                    None => *used
                        .get(&step)
                        .and_then(|u| u.first())
                        .ok_or_else(|| SynthError::Inconsistent(format!("no disagreement with step {step}")))?,
                };
                used.entry(step).or_default().push(img);
                reasons.push(DisagreementReason {
                    image_id: image_ids[img].clone(),
                    category: row.category,
                    signed_step: step,
                    note: None,
                });
            }
        }
    }
    reasons.sort_by(|a, b| (&a.image_id, a.category).cmp(&(&b.image_id, b.category)));
    Ok(reasons)
}

/// File layout written by [`write_validation_replay`].
pub mod layout {
    pub const MANIFEST: &str = "manifest.jsonl";
    pub const GRADES: &str = "grades.jsonl";
    pub const PREDICTIONS_DIR: &str = "predictions";
    pub const POLICY: &str = "policy.json";
    pub const REASONS: &str = "reasons.jsonl";
}

pub fn write_validation_replay(dir: &Path, replay: &ValidationReplay) -> Result<(), IoError> {
    io::save_manifest(&dir.join(layout::MANIFEST), Some(&replay.dataset_id), &replay.manifest)?;
    io::save_grades(&dir.join(layout::GRADES), &replay.dataset_id, &replay.events)?;
    for m in &replay.members {
        io::save_predictions(&dir.join(layout::PREDICTIONS_DIR).join(format!("{}.jsonl", m.model_id)), m)?;
    }
    io::save_policy(&dir.join(layout::POLICY), &replay.policy)?;
    io::save_reasons(
        &dir.join(layout::REASONS),
        Some("adjudicated minus ophthalmologist majority"),
        &replay.reasons,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refstd::{build_reference, BuildMethod, Dataset};

    #[test]
    fn workflow_is_seeded() {
        let cfg = WorkflowConfig {
            images: 60,
            ..Default::default()
        };
        assert_eq!(synthetic_workflow(&cfg), synthetic_workflow(&cfg));
        let other = synthetic_workflow(&WorkflowConfig { seed: 8, ..cfg });
        assert_ne!(other.events, synthetic_workflow(&cfg).events);
    }

    #[test]
    fn workflow_replays_to_truth() {
        let log = synthetic_workflow(&WorkflowConfig {
            images: 200,
            ..Default::default()
        });
        assert!(!log.injected.is_empty());
        let ds = Dataset::from_events(&log.dataset_id, log.events.clone());
        let r = build_reference(&ds, &log.graders, BuildMethod::AdjudicatedConsensus).unwrap();
        assert_eq!(r.len(), 200);
        for (id, t) in &log.truth {
            let e = r.get(id).unwrap();
            assert_eq!((e.gradability, e.dr, e.dme), (t.gradability, t.dr, t.dme), "{id}");
        }
        let stamps: Vec<_> = log.events.iter().map(|e| e.timestamp).collect();
        assert!(stamps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn dr_vector_cascade_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let t = rng.random_range(0..5);
            let v = dr_vector(t, &mut rng);
            for l in 1..5 {
                let tail: f64 = v[l..].iter().sum();
                if l <= t {
                    assert!(tail >= 0.65 - 1e-9);
                } else {
                    assert!(tail < 0.4);
                }
            }
        }
    }
}
