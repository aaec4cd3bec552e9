//! Newline-delimited JSON file formats. Every file starts with a header
//! record naming its schema; the remaining lines are one record each.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::{DisagreementReason, ReasonCategory};
use crate::manifest::{ImageRecord, Manifest, PatientRecord};
use crate::model::{
    Assessment, ConfusionMatrix, DmeStatus, GradeEvent, Gradability, GraderIdentity, ModelError,
    PredictionRecord, RawGradeEvent, ReferenceEntry, ReferenceMethod, ReferenceStandard,
    EventValidator, validate_fields,
};
use crate::operating::{CascadePolicy, EnsembleSpec};

pub const GRADES_SCHEMA: &str = "retgrade.grades/1";
pub const MANIFEST_SCHEMA: &str = "retgrade.manifest/1";
pub const PREDICTIONS_SCHEMA: &str = "retgrade.predictions/1";
pub const REFERENCE_SCHEMA: &str = "retgrade.reference/1";
pub const REASONS_SCHEMA: &str = "retgrade.reasons/1";
pub const TABLES_SCHEMA: &str = "retgrade.tables/1";
pub const POLICY_SCHEMA: &str = "retgrade.cascade/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ModelError,
    },
    #[error("schema mismatch: expected {expected:?}, found {found:?}")]
    SchemaMismatch { expected: String, found: String },
    #[error("file is empty; expected a {0:?} header")]
    MissingHeader(String),
}

impl IoError {
    pub fn is_io(&self) -> bool {
        matches!(self, IoError::Io { .. })
    }

    fn parse(line: usize, message: impl ToString) -> Self {
        IoError::Parse {
            line,
            message: message.to_string(),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_to_path(path: &Path, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), IoError> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Header plus numbered record lines of one JSONL file.
struct Lines<H> {
    header: H,
    records: Vec<(usize, String)>,
}

fn read_lines<H: DeserializeOwned>(reader: impl BufRead, schema: &str) -> Result<Lines<H>, IoError> {
    let mut header = None;
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| IoError::parse(line_no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let value: Value = serde_json::from_str(&line).map_err(|e| IoError::parse(line_no, e))?;
            let found = value.get("schema").and_then(Value::as_str).unwrap_or_default();
            if found != schema {
                return Err(IoError::SchemaMismatch {
                    expected: schema.into(),
                    found: found.into(),
                });
            }
            header = Some(serde_json::from_value::<H>(value).map_err(|e| IoError::parse(line_no, e))?);
        } else {
            records.push((line_no, line));
        }
    }
    Ok(Lines {
        header: header.ok_or_else(|| IoError::MissingHeader(schema.into()))?,
        records,
    })
}

fn parse_record<T: DeserializeOwned>(line_no: usize, line: &str) -> Result<T, IoError> {
    serde_json::from_str(line).map_err(|e| IoError::parse(line_no, e))
}

fn write_jsonl<H: Serialize, T: Serialize>(
    w: &mut dyn Write,
    header: &H,
    records: impl IntoIterator<Item = T>,
) -> io::Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *w, &r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

// ---- grade logs ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradesHeader {
    pub schema: String,
    pub dataset_id: String,
}

impl GradesHeader {
    pub fn new(dataset_id: impl Into<String>) -> Self {
        Self {
            schema: GRADES_SCHEMA.into(),
            dataset_id: dataset_id.into(),
        }
    }
}

/// One grade line. Exactly one of `image_id`/`eye_id` identifies the target
/// for eye-level records; fanned-out image events carry both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireGrade {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eye_id: Option<String>,
    grader: GraderIdentity,
    round: u32,
    timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dr: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dme: Option<DmeStatus>,
    gradability: Gradability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

impl From<&GradeEvent> for WireGrade {
    fn from(e: &GradeEvent) -> Self {
        let raw = e.to_raw();
        WireGrade {
            image_id: Some(raw.image_id),
            eye_id: e.eye_id.clone(),
            grader: raw.grader,
            round: raw.round,
            timestamp: raw.timestamp,
            dr: raw.dr,
            dme: raw.dme,
            gradability: raw.gradability,
            note: raw.note,
            extra: e.extra.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Fan eye-level records out to every image of the eye.
    pub replicate_eye_level: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradeLog {
    pub dataset_id: String,
    pub events: Vec<GradeEvent>,
}

/// Serializes one event as a single grade-log line (no trailing newline).
pub fn encode_grade(event: &GradeEvent) -> String {
    serde_json::to_string(&WireGrade::from(event)).expect("grade events always serialize")
}

pub fn encode_grades_header(dataset_id: &str) -> String {
    serde_json::to_string(&GradesHeader::new(dataset_id)).expect("header serializes")
}

/// Parses one grade line into events (several when an eye-level record is
/// replicated). Field validation only; uniqueness is checked by the caller.
pub fn decode_grade(
    line_no: usize,
    line: &str,
    options: IngestOptions,
    manifest: Option<&Manifest>,
) -> Result<Vec<GradeEvent>, IoError> {
    let wire: WireGrade = parse_record(line_no, line)?;
    let targets: Vec<String> = match (&wire.image_id, &wire.eye_id) {
        (Some(image), _) => vec![image.clone()],
        (None, Some(eye)) => {
            if !options.replicate_eye_level {
                return Err(IoError::parse(
                    line_no,
                    format!("eye-level record for {eye} but eye-level replication is disabled"),
                ));
            }
            let images = manifest.map(|m| m.images_of_eye(eye)).unwrap_or_default();
            if images.is_empty() {
                return Err(IoError::parse(line_no, format!("no images linked to eye {eye}")));
            }
            images.into_iter().map(str::to_string).collect()
        }
        (None, None) => return Err(IoError::parse(line_no, "record has neither image_id nor eye_id")),
    };
    targets
        .into_iter()
        .map(|image_id| {
            let raw = RawGradeEvent {
                image_id,
                grader: wire.grader.clone(),
                round: wire.round,
                timestamp: wire.timestamp,
                dr: wire.dr,
                dme: wire.dme,
                gradability: wire.gradability,
                note: wire.note.clone(),
            };
            let mut event = validate_fields(raw).map_err(|source| IoError::Invalid { line: line_no, source })?;
            event.eye_id = wire.eye_id.clone();
            event.extra = wire.extra.clone();
            Ok(event)
        })
        .collect()
}

pub fn read_grades(
    reader: impl BufRead,
    options: IngestOptions,
    manifest: Option<&Manifest>,
) -> Result<GradeLog, IoError> {
    let lines = read_lines::<GradesHeader>(reader, GRADES_SCHEMA)?;
    let mut validator = EventValidator::new();
    let mut events = Vec::with_capacity(lines.records.len());
    for (line_no, line) in &lines.records {
        for event in decode_grade(*line_no, line, options, manifest)? {
            let event = validator
                .admit(event)
                .map_err(|source| IoError::Invalid { line: *line_no, source })?;
            events.push(event);
        }
    }
    Ok(GradeLog {
        dataset_id: lines.header.dataset_id,
        events,
    })
}

pub fn ingest_grades(
    path: &Path,
    options: IngestOptions,
    manifest: Option<&Manifest>,
) -> Result<GradeLog, IoError> {
    read_grades(open(path)?, options, manifest)
}

pub fn write_grades(w: &mut dyn Write, dataset_id: &str, events: &[GradeEvent]) -> io::Result<()> {
    write_jsonl(w, &GradesHeader::new(dataset_id), events.iter().map(WireGrade::from))
}

pub fn save_grades(path: &Path, dataset_id: &str, events: &[GradeEvent]) -> Result<(), IoError> {
    write_to_path(path, |w| write_grades(w, dataset_id, events))
}

// ---- manifest ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    schema: String,
    #[serde(default)]
    dataset_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestRecord {
    Image(ImageRecord),
    Patient(PatientRecord),
}

pub fn read_manifest(reader: impl BufRead) -> Result<Manifest, IoError> {
    let lines = read_lines::<ManifestHeader>(reader, MANIFEST_SCHEMA)?;
    let mut manifest = Manifest::default();
    for (line_no, line) in &lines.records {
        match parse_record(*line_no, line)? {
            ManifestRecord::Image(i) => manifest.add_image(i),
            ManifestRecord::Patient(p) => manifest.add_patient(p),
        }
    }
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest, IoError> {
    read_manifest(open(path)?)
}

/// Patients first, then images, each in id order.
pub fn write_manifest(w: &mut dyn Write, dataset_id: Option<&str>, manifest: &Manifest) -> io::Result<()> {
    let header = ManifestHeader {
        schema: MANIFEST_SCHEMA.into(),
        dataset_id: dataset_id.map(str::to_string),
    };
    let records = manifest
        .patients
        .values()
        .cloned()
        .map(ManifestRecord::Patient)
        .chain(manifest.images.values().cloned().map(ManifestRecord::Image));
    write_jsonl(w, &header, records)
}

pub fn save_manifest(path: &Path, dataset_id: Option<&str>, manifest: &Manifest) -> Result<(), IoError> {
    write_to_path(path, |w| write_manifest(w, dataset_id, manifest))
}

// ---- predictions ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsHeader {
    pub schema: String,
    pub model_id: String,
    /// Input image side length in pixels, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_resolution: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub model_id: String,
    pub input_resolution: Option<u32>,
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WirePrediction {
    image_id: String,
    p_dr: [f64; 5],
    p_dme: f64,
    p_gradable: f64,
}

pub fn read_predictions(reader: impl BufRead) -> Result<PredictionFile, IoError> {
    let lines = read_lines::<PredictionsHeader>(reader, PREDICTIONS_SCHEMA)?;
    let model_id = lines.header.model_id;
    let mut seen = std::collections::BTreeSet::new();
    let mut records = Vec::with_capacity(lines.records.len());
    for (line_no, line) in &lines.records {
        let w: WirePrediction = parse_record(*line_no, line)?;
        let record = PredictionRecord {
            image_id: w.image_id,
            model_id: model_id.clone(),
            p_dr: w.p_dr,
            p_dme: w.p_dme,
            p_gradable: w.p_gradable,
        };
        record
            .validate()
            .map_err(|source| IoError::Invalid { line: *line_no, source })?;
        if !seen.insert(record.image_id.clone()) {
            return Err(IoError::parse(*line_no, format!("duplicate prediction for {}", record.image_id)));
        }
        records.push(record);
    }
    Ok(PredictionFile {
        model_id,
        input_resolution: lines.header.input_resolution,
        records,
    })
}

pub fn load_predictions(path: &Path) -> Result<PredictionFile, IoError> {
    read_predictions(open(path)?)
}

pub fn write_predictions(w: &mut dyn Write, file: &PredictionFile) -> io::Result<()> {
    let header = PredictionsHeader {
        schema: PREDICTIONS_SCHEMA.into(),
        model_id: file.model_id.clone(),
        input_resolution: file.input_resolution,
    };
    write_jsonl(
        w,
        &header,
        file.records.iter().map(|r| WirePrediction {
            image_id: r.image_id.clone(),
            p_dr: r.p_dr,
            p_dme: r.p_dme,
            p_gradable: r.p_gradable,
        }),
    )
}

pub fn save_predictions(path: &Path, file: &PredictionFile) -> Result<(), IoError> {
    write_to_path(path, |w| write_predictions(w, file))
}

// ---- reference standards ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReferenceHeader {
    schema: String,
    method: ReferenceMethod,
}

pub fn read_reference(reader: impl BufRead) -> Result<ReferenceStandard, IoError> {
    let lines = read_lines::<ReferenceHeader>(reader, REFERENCE_SCHEMA)?;
    let mut reference = ReferenceStandard::new(lines.header.method);
    for (line_no, line) in &lines.records {
        let entry: ReferenceEntry = parse_record(*line_no, line)?;
        if entry.is_gradable() && entry.dr.is_none() {
            return Err(IoError::Invalid {
                line: *line_no,
                source: ModelError::MissingAssessment {
                    image_id: entry.image_id,
                    grader_id: "reference".into(),
                },
            });
        }
        reference.insert(entry);
    }
    Ok(reference)
}

pub fn load_reference(path: &Path) -> Result<ReferenceStandard, IoError> {
    read_reference(open(path)?)
}

pub fn write_reference(w: &mut dyn Write, reference: &ReferenceStandard) -> io::Result<()> {
    let header = ReferenceHeader {
        schema: REFERENCE_SCHEMA.into(),
        method: reference.method,
    };
    write_jsonl(w, &header, reference.entries.values())
}

pub fn save_reference(path: &Path, reference: &ReferenceStandard) -> Result<(), IoError> {
    write_to_path(path, |w| write_reference(w, reference))
}

// ---- disagreement reasons ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReasonsHeader {
    schema: String,
    #[serde(default)]
    comparison: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireReason {
    image_id: String,
    category: String,
    signed_step: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

/// Unrecognized categories become `Other`, keeping the original text in the
/// note.
pub fn read_reasons(reader: impl BufRead) -> Result<Vec<DisagreementReason>, IoError> {
    let lines = read_lines::<ReasonsHeader>(reader, REASONS_SCHEMA)?;
    lines
        .records
        .iter()
        .map(|(line_no, line)| {
            let w: WireReason = parse_record(*line_no, line)?;
            if w.signed_step == 0 {
                return Err(IoError::parse(*line_no, "signed_step must be non-zero"));
            }
            let (category, note) = match ReasonCategory::parse(&w.category) {
                Some(c) => (c, w.note),
                None => (
                    ReasonCategory::Other,
                    Some(match w.note {
                        Some(n) => format!("{}: {n}", w.category),
                        None => w.category,
                    }),
                ),
            };
            Ok(DisagreementReason {
                image_id: w.image_id,
                category,
                signed_step: w.signed_step,
                note,
            })
        })
        .collect()
}

pub fn load_reasons(path: &Path) -> Result<Vec<DisagreementReason>, IoError> {
    read_reasons(open(path)?)
}

pub fn write_reasons(w: &mut dyn Write, comparison: Option<&str>, reasons: &[DisagreementReason]) -> io::Result<()> {
    let header = ReasonsHeader {
        schema: REASONS_SCHEMA.into(),
        comparison: comparison.map(str::to_string),
    };
    write_jsonl(
        w,
        &header,
        reasons.iter().map(|r| WireReason {
            image_id: r.image_id.clone(),
            category: serde_json::to_value(r.category)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            signed_step: r.signed_step,
            note: r.note.clone(),
        }),
    )
}

pub fn save_reasons(path: &Path, comparison: Option<&str>, reasons: &[DisagreementReason]) -> Result<(), IoError> {
    write_to_path(path, |w| write_reasons(w, comparison, reasons))
}

// ---- verbatim count tables ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TablesHeader {
    schema: String,
}

/// A published confusion matrix, rows = reference, columns = test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRecord {
    pub id: String,
    pub reference: String,
    pub test: String,
    pub matrix: ConfusionMatrix,
}

pub fn read_tables(reader: impl BufRead) -> Result<Vec<TableRecord>, IoError> {
    let lines = read_lines::<TablesHeader>(reader, TABLES_SCHEMA)?;
    lines
        .records
        .iter()
        .map(|(line_no, line)| parse_record(*line_no, line))
        .collect()
}

pub fn load_tables(path: &Path) -> Result<Vec<TableRecord>, IoError> {
    read_tables(open(path)?)
}

pub fn write_tables(w: &mut dyn Write, tables: &[TableRecord]) -> io::Result<()> {
    write_jsonl(w, &TablesHeader { schema: TABLES_SCHEMA.into() }, tables)
}

// ---- cascade policy ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
    pub policy: CascadePolicy,
}

impl PolicyFile {
    pub fn new(policy: CascadePolicy, ensemble: Option<EnsembleSpec>) -> Self {
        Self {
            schema: POLICY_SCHEMA.into(),
            ensemble,
            policy,
        }
    }
}

pub fn load_policy(path: &Path) -> Result<PolicyFile, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| IoError::parse(e.line(), e))?;
    let found = value.get("schema").and_then(Value::as_str).unwrap_or_default();
    if found != POLICY_SCHEMA {
        return Err(IoError::SchemaMismatch {
            expected: POLICY_SCHEMA.into(),
            found: found.into(),
        });
    }
    serde_json::from_value(value).map_err(|e| IoError::parse(1, e))
}

pub fn save_policy(path: &Path, file: &PolicyFile) -> Result<(), IoError> {
    write_to_path(path, |w| {
        serde_json::to_writer_pretty(&mut *w, file)?;
        w.write_all(b"\n")
    })
}

/// Convenience for tests and generators: an image-level gradable event.
pub fn grade_event(
    image_id: &str,
    grader: &GraderIdentity,
    round: u32,
    timestamp: DateTime<Utc>,
    assessment: Assessment,
) -> GradeEvent {
    GradeEvent {
        image_id: image_id.into(),
        grader: grader.clone(),
        round,
        timestamp,
        assessment,
        note: None,
        eye_id: None,
        extra: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GraderRole, SeverityGrade};
    use chrono::TimeZone;
    use proptest::prelude::*;

    const THREE: &str = r#"{"schema":"retgrade.grades/1","dataset_id":"d"}
{"image_id":"a","grader":{"id":"g1","role":"retina_specialist"},"round":0,"timestamp":"2017-03-01T10:00:00Z","dr":2,"dme":"not_referable","gradability":"fully_gradable"}
{"image_id":"a","grader":{"id":"g2","role":"retina_specialist"},"round":0,"timestamp":"2017-03-01T10:01:00Z","dr":2,"dme":"not_referable","gradability":"fully_gradable","workstation":"ws-4"}

{"image_id":"b","grader":{"id":"g1","role":"retina_specialist"},"round":0,"timestamp":"2017-03-01T10:02:00Z","gradability":"not_fully_gradable"}
"#;

    #[test]
    fn three_line_file() {
        let log = read_grades(THREE.as_bytes(), IngestOptions::default(), None).unwrap();
        assert_eq!(log.dataset_id, "d");
        assert_eq!(log.events.len(), 3);
        assert_eq!(log.events[1].extra["workstation"], Value::from("ws-4"));
        assert_eq!(log.events[2].assessment.dr, None);
    }

    #[test]
    fn unknown_fields_survive_rewrite() {
        let log = read_grades(THREE.as_bytes(), IngestOptions::default(), None).unwrap();
        let mut out = Vec::new();
        write_grades(&mut out, &log.dataset_id, &log.events).unwrap();
        let again = read_grades(out.as_slice(), IngestOptions::default(), None).unwrap();
        assert_eq!(log, again);
        assert!(String::from_utf8(out).unwrap().contains("\"workstation\":\"ws-4\""));
    }

    #[test]
    fn schema_and_parse_errors() {
        let bad_schema = "{\"schema\":\"retgrade.grades/9\",\"dataset_id\":\"d\"}\n";
        assert!(matches!(
            read_grades(bad_schema.as_bytes(), IngestOptions::default(), None),
            Err(IoError::SchemaMismatch { .. })
        ));
        let bad_line = THREE.replace("\"dr\":2,\"dme\":\"not_referable\",\"gradability\":\"fully_gradable\",\"workstation\"", "\"dr\":\"two\",\"workstation\"");
        match read_grades(bad_line.as_bytes(), IngestOptions::default(), None) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad_grade = THREE.replacen("\"dr\":2", "\"dr\":7", 1);
        assert!(matches!(
            read_grades(bad_grade.as_bytes(), IngestOptions::default(), None),
            Err(IoError::Invalid { line: 2, source: ModelError::InvalidGrade(7) })
        ));
        assert!(matches!(
            read_grades("".as_bytes(), IngestOptions::default(), None),
            Err(IoError::MissingHeader(_))
        ));
    }

    #[test]
    fn duplicate_events_rejected_with_line() {
        let dup = format!("{THREE}{}\n", THREE.lines().nth(1).unwrap());
        assert!(matches!(
            read_grades(dup.as_bytes(), IngestOptions::default(), None),
            Err(IoError::Invalid { line: 6, source: ModelError::DuplicateEvent(_) })
        ));
    }

    fn eye_manifest() -> Manifest {
        let mut m = Manifest::default();
        for field in ["primary", "nasal", "temporal"] {
            m.add_image(ImageRecord {
                image_id: format!("e1-{field}"),
                patient_id: "p1".into(),
                eye_id: Some("e1".into()),
                field: Some(field.into()),
                uri: None,
            });
        }
        m
    }

    const EYE: &str = r#"{"schema":"retgrade.grades/1","dataset_id":"train"}
{"eye_id":"e1","grader":{"id":"partner","role":"partner_grading_center"},"round":0,"timestamp":"2015-01-01T00:00:00Z","dr":1,"dme":"not_referable","gradability":"fully_gradable"}
"#;

    #[test]
    fn eye_level_grade_fans_out() {
        let m = eye_manifest();
        let log = read_grades(EYE.as_bytes(), IngestOptions { replicate_eye_level: true }, Some(&m)).unwrap();
        assert_eq!(log.events.len(), 3);
        let ids: Vec<&str> = log.events.iter().map(|e| e.image_id.as_str()).collect();
        assert_eq!(ids, ["e1-nasal", "e1-primary", "e1-temporal"]);
        for e in &log.events {
            assert_eq!(e.eye_id.as_deref(), Some("e1"));
            assert_eq!(e.assessment, log.events[0].assessment);
            assert_eq!(e.timestamp, log.events[0].timestamp);
        }
        assert!(matches!(
            read_grades(EYE.as_bytes(), IngestOptions::default(), Some(&m)),
            Err(IoError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_grades(EYE.as_bytes(), IngestOptions { replicate_eye_level: true }, None),
            Err(IoError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_confidence_reports_line() {
        let text = r#"{"schema":"retgrade.predictions/1","model_id":"m","input_resolution":587}
{"image_id":"a","p_dr":[0.5,0.2,0.1,0.1,0.1],"p_dme":0.1,"p_gradable":0.9}
{"image_id":"b","p_dr":[0.5,0.2,0.1,0.1,1.5],"p_dme":0.1,"p_gradable":0.9}
"#;
        match read_predictions(text.as_bytes()) {
            Err(IoError::Invalid { line, source: ModelError::ConfidenceOutOfRange { .. } }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = text.replace("1.5", "\"high\"");
        assert!(matches!(read_predictions(text.as_bytes()), Err(IoError::Parse { line: 3, .. })));
    }

    #[test]
    fn reasons_unknown_category_kept_as_other() {
        let text = r#"{"schema":"retgrade.reasons/1"}
{"image_id":"a","category":"missed_ma","signed_step":1}
{"image_id":"b","category":"cotton wool spot","signed_step":-1}
"#;
        let r = read_reasons(text.as_bytes()).unwrap();
        assert_eq!(r[0].category, ReasonCategory::MissedMa);
        assert_eq!(r[1].category, ReasonCategory::Other);
        assert_eq!(r[1].note.as_deref(), Some("cotton wool spot"));
    }

    fn arb_event() -> impl Strategy<Value = GradeEvent> {
        (
            "[a-z]{1,6}",
            "[a-z0-9]{1,4}",
            0usize..4,
            0u32..4,
            0i64..2_000_000_000,
            proptest::option::of(0u8..5),
            proptest::option::of(any::<bool>()),
            proptest::option::of("[ -~]{0,12}"),
            proptest::option::of("[a-z]{1,3}"),
            proptest::collection::btree_map("x_[a-z]{1,4}", any::<i32>(), 0..3),
        )
            .prop_map(|(image, grader, role, round, secs, dr, dme, note, eye, extra)| {
                let role = [
                    GraderRole::Ophthalmologist,
                    GraderRole::RetinaSpecialist,
                    GraderRole::PartnerGradingCenter,
                    GraderRole::Model,
                ][role];
                let gradability = if dr.is_some() {
                    Gradability::FullyGradable
                } else {
                    Gradability::NotFullyGradable
                };
                GradeEvent {
                    image_id: image,
                    grader: GraderIdentity::new(grader, role),
                    round,
                    timestamp: Utc.timestamp_opt(secs, 0).unwrap(),
                    assessment: Assessment {
                        gradability,
                        dr: dr.and_then(SeverityGrade::from_level),
                        dme: dme.map(|b| if b { DmeStatus::Referable } else { DmeStatus::NotReferable }),
                    },
                    note,
                    eye_id: eye,
                    extra: extra.into_iter().map(|(k, v)| (k, Value::from(v))).collect(),
                }
            })
    }

    proptest! {
        #[test]
        fn grade_round_trip(events in proptest::collection::vec(arb_event(), 0..20)) {
            let mut validator = EventValidator::new();
            let mut role_of = BTreeMap::new();
            let events: Vec<GradeEvent> = events
                .into_iter()
                .filter(|e| *role_of.entry(e.grader.id.clone()).or_insert(e.grader.role) == e.grader.role)
                .filter(|e| validator.admit(e.clone()).is_ok())
                .collect();
            let mut out = Vec::new();
            write_grades(&mut out, "ds", &events).unwrap();
            let back = read_grades(out.as_slice(), IngestOptions::default(), None).unwrap();
            prop_assert_eq!(back.events, events);
        }

        #[test]
        fn prediction_round_trip(raw in proptest::collection::vec(
            (proptest::array::uniform5(0.0f64..=1.0), 0.0f64..=1.0, 0.0f64..=1.0), 0..20)
        ) {
            let file = PredictionFile {
                model_id: "m".into(),
                input_resolution: Some(779),
                records: raw.into_iter().enumerate().map(|(i, (p_dr, p_dme, p_gradable))| PredictionRecord {
                    image_id: format!("img{i}"),
                    model_id: "m".into(),
                    p_dr,
                    p_dme,
                    p_gradable,
                }).collect(),
            };
            let mut out = Vec::new();
            write_predictions(&mut out, &file).unwrap();
            prop_assert_eq!(read_predictions(out.as_slice()).unwrap(), file);
        }
    }

    #[test]
    fn manifest_and_reference_round_trip() {
        let m = eye_manifest();
        let mut out = Vec::new();
        write_manifest(&mut out, Some("d"), &m).unwrap();
        assert_eq!(read_manifest(out.as_slice()).unwrap(), m);

        let mut r = ReferenceStandard::new(ReferenceMethod::AdjudicatedConsensus);
        r.insert(ReferenceEntry::from_assessment(
            "a",
            Assessment::gradable(SeverityGrade::Severe, DmeStatus::Referable),
            vec![GraderIdentity::new("g1", GraderRole::RetinaSpecialist)],
        ));
        r.insert(ReferenceEntry::from_assessment("b", Assessment::ungradable(), vec![]));
        let mut out = Vec::new();
        write_reference(&mut out, &r).unwrap();
        assert_eq!(read_reference(out.as_slice()).unwrap(), r);
    }
}
