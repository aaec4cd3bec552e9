//! Durable per-dataset state: an append-only grade log, periodic state
//! snapshots, and the in-memory view published to readers.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, PoisonError, RwLock};

use chrono::{DateTime, Utc};
use retgrade_core::io::{self as rio, IngestOptions};
use retgrade_core::model::{
    DmeStatus, GradeEvent, Gradability, GraderIdentity, ModelError, RawGradeEvent,
};
use retgrade_core::refstd::{AdjudicationError, AdjudicationState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const META_FILE: &str = "dataset.json";
pub const LOG_FILE: &str = "grades.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("dataset {0} already exists")]
    DatasetExists(String),
    #[error("image {0} is not part of this dataset")]
    UnknownImage(String),
    #[error("invalid dataset definition: {0}")]
    BadDefinition(String),
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error(transparent)]
    Workflow(#[from] AdjudicationError),
    #[error("storage failure at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot recover {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn storage(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Storage {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    #[serde(default)]
    pub uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dataset_id: String,
    pub images: Vec<ImageInfo>,
    /// Panel whose grades every image needs.
    pub graders: Vec<GraderIdentity>,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::BadDefinition(m));
        let id = &self.dataset_id;
        if id.is_empty()
            || !id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || id.starts_with('.')
        {
            return bad(format!("dataset id {id:?} must be non-empty ASCII letters, digits, '-', '_' or '.'"));
        }
        if self.images.is_empty() {
            return bad("dataset has no images".into());
        }
        if self.graders.is_empty() {
            return bad("dataset has no graders".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for i in &self.images {
            if !seen.insert(i.image_id.as_str()) {
                return bad(format!("image {} listed twice", i.image_id));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.graders {
            if !seen.insert(g.id.as_str()) {
                return bad(format!("grader {} listed twice", g.id));
            }
        }
        Ok(())
    }

    pub fn uri(&self, image_id: &str) -> Option<&str> {
        self.images
            .iter()
            .find(|i| i.image_id == image_id)
            .and_then(|i| i.uri.as_deref())
    }
}

/// Immutable view of a dataset after `version` events.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub version: u64,
    pub states: BTreeMap<String, AdjudicationState>,
    /// Accepted events in log order.
    pub events: Vec<GradeEvent>,
}

impl View {
    fn empty(meta: &DatasetMeta) -> Self {
        Self {
            version: 0,
            states: meta
                .images
                .iter()
                .map(|i| {
                    (
                        i.image_id.clone(),
                        AdjudicationState::new(i.image_id.clone(), meta.graders.clone()),
                    )
                })
                .collect(),
            events: Vec::new(),
        }
    }

    fn apply(&mut self, event: GradeEvent) -> Result<(), StoreError> {
        let state = self
            .states
            .get_mut(&event.image_id)
            .ok_or_else(|| StoreError::UnknownImage(event.image_id.clone()))?;
        *state = state.advance(&event)?;
        self.events.push(event);
        self.version += 1;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    version: u64,
    states: Vec<AdjudicationState>,
}

/// Grade payload as submitted by a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub image_id: String,
    pub round: u32,
    pub gradability: Gradability,
    #[serde(default)]
    pub dr: Option<i64>,
    #[serde(default)]
    pub dme: Option<DmeStatus>,
    #[serde(default)]
    pub note: Option<String>,
}

impl Submission {
    /// The payload that reproduces `event` when submitted by its grader.
    pub fn from_event(event: &GradeEvent) -> Self {
        Self {
            image_id: event.image_id.clone(),
            round: event.round,
            gradability: event.assessment.gradability,
            dr: event.assessment.dr.map(|g| i64::from(g.level())),
            dme: event.assessment.dme,
            note: event.note.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accepted {
    pub event: GradeEvent,
    pub state: AdjudicationState,
    pub version: u64,
}

struct LogWriter {
    file: File,
    len: u64,
    last_timestamp: Option<DateTime<Utc>>,
}

pub struct DatasetStore {
    meta: DatasetMeta,
    dir: PathBuf,
    snapshot_every: u64,
    writer: Mutex<LogWriter>,
    view: RwLock<Arc<View>>,
}

impl DatasetStore {
    /// Creates the on-disk layout for a new dataset.
    pub fn create(dir: &Path, meta: DatasetMeta, snapshot_every: u64) -> Result<Self, StoreError> {
        meta.validate()?;
        if dir.exists() {
            return Err(StoreError::DatasetExists(meta.dataset_id));
        }
        fs::create_dir_all(dir).map_err(storage(dir))?;
        let meta_path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
        write_durably(&meta_path, text.as_bytes())?;
        let log_path = dir.join(LOG_FILE);
        let header = rio::encode_grades_header(&meta.dataset_id) + "\n";
        write_durably(&log_path, header.as_bytes())?;
        sync_dir(dir)?;
        Self::open(dir, snapshot_every)
    }

    /// Loads a dataset, rebuilding its state from the latest snapshot plus
    /// the log tail. An unterminated final log line was never acknowledged
    /// and is cut off.
    pub fn open(dir: &Path, snapshot_every: u64) -> Result<Self, StoreError> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(storage(&meta_path))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        meta.validate()?;

        let log_path = dir.join(LOG_FILE);
        let len = truncate_partial_line(&log_path)?;
        let events = read_log(&log_path, &meta)?;
        let view = match load_snapshot(dir)? {
            Some(s) if s.version as usize <= events.len() => {
                let mut view = View {
                    version: s.version,
                    states: s.states.into_iter().map(|st| (st.image_id.clone(), st)).collect(),
                    events: events[..s.version as usize].to_vec(),
                };
                apply_all(&mut view, events[s.version as usize..].iter().cloned(), &log_path)?;
                view
            }
            _ => {
                let mut view = View::empty(&meta);
                apply_all(&mut view, events.into_iter(), &log_path)?;
                view
            }
        };

        let file = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(storage(&log_path))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            snapshot_every: snapshot_every.max(1),
            writer: Mutex::new(LogWriter {
                file,
                len,
                last_timestamp: view.events.iter().map(|e| e.timestamp).max(),
            }),
            view: RwLock::new(Arc::new(view)),
            meta,
        })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Current published view. Readers keep the returned snapshot for as
    /// long as they like without holding up writers.
    pub fn view(&self) -> Arc<View> {
        Arc::clone(&self.view.read().unwrap_or_else(PoisonError::into_inner))
    }

    /// Validates, persists and applies one grade. The event is on disk
    /// before this returns `Ok`.
    pub fn submit(
        &self,
        grader: &GraderIdentity,
        submission: Submission,
        now: DateTime<Utc>,
    ) -> Result<Accepted, StoreError> {
        if !self.view().states.contains_key(&submission.image_id) {
            return Err(StoreError::UnknownImage(submission.image_id));
        }
        let mut w = self.writer.lock().unwrap_or_else(PoisonError::into_inner);
        // log order must agree with timestamp order for offline replay
        let timestamp = w.last_timestamp.map_or(now, |t| t.max(now));
        let event = retgrade_core::model::validate_fields(RawGradeEvent {
            image_id: submission.image_id,
            grader: grader.clone(),
            round: submission.round,
            timestamp,
            dr: submission.dr,
            dme: submission.dme,
            gradability: submission.gradability,
            note: submission.note,
        })?;
        let next = self.view().states[&event.image_id].advance(&event)?;

        let line = rio::encode_grade(&event) + "\n";
        let log_path = self.dir.join(LOG_FILE);
        let written = w
            .file
            .write_all(line.as_bytes())
            .and_then(|()| w.file.sync_data());
        if let Err(e) = written {
            // drop whatever part of the line reached the file
            let _ = w.file.set_len(w.len);
            return Err(storage(&log_path)(e));
        }
        w.len += line.len() as u64;
        w.last_timestamp = Some(timestamp);

        let published = {
            let mut guard = self.view.write().unwrap_or_else(PoisonError::into_inner);
            let view = Arc::make_mut(&mut guard);
            view.states.insert(event.image_id.clone(), next.clone());
            view.events.push(event.clone());
            view.version += 1;
            Arc::clone(&guard)
        };
        if published.version % self.snapshot_every == 0 {
            self.write_snapshot(&published)?;
        }
        Ok(Accepted {
            event,
            state: next,
            version: published.version,
        })
    }

    fn write_snapshot(&self, view: &View) -> Result<(), StoreError> {
        let snapshot = Snapshot {
            version: view.version,
            states: view.states.values().cloned().collect(),
        };
        let text = serde_json::to_string(&snapshot).expect("states serialize");
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        write_durably(&tmp, text.as_bytes())?;
        let target = self.dir.join(SNAPSHOT_FILE);
        fs::rename(&tmp, &target).map_err(storage(&target))?;
        sync_dir(&self.dir)
    }
}

/// Rebuilds a dataset's state from its log alone, ignoring any snapshot.
pub fn replay_log(dir: &Path) -> Result<View, StoreError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(storage(&meta_path))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let log_path = dir.join(LOG_FILE);
    let events = read_log(&log_path, &meta)?;
    let mut view = View::empty(&meta);
    apply_all(&mut view, events.into_iter(), &log_path)?;
    Ok(view)
}

fn apply_all(
    view: &mut View,
    events: impl Iterator<Item = GradeEvent>,
    log_path: &Path,
) -> Result<(), StoreError> {
    for event in events {
        let index = view.version;
        view.apply(event).map_err(|e| StoreError::Corrupt {
            path: log_path.to_path_buf(),
            message: format!("event {index}: {e}"),
        })?;
    }
    Ok(())
}

fn read_log(path: &Path, meta: &DatasetMeta) -> Result<Vec<GradeEvent>, StoreError> {
    let log = rio::ingest_grades(path, IngestOptions::default(), None).map_err(|e| {
        if let rio::IoError::Io { source, .. } = e {
            StoreError::Storage {
                path: path.to_path_buf(),
                source,
            }
        } else {
            StoreError::Corrupt {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        }
    })?;
    if log.dataset_id != meta.dataset_id {
        return Err(StoreError::Corrupt {
            path: path.to_path_buf(),
            message: format!("log belongs to dataset {}", log.dataset_id),
        });
    }
    Ok(log.events)
}

fn load_snapshot(dir: &Path) -> Result<Option<Snapshot>, StoreError> {
    let path = dir.join(SNAPSHOT_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| StoreError::Corrupt {
            path,
            message: e.to_string(),
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(storage(&path)(e)),
    }
}

/// Cuts the log back to its last newline and returns the resulting length.
fn truncate_partial_line(path: &Path) -> Result<u64, StoreError> {
    let bytes = fs::read(path).map_err(storage(path))?;
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(storage(path))?;
        f.set_len(keep as u64).map_err(storage(path))?;
        f.sync_all().map_err(storage(path))?;
    }
    Ok(keep as u64)
}

fn write_durably(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut f = File::create(path).map_err(storage(path))?;
    f.write_all(bytes).map_err(storage(path))?;
    f.sync_all().map_err(storage(path))
}

fn sync_dir(dir: &Path) -> Result<(), StoreError> {
    // directory fsync is not supported everywhere; best effort
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}
