//! HTTP service for the grading workflow: independent grading, the
//! disagreement queue, adjudication rounds and read-only report views.
//!
//! Every accepted grade is appended to the dataset's grade log and synced
//! to disk before the request is acknowledged. The log uses the same
//! format the command-line tools read, so a dataset directory can be
//! analysed offline at any time.

pub mod auth;
pub mod store;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, PoisonError, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use retgrade_core::analysis::{compare_references, grader_agreement_summary, AgreementMode};
use retgrade_core::io::encode_grade;
use retgrade_core::metrics::format_decimal;
use retgrade_core::model::{GradeEvent, GraderIdentity, ReferenceStandard, SeverityGrade};
use retgrade_core::refstd::{
    build_reference, disagreement_queue, reference_from_states, AdjudicationError, AdjudicationState,
    BuildMethod, Dataset, MajorityPolicy, Phase, RecordedGrade, TieRule,
};
use retgrade_core::report::{self, ReportBundle, KAPPA_DECIMALS};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use auth::{Authenticator, Principal, StaticTokens, TokenEntry};
pub use store::{Accepted, DatasetMeta, DatasetStore, ImageInfo, StoreError, Submission, View};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// A state snapshot is written after every this many events.
    pub snapshot_every: u64,
    /// Lets admin tokens enter adjudication endorsements for panel graders.
    pub allow_facilitator_endorsements: bool,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            snapshot_every: 100,
            allow_facilitator_endorsements: false,
        }
    }
}

pub struct Service {
    config: ServiceConfig,
    auth: Box<dyn Authenticator>,
    datasets: RwLock<BTreeMap<String, Arc<DatasetStore>>>,
    creating: Mutex<()>,
}

impl Service {
    /// Opens the data directory and recovers every dataset found in it.
    pub fn open(config: ServiceConfig, auth: Box<dyn Authenticator>) -> Result<Self, StoreError> {
        let root = &config.data_dir;
        fs::create_dir_all(root).map_err(|source| StoreError::Storage {
            path: root.clone(),
            source,
        })?;
        let mut datasets = BTreeMap::new();
        let entries = fs::read_dir(root).map_err(|source| StoreError::Storage {
            path: root.clone(),
            source,
        })?;
        for entry in entries {
            let dir = entry
                .map_err(|source| StoreError::Storage {
                    path: root.clone(),
                    source,
                })?
                .path();
            if dir.join(store::META_FILE).is_file() {
                let ds = DatasetStore::open(&dir, config.snapshot_every)?;
                datasets.insert(ds.meta().dataset_id.clone(), Arc::new(ds));
            }
        }
        Ok(Self {
            config,
            auth,
            datasets: RwLock::new(datasets),
            creating: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn dataset(&self, id: &str) -> Result<Arc<DatasetStore>, StoreError> {
        self.datasets
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownDataset(id.to_string()))
    }

    pub fn create_dataset(&self, meta: DatasetMeta) -> Result<Arc<DatasetStore>, StoreError> {
        meta.validate()?;
        let _guard = self.creating.lock().unwrap_or_else(PoisonError::into_inner);
        if self.dataset(&meta.dataset_id).is_ok() {
            return Err(StoreError::DatasetExists(meta.dataset_id));
        }
        let dir = self.config.data_dir.join(&meta.dataset_id);
        let id = meta.dataset_id.clone();
        let ds = Arc::new(DatasetStore::create(&dir, meta, self.config.snapshot_every)?);
        self.datasets
            .write()
            .unwrap_or_else(PoisonError::into_inner)
            .insert(id, Arc::clone(&ds));
        Ok(ds)
    }

    fn principal(&self, headers: &HeaderMap) -> Result<Principal, ApiError> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or_else(|| ApiError::unauthorized("missing bearer token"))?;
        self.auth
            .authenticate(token, Utc::now())
            .ok_or_else(|| ApiError::unauthorized("invalid or expired token"))
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/datasets", post(create_dataset))
        .route("/v1/datasets/{id}/grades", post(submit_grade))
        .route("/v1/datasets/{id}/assignments", get(assignments))
        .route("/v1/datasets/{id}/disagreements", get(disagreements))
        .route("/v1/datasets/{id}/reference", get(reference))
        .route("/v1/datasets/{id}/reports/{kind}", get(reports))
        .with_state(service)
}

/// Serves until Ctrl-C.
pub async fn serve(service: Arc<Service>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

// ---- errors ----

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl ToString) -> Self {
        Self {
            status,
            code,
            message: message.to_string(),
            detail: None,
        }
    }

    fn unauthorized(message: impl ToString) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", message)
    }

    fn validation(message: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        use StatusCode as S;
        match &e {
            StoreError::UnknownDataset(_) => Self::new(S::NOT_FOUND, "unknown_dataset", e),
            StoreError::DatasetExists(_) => Self::new(S::CONFLICT, "dataset_exists", e),
            StoreError::UnknownImage(_) => Self::new(S::UNPROCESSABLE_ENTITY, "unknown_image", e),
            StoreError::BadDefinition(_) | StoreError::Invalid(_) => Self::validation(e),
            StoreError::Workflow(w) => {
                let (status, code, current) = match w {
                    AdjudicationError::StaleRound { current, .. } => (S::CONFLICT, "stale_round", Some(*current)),
                    AdjudicationError::RoundNotOpen { current, .. } => (S::CONFLICT, "round_not_open", Some(*current)),
                    AdjudicationError::DuplicateSubmission { .. } => (S::CONFLICT, "duplicate_submission", None),
                    AdjudicationError::EventAfterConsensus => (S::CONFLICT, "event_after_consensus", None),
                    AdjudicationError::UnknownGrader(_) => (S::UNAUTHORIZED, "unauthorized", None),
                    AdjudicationError::ImageMismatch { .. } => (S::INTERNAL_SERVER_ERROR, "internal", None),
                };
                let mut err = Self::new(status, code, w);
                err.detail = current.map(|c| json!({ "current_round": c }));
                err
            }
            StoreError::Storage { .. } | StoreError::Corrupt { .. } => {
                Self::new(S::INTERNAL_SERVER_ERROR, "storage", e)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some(Value::Object(extra)) = self.detail {
            body.as_object_mut().expect("object literal").extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        if e.is_data() {
            ApiError::validation(e)
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e)
        }
    })
}

fn query_error(e: impl ToString) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, StoreError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))?
        .map_err(ApiError::from)
}

// ---- wire views ----

#[derive(Debug, Clone, Serialize)]
struct GradeView {
    grader: GraderIdentity,
    round: u32,
    gradability: retgrade_core::model::Gradability,
    dr: Option<SeverityGrade>,
    dme: Option<retgrade_core::model::DmeStatus>,
    note: Option<String>,
}

fn grade_view(state: &AdjudicationState, grader_id: &str, g: &RecordedGrade) -> GradeView {
    let grader = state
        .required_graders
        .iter()
        .find(|x| x.id == grader_id)
        .cloned()
        .expect("recorded grades come from panel graders");
    GradeView {
        grader,
        round: g.round,
        gradability: g.assessment.gradability,
        dr: g.assessment.dr,
        dme: g.assessment.dme,
        note: g.note.clone(),
    }
}

/// Every recorded grade of an image: round 0 first, then the latest
/// endorsement of each grader.
fn all_grades(state: &AdjudicationState) -> (Vec<GradeView>, Vec<GradeView>) {
    let independent = state
        .independent
        .iter()
        .map(|(id, g)| grade_view(state, id, g))
        .collect();
    let endorsements = state
        .endorsements
        .iter()
        .map(|(id, g)| grade_view(state, id, g))
        .collect();
    (independent, endorsements)
}

fn awaiting(state: &AdjudicationState) -> Vec<&str> {
    state
        .required_graders
        .iter()
        .filter(|g| state.awaiting(&g.id))
        .map(|g| g.id.as_str())
        .collect()
}

fn event_json(event: &GradeEvent) -> Value {
    serde_json::from_str(&encode_grade(event)).expect("encoded grade is JSON")
}

fn version_tag(version: u64) -> String {
    format!("\"v{version}\"")
}

/// JSON response tagged with the log version; a matching `If-None-Match`
/// gets an empty 304.
fn tagged(version: u64, headers: &HeaderMap, body: Value) -> Response {
    let tag = version_tag(version);
    let etag = HeaderValue::from_str(&tag).expect("ascii tag");
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == tag || t.trim() == "*"));
    if matches {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag)]).into_response();
    }
    (StatusCode::OK, [(header::ETAG, etag)], Json(body)).into_response()
}

fn phase_counts(view: &View) -> BTreeMap<Phase, usize> {
    let mut counts = BTreeMap::new();
    for s in view.states.values() {
        *counts.entry(s.phase).or_insert(0) += 1;
    }
    counts
}

fn phase_counts_json(view: &View) -> Value {
    let mut m = serde_json::Map::new();
    for (phase, n) in phase_counts(view) {
        m.insert(serde_json::to_value(phase).expect("phase").as_str().expect("str").to_string(), n.into());
    }
    Value::Object(m)
}

/// What a read-only view needs before it can be computed. Every variant
/// implies round 0 is complete everywhere, so no view can reveal a grade to
/// a panel member who has not yet graded that image independently.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Needs {
    RoundZero,
    Consensus,
}

fn not_ready(view: &View, needs: Needs) -> Option<Value> {
    let pending = view
        .states
        .values()
        .filter(|s| match needs {
            Needs::RoundZero => s.phase == Phase::CollectingIndependent,
            Needs::Consensus => !s.phase.is_resolved(),
        })
        .count();
    (pending > 0).then(|| {
        json!({
            "status": "not_ready",
            "version": view.version,
            "pending_images": pending,
            "phases": phase_counts_json(view),
        })
    })
}

fn majority_reference(
    ds: &DatasetStore,
    view: &View,
    tie_rule: TieRule,
) -> Result<ReferenceStandard, ApiError> {
    let meta = ds.meta();
    let dataset = Dataset {
        id: meta.dataset_id.clone(),
        images: meta.images.iter().map(|i| i.image_id.clone()).collect(),
        events: view.events.clone(),
    };
    let policy = MajorityPolicy {
        tie_rule,
        min_graders: meta.graders.len(),
    };
    build_reference(&dataset, &meta.graders, BuildMethod::Majority(policy))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))
}

fn adjudicated_reference(view: &View) -> Result<ReferenceStandard, ApiError> {
    reference_from_states(view.states.values())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))
}

fn parse_cutoff(raw: Option<&str>) -> Result<SeverityGrade, ApiError> {
    raw.map_or(Ok(SeverityGrade::Moderate), |s| s.parse().map_err(query_error))
}

// ---- handlers ----

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_dataset(State(svc): State<Arc<Service>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let principal = svc.principal(&headers)?;
    if !principal.admin {
        return Err(ApiError::unauthorized("creating datasets needs an admin token"));
    }
    let meta: DatasetMeta = parse_body(&body)?;
    let svc2 = Arc::clone(&svc);
    let ds = blocking(move || svc2.create_dataset(meta)).await?;
    let meta = ds.meta();
    Ok(Json(json!({
        "dataset_id": meta.dataset_id,
        "images": meta.images.len(),
        "graders": meta.graders,
        "version": 0,
    }))
    .into_response())
}

#[derive(Debug, Deserialize)]
struct GradeRequest {
    #[serde(flatten)]
    submission: Submission,
    /// Grader an admin facilitator is entering an endorsement for.
    #[serde(default)]
    grader_id: Option<String>,
}

async fn submit_grade(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let principal = svc.principal(&headers)?;
    let ds = svc.dataset(&id)?;
    let req: GradeRequest = parse_body(&body)?;
    let panel = &ds.meta().graders;
    let own = principal.grader.as_ref().filter(|g| panel.contains(g));
    let grader = match (&req.grader_id, own) {
        (Some(target), Some(g)) if *target == g.id => g.clone(),
        (None, Some(g)) => g.clone(),
        (Some(target), _) => {
            if !(principal.admin && svc.config.allow_facilitator_endorsements) {
                return Err(ApiError::unauthorized("submitting for another grader is not allowed"));
            }
            if req.submission.round == 0 {
                return Err(ApiError::unauthorized("independent grades must come from the grader"));
            }
            panel
                .iter()
                .find(|g| g.id == *target)
                .cloned()
                .ok_or_else(|| ApiError::validation(format!("grader {target} is not on the panel")))?
        }
        (None, None) => return Err(ApiError::unauthorized("token is not bound to a panel grader")),
    };
    let ds2 = Arc::clone(&ds);
    let accepted = blocking(move || ds2.submit(&grader, req.submission, Utc::now())).await?;
    Ok(Json(json!({
        "event": event_json(&accepted.event),
        "phase": accepted.state.phase,
        "current_round": accepted.state.current_round,
        "consensus": accepted.state.consensus,
        "version": accepted.version,
    }))
    .into_response())
}

#[derive(Debug, Deserialize)]
struct AssignmentQuery {
    grader: Option<String>,
    limit: Option<usize>,
}

async fn assignments(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<AssignmentQuery>,
    headers: HeaderMap,
) -> ApiResult {
    let principal = svc.principal(&headers)?;
    let ds = svc.dataset(&id)?;
    let meta = ds.meta();
    let target = q
        .grader
        .clone()
        .or_else(|| principal.grader.as_ref().map(|g| g.id.clone()))
        .ok_or_else(|| ApiError::unauthorized("no grader given and token is not bound to one"))?;
    let is_self = principal.grader.as_ref().is_some_and(|g| g.id == target);
    if !is_self && !principal.admin {
        return Err(ApiError::unauthorized("assignments of another grader"));
    }
    if !meta.graders.iter().any(|g| g.id == target) {
        return Err(ApiError::unauthorized(format!("grader {target} is not on the panel")));
    }

    let view = ds.view();
    let limit = q.limit.unwrap_or(usize::MAX);
    let mut items = Vec::new();
    for info in &meta.images {
        let s = &view.states[&info.image_id];
        if s.phase == Phase::CollectingIndependent && s.awaiting(&target) {
            items.push(json!({
                "image_id": s.image_id,
                "image_uri": info.uri,
                "phase": s.phase,
                "round": 0,
                "peer_grades": Value::Null,
                "notes": [],
            }));
        }
    }
    for image_id in disagreement_queue(view.states.values()) {
        let s = &view.states[&image_id];
        if !s.awaiting(&target) {
            continue;
        }
        let (independent, endorsements) = all_grades(s);
        let mut notes: Vec<(chrono::DateTime<Utc>, String)> = s
            .independent
            .values()
            .chain(s.endorsements.values())
            .filter_map(|g| g.note.clone().map(|n| (g.timestamp, n)))
            .collect();
        notes.sort();
        items.push(json!({
            "image_id": s.image_id,
            "image_uri": meta.uri(&s.image_id),
            "phase": s.phase,
            "round": s.current_round,
            "peer_grades": independent.into_iter().chain(endorsements).collect::<Vec<_>>(),
            "notes": notes.into_iter().map(|(_, n)| n).collect::<Vec<_>>(),
        }));
    }
    items.truncate(limit);
    Ok(Json(json!({ "version": view.version, "grader": target, "items": items })).into_response())
}

async fn disagreements(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult {
    svc.principal(&headers)?;
    let ds = svc.dataset(&id)?;
    let view = ds.view();
    let items: Vec<Value> = disagreement_queue(view.states.values())
        .into_iter()
        .map(|image_id| {
            let s = &view.states[&image_id];
            let (independent, endorsements) = all_grades(s);
            json!({
                "image_id": image_id,
                "phase": s.phase,
                "round": s.current_round,
                "independent": independent,
                "endorsements": endorsements,
                "awaiting": awaiting(s),
            })
        })
        .collect();
    Ok(tagged(view.version, &headers, json!({ "version": view.version, "items": items })))
}

#[derive(Debug, Deserialize)]
struct ReferenceQuery {
    method: Option<String>,
    tie_rule: Option<TieRule>,
}

async fn reference(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<ReferenceQuery>,
    headers: HeaderMap,
) -> ApiResult {
    svc.principal(&headers)?;
    let ds = svc.dataset(&id)?;
    let view = ds.view();
    let method = q.method.as_deref().unwrap_or("adjudicated");
    let needs = match method {
        "adjudicated" => Needs::Consensus,
        "majority" => Needs::RoundZero,
        other => return Err(query_error(format!("unknown method {other:?}; use majority or adjudicated"))),
    };
    if let Some(body) = not_ready(&view, needs) {
        return Ok(tagged(view.version, &headers, body));
    }
    let reference = match needs {
        Needs::Consensus => adjudicated_reference(&view)?,
        Needs::RoundZero => majority_reference(&ds, &view, q.tie_rule.unwrap_or_default())?,
    };
    Ok(tagged(
        view.version,
        &headers,
        json!({ "status": "ready", "version": view.version, "method": method, "reference": reference }),
    ))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    cutoff: Option<String>,
    mode: Option<AgreementMode>,
    tie_rule: Option<TieRule>,
}

async fn reports(
    State(svc): State<Arc<Service>>,
    Path((id, kind)): Path<(String, String)>,
    Query(q): Query<ReportQuery>,
    headers: HeaderMap,
) -> ApiResult {
    svc.principal(&headers)?;
    let ds = svc.dataset(&id)?;
    let view = ds.view();
    let cutoff = parse_cutoff(q.cutoff.as_deref())?;
    if kind == "progress" {
        let body = json!({
            "status": "ready",
            "version": view.version,
            "images": view.states.len(),
            "phases": phase_counts_json(&view),
        });
        return Ok(tagged(view.version, &headers, body));
    }
    if !matches!(kind.as_str(), "kappa" | "comparison" | "agreement") {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_report",
            format!("unknown report kind {kind:?}; use progress, kappa, comparison or agreement"),
        ));
    }
    if let Some(body) = not_ready(&view, Needs::Consensus) {
        return Ok(tagged(view.version, &headers, body));
    }
    let adjudicated = adjudicated_reference(&view)?;
    let body = if kind == "agreement" {
        let summary = grader_agreement_summary(&view.events, &adjudicated, cutoff, q.mode.unwrap_or_default())
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))?;
        let bundle = ReportBundle {
            tables: vec![report::agreement_table(
                "grader_agreement",
                "Agreement of independent grades with the adjudicated consensus",
                &summary,
            )],
            series: Vec::new(),
        };
        json!({
            "status": "ready",
            "version": view.version,
            "summary": summary,
            "bundle": bundle_json(&bundle),
        })
    } else {
        let majority = majority_reference(&ds, &view, q.tie_rule.unwrap_or_default())?;
        let c = compare_references(&adjudicated, &majority)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))?;
        if kind == "kappa" {
            let dr = c.dr.as_ref();
            let kappa = dr.and_then(|d| d.kappa);
            json!({
                "status": "ready",
                "version": view.version,
                "reference_method": c.reference_method,
                "test_method": c.test_method,
                "kappa": kappa,
                "kappa_display": kappa.map(|k| format_decimal(k, KAPPA_DECIMALS)),
                "images": dr.map(|d| d.confusion.compared),
                "matrix": dr.map(|d| &d.confusion.matrix),
            })
        } else {
            let bundle = report::comparison_report(
                "majority_vs_adjudicated",
                "Adjudicated consensus",
                "Majority decision",
                &c,
                cutoff,
            );
            json!({ "status": "ready", "version": view.version, "bundle": bundle_json(&bundle) })
        }
    };
    Ok(tagged(view.version, &headers, body))
}

fn bundle_json(bundle: &ReportBundle) -> Value {
    serde_json::from_str(&report::render_json(bundle)).expect("rendered report is JSON")
}
