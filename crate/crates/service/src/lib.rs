//! HTTP front end over the campaign event log.
//!
//! Every mutation goes through one [`Campaign`] behind a mutex, so the log
//! has a single writer. Reads use the last published state snapshot.

mod config;
mod views;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use evalkit::protocol::{
    sample_qa_queue, Authorization, Campaign, CampaignState, EventLog, ProtocolError, Role, SessionPlan, SlotUpdate,
};
use evalkit::report::{analyze_cell, AnalysisSettings, CellAnalysis, ReportError, Specs};
use evalkit::rollout::{PolicyRef, RolloutRecord, RolloutStore, SCHEMA_VERSION};
use evalkit::scoring::{lint_success_consistency, qa_discrepancy, score_rubric, QaReview, ScoringError};
use evalkit::synthlab::derive_seed;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Mutex;

pub use config::{Authenticator, ServiceConfig, StaticTokens, TokenEntry};
pub use views::{
    AbortRequest, ApiSessionView, AssignmentView, CreateSessionRequest, CreatedSession, InitialConditionView,
    PolicyInput, Progress, QaItemView, QaQueueView, QaResult, QaSubmission, RolloutAccepted, RolloutSubmission,
    RubricAccepted, RubricSubmission, SlotState,
};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("eval-service config: {0}")]
    Config(String),
    #[error("eval-service: cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("eval-service: {0}")]
    Serve(std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

/// JSON error body `{ "error": code, "message": text }`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<ProtocolError> for ApiError {
    fn from(e: ProtocolError) -> Self {
        use ProtocolError as P;
        let (status, code) = match &e {
            P::UnknownSession(_) | P::UnknownBundle(_) | P::UnknownSlot { .. } | P::UnknownRollout(_) => {
                (StatusCode::NOT_FOUND, "not_found")
            }
            P::Unauthorized | P::SelfReview(_) => (StatusCode::FORBIDDEN, "forbidden"),
            P::SessionExhausted
            | P::BundleInProgress(_)
            | P::OutOfOrder { .. }
            | P::IllegalTransition { .. }
            | P::DuplicateSession(_)
            | P::SessionIncomplete(_) => (StatusCode::CONFLICT, "conflict"),
            P::Io { .. } | P::CorruptLog { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            P::Rollout(evalkit::rollout::RolloutError::DuplicateRolloutId(_)) => (StatusCode::CONFLICT, "conflict"),
            P::Scoring(s) => return s.clone().into(),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ScoringError> for ApiError {
    fn from(e: ScoringError) -> Self {
        match e {
            ScoringError::SelfReview { .. } => ApiError::forbidden(e.to_string()),
            ScoringError::DanglingRollout(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            _ => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()),
        }
    }
}

impl From<ReportError> for ApiError {
    fn from(e: ReportError) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string())
    }
}

pub struct AppState {
    writer: Mutex<Campaign>,
    snapshot: RwLock<Arc<CampaignState>>,
    auth: Arc<dyn Authenticator>,
    specs: Specs,
    settings: AnalysisSettings,
    overlay_base_url: String,
    seed: u64,
}

impl AppState {
    /// Opens (or creates) the event log and replays it.
    pub fn open(cfg: &ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        let log = EventLog::open(cfg.resolve(&cfg.event_log))?;
        let specs = Specs::load(
            cfg.rubrics.as_ref().map(|p| cfg.resolve(p)).as_deref(),
            cfg.predicates.as_ref().map(|p| cfg.resolve(p)).as_deref(),
        )?;
        Self::with_parts(cfg, Campaign::new(log)?, specs, Arc::new(StaticTokens::new(&cfg.tokens)))
    }

    pub fn with_parts(
        cfg: &ServiceConfig,
        campaign: Campaign,
        specs: Specs,
        auth: Arc<dyn Authenticator>,
    ) -> Result<Arc<Self>, ServiceError> {
        cfg.check()?;
        let snapshot = RwLock::new(Arc::new(campaign.state().clone()));
        Ok(Arc::new(AppState {
            writer: Mutex::new(campaign),
            snapshot,
            auth,
            specs,
            settings: cfg.settings(),
            overlay_base_url: cfg.overlay_base_url.clone(),
            seed: cfg.seed,
        }))
    }

    /// Current immutable state.
    pub fn snapshot(&self) -> Arc<CampaignState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn publish(&self, campaign: &Campaign) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(campaign.state().clone());
    }

    fn questions(&self, task: &str) -> Vec<String> {
        self.specs
            .rubrics
            .get(task)
            .map(|r| r.questions().cloned().collect())
            .unwrap_or_default()
    }
}

/// Authenticated caller, from `Authorization: Bearer <token>`.
pub struct Caller(pub Authorization);

impl Caller {
    fn require(&self, roles: &[Role]) -> Result<(), ApiError> {
        if roles.contains(&self.0.role) {
            Ok(())
        } else {
            Err(ApiError::forbidden(format!("role {:?} may not call this endpoint", self.0.role)))
        }
    }
}

impl FromRequestParts<Arc<AppState>> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, Self::Rejection> {
        let unauthorized = |m: &str| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", m);
        let value = parts
            .headers
            .get(header::AUTHORIZATION)
            .ok_or_else(|| unauthorized("missing bearer token"))?
            .to_str()
            .map_err(|_| unauthorized("malformed authorization header"))?;
        let token = value
            .strip_prefix("Bearer ")
            .ok_or_else(|| unauthorized("expected a bearer token"))?;
        state
            .auth
            .authenticate(token.trim())
            .map(Caller)
            .ok_or_else(|| unauthorized("unknown token"))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_assignment))
        .route("/sessions/{id}/abort", post(abort_slot))
        .route("/sessions/{id}/unblind", post(unblind))
        .route("/rollouts", post(submit_rollout))
        .route("/rollouts/{id}/rubric", post(submit_rubric))
        .route("/qa/queue", get(qa_queue))
        .route("/qa/{rollout_id}", post(submit_review))
        .route("/reports/{task}/{condition}", get(cell_report))
        .with_state(state)
}

/// Binds `cfg.bind` and serves until the process ends.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::open(&cfg)?;
    let listener = tokio::net::TcpListener::bind(cfg.bind).await.map_err(|source| ServiceError::Bind {
        addr: cfg.bind.to_string(),
        source,
    })?;
    tracing::info!(addr = %cfg.bind, "eval-service listening");
    axum::serve(listener, router(state)).await.map_err(ServiceError::Serve)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Json(req): Json<CreateSessionRequest>,
) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    caller.require(&[Role::Analyst])?;
    let mut campaign = state.writer.lock().await;
    let rng_seed = req
        .rng_seed
        .unwrap_or_else(|| derive_seed(state.seed, 0x5E55, campaign.state().sessions.len() as u64));
    let plan = SessionPlan {
        policies: req.policies.into_iter().map(|p| (p.policy_id, p.display_name)).collect(),
        tasks: req.tasks,
        condition: req.condition,
        n_bundles: req.n_bundles,
        rng_seed,
        initial_conditions: req.initial_conditions,
        evaluator_ids: req.evaluator_ids,
        qa_reviewer_ids: req.qa_reviewer_ids,
    };
    let session = campaign.create_session(&plan)?.clone();
    state.publish(&campaign);
    let current = session
        .next_assignment()
        .ok()
        .map(|a| views::assignment_view(&a, &state.overlay_base_url, state.questions(&a.ic.task_id)));
    Ok((
        StatusCode::CREATED,
        Json(CreatedSession {
            session_id: session.session_id.clone(),
            session: views::session_view(&session, current),
        }),
    ))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    _caller: Caller,
    Path(id): Path<String>,
) -> Result<Json<ApiSessionView>, ApiError> {
    let snap = state.snapshot();
    let session = snap.sessions.get(&id).ok_or(ProtocolError::UnknownSession(id))?;
    let current = session
        .next_assignment()
        .ok()
        .map(|a| views::assignment_view(&a, &state.overlay_base_url, state.questions(&a.ic.task_id)));
    Ok(Json(views::session_view(session, current)))
}

async fn next_assignment(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path(id): Path<String>,
) -> Result<Json<AssignmentView>, ApiError> {
    caller.require(&[Role::Evaluator, Role::Analyst])?;
    let snap = state.snapshot();
    let session = snap.sessions.get(&id).ok_or(ProtocolError::UnknownSession(id))?;
    let a = session.next_assignment()?;
    Ok(Json(views::assignment_view(&a, &state.overlay_base_url, state.questions(&a.ic.task_id))))
}

async fn abort_slot(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path(id): Path<String>,
    Json(req): Json<AbortRequest>,
) -> Result<Json<SlotState>, ApiError> {
    caller.require(&[Role::Evaluator])?;
    let mut campaign = state.writer.lock().await;
    let status = campaign.record_slot(&id, &req.bundle_id, req.slot, None, SlotUpdate::Aborted, Some(&caller.0.actor_id))?;
    state.publish(&campaign);
    Ok(Json(SlotState {
        bundle_id: req.bundle_id,
        slot: req.slot,
        status,
    }))
}

#[derive(Debug, Deserialize)]
struct UnblindQuery {
    #[serde(default)]
    force: bool,
}

async fn unblind(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path(id): Path<String>,
    Query(q): Query<UnblindQuery>,
) -> Result<Json<BTreeMap<String, String>>, ApiError> {
    let mut campaign = state.writer.lock().await;
    let mapping = campaign.unblind(&id, &caller.0, q.force)?;
    state.publish(&campaign);
    Ok(Json(mapping))
}

fn check_answers(state: &AppState, task: &str, answers: &[bool]) -> Result<(), ApiError> {
    let spec = state.specs.rubrics.get(task).ok_or_else(|| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", format!("no rubric configured for task {task:?}"))
    })?;
    score_rubric(answers, spec)?;
    Ok(())
}

async fn submit_rollout(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Json(sub): Json<RolloutSubmission>,
) -> Result<(StatusCode, Json<RolloutAccepted>), ApiError> {
    caller.require(&[Role::Evaluator])?;
    let evaluator = caller.0.actor_id.clone();
    let mut campaign = state.writer.lock().await;
    let session = campaign.session(&sub.session_id)?;
    let bundle = session
        .bundle(&sub.bundle_id)
        .ok_or_else(|| ProtocolError::UnknownBundle(sub.bundle_id.clone()))?;
    let slot = bundle.slots.get(sub.slot).ok_or_else(|| ProtocolError::UnknownSlot {
        bundle_id: sub.bundle_id.clone(),
        slot: sub.slot,
    })?;
    if let Some(answers) = &sub.rubric_answers {
        check_answers(&state, &bundle.ic.task_id, answers)?;
    }
    if sub.ended_at < sub.started_at {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", "ended_at precedes started_at"));
    }
    let rollout_id = format!("{}-{}-s{}", sub.session_id, sub.bundle_id, sub.slot);
    let record = RolloutRecord {
        schema_version: SCHEMA_VERSION,
        rollout_id: rollout_id.clone(),
        task: bundle.ic.task_id.clone(),
        policy: slot.blinding_code.clone(),
        condition: session.condition.clone(),
        bundle_id: Some(sub.bundle_id.clone()),
        station: sub.station,
        started_at: sub.started_at,
        ended_at: sub.ended_at,
        success: sub.success,
        rubric_answers: sub.rubric_answers.unwrap_or_default(),
        predicate_traces: None,
        terminal_reason: sub.terminal_reason,
        evaluator_id: Some(evaluator.clone()),
        extra: BTreeMap::new(),
    };
    // reject everything that would fail part-way before writing anything
    session.check_slot_update(&sub.bundle_id, sub.slot, SlotUpdate::Running)?;
    if campaign.state().rollouts.get(&rollout_id).is_some() {
        return Err(ApiError::new(StatusCode::CONFLICT, "conflict", format!("rollout {rollout_id} already recorded")));
    }
    campaign.record_slot(&sub.session_id, &sub.bundle_id, sub.slot, None, SlotUpdate::Running, Some(&evaluator))?;
    campaign.record_rollout(record)?;
    let status = campaign.record_slot(&sub.session_id, &sub.bundle_id, sub.slot, Some(&rollout_id), SlotUpdate::Done, None)?;
    let (done, total) = campaign.session(&sub.session_id)?.progress();
    state.publish(&campaign);
    Ok((
        StatusCode::CREATED,
        Json(RolloutAccepted {
            rollout_id,
            slot_status: status,
            progress: Progress { done, total },
        }),
    ))
}

async fn submit_rubric(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path(id): Path<String>,
    Json(sub): Json<RubricSubmission>,
) -> Result<Json<RubricAccepted>, ApiError> {
    caller.require(&[Role::Evaluator])?;
    let mut campaign = state.writer.lock().await;
    let record = campaign
        .state()
        .rollouts
        .get(&id)
        .cloned()
        .ok_or_else(|| ProtocolError::UnknownRollout(id.clone()))?;
    check_answers(&state, &record.task, &sub.answers)?;
    let spec = &state.specs.rubrics[&record.task];
    let tc = score_rubric(&sub.answers, spec)?;
    campaign.submit_rubric(&id, sub.answers.clone(), &caller.0.actor_id)?;
    state.publish(&campaign);
    let updated = RolloutRecord {
        rubric_answers: sub.answers,
        ..record
    };
    Ok(Json(RubricAccepted {
        rollout_id: id,
        milestones_achieved: tc.numerator(),
        milestones: tc.denominator(),
        task_completion: tc.value(),
        success_lint: lint_success_consistency(&updated, spec).map(|l| {
            format!(
                "recorded success {} but all milestones met is {}",
                l.recorded_success, l.all_milestones
            )
        }),
    }))
}

#[derive(Debug, Deserialize)]
struct QueueQuery {
    fraction: f64,
    #[serde(default)]
    seed: Option<u64>,
}

async fn qa_queue(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Query(q): Query<QueueQuery>,
) -> Result<Json<QaQueueView>, ApiError> {
    caller.require(&[Role::QaReviewer, Role::Analyst])?;
    let seed = q.seed.unwrap_or(state.seed);
    let snap = state.snapshot();
    let queue = sample_qa_queue(&snap.rollouts, q.fraction, seed, &state.specs.rubrics)?;
    let sampled = queue.len();
    let me = caller.0.actor_id.as_str();
    let items: Vec<QaItemView> = queue
        .into_iter()
        .filter(|item| item.original_evaluator.as_deref() != Some(me))
        .map(|item| QaItemView {
            rollout_id: item.rollout_id,
            task: item.task,
            questions: item.questions,
        })
        .collect();
    Ok(Json(QaQueueView {
        fraction: q.fraction,
        seed,
        sampled,
        excluded_own: sampled - items.len(),
        items,
    }))
}

async fn submit_review(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path(rollout_id): Path<String>,
    Json(sub): Json<QaSubmission>,
) -> Result<(StatusCode, Json<QaResult>), ApiError> {
    caller.require(&[Role::QaReviewer])?;
    let mut campaign = state.writer.lock().await;
    let original = campaign
        .state()
        .rollouts
        .get(&rollout_id)
        .cloned()
        .ok_or_else(|| ProtocolError::UnknownRollout(rollout_id.clone()))?;
    check_answers(&state, &original.task, &sub.answers)?;
    if original.rubric_answers.len() != sub.answers.len() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "conflict",
            format!("rollout {rollout_id} has no submitted rubric to review"),
        ));
    }
    campaign.submit_review(QaReview {
        rollout_id: rollout_id.clone(),
        reviewer_id: caller.0.actor_id.clone(),
        reviewed_answers: sub.answers.clone(),
        reviewed_success: sub.success,
    })?;
    state.publish(&campaign);
    let totals = qa_discrepancy(&campaign.state().rollouts, &campaign.state().reviews)?;
    Ok((
        StatusCode::CREATED,
        Json(QaResult {
            mismatched_questions: original
                .rubric_answers
                .iter()
                .zip(&sub.answers)
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, _)| i)
                .collect(),
            success_mismatch: original.success != sub.success,
            original_answers: original.rubric_answers,
            original_success: original.success,
            rollout_id,
            totals,
        }),
    ))
}

/// Rollouts of every session relabelled by policy id, with bundle ids
/// qualified by session so bundles from different sessions never pair.
fn unblinded_store(snap: &CampaignState) -> Result<(RolloutStore, Vec<PolicyRef>), ApiError> {
    let mut codes = BTreeMap::new();
    let mut policies: Vec<PolicyRef> = Vec::new();
    for s in snap.sessions.values() {
        for p in &s.policies {
            codes.insert(p.blinding_code.clone(), (s.session_id.clone(), p.policy_id.clone()));
            if !policies.iter().any(|q| q.policy_id == p.policy_id) {
                policies.push(PolicyRef {
                    policy_id: p.policy_id.clone(),
                    display_name: p.display_name.clone(),
                    blinding_code: p.policy_id.clone(),
                });
            }
        }
    }
    policies.sort_by(|a, b| a.policy_id.cmp(&b.policy_id));
    let records = snap.rollouts.records().filter_map(|r| {
        codes.get(&r.policy).map(|(session, policy)| RolloutRecord {
            policy: policy.clone(),
            bundle_id: r.bundle_id.as_ref().map(|b| format!("{session}/{b}")),
            ..r.clone()
        })
    });
    let store = RolloutStore::from_records(records)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok((store, policies))
}

async fn cell_report(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path((task, condition)): Path<(String, String)>,
) -> Result<Json<CellAnalysis>, ApiError> {
    caller.require(&[Role::Analyst])?;
    let snap = state.snapshot();
    let tag = snap
        .sessions
        .values()
        .map(|s| &s.condition)
        .find(|c| c.label() == condition)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session ran condition {condition:?}")))?;
    if !snap.sessions.values().any(|s| s.tasks.contains(&task)) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session ran task {task:?}")));
    }
    let (store, policies) = unblinded_store(&snap)?;
    let settings = state.settings.clone();
    let specs = Specs {
        rubrics: state.specs.rubrics.clone(),
        predicates: state.specs.predicates.clone(),
    };
    // the analysis is CPU-bound; keep it off the async workers
    let (cell, _) = tokio::task::spawn_blocking(move || analyze_cell(&store, &task, &tag, &policies, &specs, &settings, 0))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(cell))
}

/// Path of the event log for `cfg`.
pub fn event_log_path(cfg: &ServiceConfig) -> PathBuf {
    cfg.resolve(&cfg.event_log)
}
