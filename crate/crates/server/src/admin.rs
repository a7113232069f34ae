//! Administration API under `/admin/api/v1`, guarded by a static bearer
//! token. Every policy change runs as one validated store transaction.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use gate_core::credentials::{constant_time_eq, PasswordHash};
use gate_core::model::{
    AuthMethod, ExclusionId, ExclusionSet, Role, RoleId, StateId, TokenBinding, Transition,
    UpstreamCredentials, User, UserId, Workflow, WorkflowId,
};
use gate_core::page::PageId;
use gate_core::presence::{status, terminate, termination_event};
use gate_core::rule::{RuleError, RuleSpec};
use gate_core::session::{PresenceStatus, Session, SessionId, TerminationReason};
use gate_core::store::audit::IdleGap;
use gate_core::store::{AuditDecision, AuditFilter, AuditRecord, StoreError};
use gate_core::training::{self, Recording, RecordingId, RecordingState, Step, TrainingError};
use gate_core::validate::Violation;
use serde::{Deserialize, Serialize};

use crate::state::{Gateway, LEASE_TIMEOUT};

pub const PREFIX: &str = "/admin/api/v1";

#[derive(Debug, thiserror::Error)]
pub enum AdminError {
    #[error("missing or wrong admin token")]
    Unauthorized,
    #[error("admin API disabled: no admin token configured")]
    Disabled,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    Conflict(String),
    #[error("validation failed")]
    ValidationFailed(Vec<Violation>),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Training(#[from] TrainingError),
    #[error("{0}")]
    Internal(String),
}

impl From<StoreError> for AdminError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(m) => AdminError::NotFound(m),
            StoreError::Conflict(m) => AdminError::Conflict(m),
            StoreError::ValidationFailed(v) => AdminError::ValidationFailed(v),
            StoreError::Rejected(m) => AdminError::BadRequest(m),
            StoreError::Import(e) => AdminError::BadRequest(e.to_string()),
            StoreError::Io(m) => AdminError::Internal(m),
        }
    }
}

impl From<RuleError> for AdminError {
    fn from(e: RuleError) -> Self {
        AdminError::Training(TrainingError::Rule(e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<serde_json::Value>,
}

impl AdminError {
    fn kind(&self) -> String {
        match self {
            AdminError::Unauthorized => "Unauthorized".into(),
            AdminError::Disabled => "Disabled".into(),
            AdminError::NotFound(_) => "NotFound".into(),
            AdminError::Conflict(_) => "Conflict".into(),
            AdminError::ValidationFailed(_) => "ValidationFailed".into(),
            AdminError::BadRequest(_) => "BadRequest".into(),
            AdminError::Internal(_) => "Internal".into(),
            AdminError::Training(t) => match t {
                TrainingError::RecordingAlreadyActive(_) => "RecordingAlreadyActive",
                TrainingError::UnknownRecording(_) => "UnknownRecording",
                TrainingError::RecordingNotActive(_) => "RecordingNotActive",
                TrainingError::RecordingNotStopped(_) => "RecordingNotStopped",
                TrainingError::EmptyRecording(_) => "EmptyRecording",
                TrainingError::UnknownTransition(_) => "UnknownTransition",
                TrainingError::Rule(RuleError::InvalidRegex { .. }) => "InvalidRegex",
                TrainingError::Rule(RuleError::InvalidSetQuery(_)) => "InvalidSetQuery",
                TrainingError::Rule(_) => "InvalidRule",
            }
            .into(),
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            AdminError::Unauthorized => StatusCode::UNAUTHORIZED,
            AdminError::Disabled => StatusCode::SERVICE_UNAVAILABLE,
            AdminError::NotFound(_) => StatusCode::NOT_FOUND,
            AdminError::Conflict(_) => StatusCode::CONFLICT,
            AdminError::ValidationFailed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AdminError::BadRequest(_) => StatusCode::BAD_REQUEST,
            AdminError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            AdminError::Training(t) => match t {
                TrainingError::UnknownRecording(_) | TrainingError::UnknownTransition(_) => {
                    StatusCode::NOT_FOUND
                }
                TrainingError::RecordingAlreadyActive(_) => StatusCode::CONFLICT,
                TrainingError::Rule(_) => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::BAD_REQUEST,
            },
        }
    }
}

impl IntoResponse for AdminError {
    fn into_response(self) -> Response {
        let violations = match &self {
            AdminError::ValidationFailed(v) => v
                .iter()
                .map(|v| serde_json::to_value(v).expect("violations serialize"))
                .collect(),
            _ => Vec::new(),
        };
        let message = match &self {
            AdminError::ValidationFailed(v) => v
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
            other => other.to_string(),
        };
        let body = ErrorBody {
            error: self.kind(),
            message,
            violations,
        };
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, AdminError>;

// ------------------------------------------------------------------ DTOs

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDto {
    pub firmcode: String,
    pub usercode: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamDto {
    pub username: String,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserView {
    pub id: UserId,
    pub federated_name: String,
    pub idp: String,
    pub roles: BTreeSet<RoleId>,
    pub has_token: bool,
    pub upstream_username: Option<String>,
}

impl From<&User> for UserView {
    fn from(u: &User) -> Self {
        UserView {
            id: u.id.clone(),
            federated_name: u.federated_name.clone(),
            idp: u.idp_id.clone(),
            roles: u.role_ids.clone(),
            has_token: u.token_binding.is_some(),
            upstream_username: u.upstream_credentials.as_ref().map(|c| c.username.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserInput {
    pub id: UserId,
    #[serde(default)]
    pub federated_name: Option<String>,
    #[serde(default)]
    pub idp: Option<String>,
    pub password: String,
    #[serde(default)]
    pub roles: BTreeSet<RoleId>,
    #[serde(default)]
    pub token: Option<TokenDto>,
    #[serde(default)]
    pub upstream: Option<UpstreamDto>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UserUpdate {
    #[serde(default)]
    pub federated_name: Option<String>,
    #[serde(default)]
    pub idp: Option<String>,
    #[serde(default)]
    pub password: Option<String>,
    #[serde(default)]
    pub roles: Option<BTreeSet<RoleId>>,
    #[serde(default)]
    pub token: Option<TokenDto>,
    #[serde(default)]
    pub clear_token: bool,
    #[serde(default)]
    pub upstream: Option<UpstreamDto>,
    #[serde(default)]
    pub clear_upstream: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleDto {
    pub id: RoleId,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub workflows: BTreeSet<WorkflowId>,
    #[serde(default)]
    pub auth: BTreeSet<AuthMethod>,
}

impl From<&Role> for RoleDto {
    fn from(r: &Role) -> Self {
        RoleDto {
            id: r.id.clone(),
            name: Some(r.name.clone()),
            workflows: r.workflow_ids.clone(),
            auth: r.required_auth.clone(),
        }
    }
}

impl RoleDto {
    fn into_role(self) -> Role {
        Role {
            name: self.name.unwrap_or_else(|| self.id.to_string()),
            id: self.id,
            workflow_ids: self.workflows,
            required_auth: self.auth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionDto {
    pub id: ExclusionId,
    pub workflows: BTreeSet<WorkflowId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionInput {
    pub id: u32,
    pub from: StateId,
    pub to: StateId,
    pub page: PageId,
    #[serde(default)]
    pub params: BTreeMap<String, RuleSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkflowInput {
    pub id: WorkflowId,
    pub name: String,
    pub states: BTreeSet<StateId>,
    pub start_state: StateId,
    pub start_page: PageId,
    #[serde(default)]
    pub transitions: Vec<TransitionInput>,
    /// Roles that receive the new workflow.
    #[serde(default)]
    pub roles: BTreeSet<RoleId>,
}

impl WorkflowInput {
    fn build(self) -> ApiResult<(Workflow, BTreeSet<RoleId>)> {
        let mut transitions = Vec::with_capacity(self.transitions.len());
        for t in self.transitions {
            let mut params = BTreeMap::new();
            for (name, spec) in t.params {
                params.insert(name, spec.build()?);
            }
            transitions.push(Transition {
                id: t.id,
                from: t.from,
                to: t.to,
                page: t.page,
                params,
            });
        }
        Ok((
            Workflow {
                id: self.id,
                name: self.name,
                states: self.states,
                start_state: self.start_state,
                start_page: self.start_page,
                transitions,
            },
            self.roles,
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingStart {
    pub name: String,
    pub trainer: UserId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingView {
    pub id: RecordingId,
    pub name: String,
    pub trainer: UserId,
    pub state: RecordingState,
    pub started_at: i64,
    pub step_count: usize,
}

impl From<&Recording> for RecordingView {
    fn from(r: &Recording) -> Self {
        RecordingView {
            id: r.id,
            name: r.name.clone(),
            trainer: r.trainer.clone(),
            state: r.state,
            started_at: r.started_at,
            step_count: r.steps.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepView {
    pub index: usize,
    #[serde(flatten)]
    pub step: Step,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromoteRequest {
    pub role: RoleId,
    #[serde(default)]
    pub workflow_id: Option<WorkflowId>,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub id: SessionId,
    pub prefix: String,
    pub user: UserId,
    pub methods: BTreeSet<AuthMethod>,
    pub created_at: i64,
    pub status: PresenceStatus,
    pub active_workflows: Vec<WorkflowId>,
    pub terminated: Option<TerminationReason>,
}

impl SessionView {
    fn new(s: &Session, gw: &Gateway) -> Self {
        SessionView {
            id: s.id,
            prefix: s.id.prefix(),
            user: s.user_id.clone(),
            methods: s.methods.clone(),
            created_at: s.created_at,
            status: status(s, gw.now(), &gw.config.presence),
            active_workflows: s
                .active_instances()
                .map(|i| i.workflow_id.clone())
                .collect(),
            terminated: s.terminated.map(|t| t.reason),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuditQuery {
    #[serde(default)]
    pub user: Option<String>,
    #[serde(default)]
    pub from: Option<i64>,
    #[serde(default)]
    pub to: Option<i64>,
    #[serde(default)]
    pub decision: Option<String>,
    /// Only the newest `limit` matches.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdleQuery {
    pub user: String,
    #[serde(default)]
    pub from: Option<i64>,
    #[serde(default)]
    pub to: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stats {
    pub monitor_decisions: u64,
    pub audit_records: usize,
    pub sessions: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepsQuery {
    #[serde(default)]
    pub since: Option<usize>,
}

// ---------------------------------------------------------------- router

pub fn routes(gw: Arc<Gateway>) -> Router<Arc<Gateway>> {
    let api = Router::new()
        .route("/users", get(list_users).post(create_user))
        .route(
            "/users/{id}",
            get(get_user).put(update_user).delete(delete_user),
        )
        .route("/roles", get(list_roles).post(create_role))
        .route(
            "/roles/{id}",
            get(get_role).put(update_role).delete(delete_role),
        )
        .route("/workflows", get(list_workflows).post(create_workflow))
        .route(
            "/workflows/{id}",
            get(get_workflow)
                .put(update_workflow)
                .delete(delete_workflow),
        )
        .route(
            "/workflows/{id}/transitions/{tid}/params/{name}",
            put(set_param_rule).delete(delete_param_rule),
        )
        .route("/exclusions", get(list_exclusions).post(create_exclusion))
        .route(
            "/exclusions/{id}",
            get(get_exclusion)
                .put(update_exclusion)
                .delete(delete_exclusion),
        )
        .route("/recordings", get(list_recordings).post(start_recording))
        .route(
            "/recordings/{id}",
            get(get_recording).delete(delete_recording),
        )
        .route("/recordings/{id}/stop", post(stop_recording))
        .route("/recordings/{id}/steps", get(recording_steps))
        .route("/recordings/{id}/promote", post(promote_recording))
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/terminate", post(terminate_session))
        .route("/audit", get(query_audit))
        .route("/audit/idle", get(idle_report))
        .route("/export", get(export))
        .route("/import", post(import))
        .route("/stats", get(stats))
        .fallback(|| async { AdminError::NotFound("no such admin endpoint".into()) })
        .route_layer(middleware::from_fn_with_state(gw, require_token));
    Router::new().nest(PREFIX, api)
}

async fn require_token(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    let Some(expected) = &gw.admin_token else {
        return AdminError::Disabled.into_response();
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("");
    if !constant_time_eq(presented.as_bytes(), expected.as_bytes()) {
        return AdminError::Unauthorized.into_response();
    }
    next.run(req).await
}

fn created<T: Serialize>(v: T) -> Response {
    (StatusCode::CREATED, Json(v)).into_response()
}

// ----------------------------------------------------------------- users

async fn list_users(State(gw): State<Arc<Gateway>>) -> Json<Vec<UserView>> {
    let policy = gw.policy.policy();
    let idb = gw.policy.identities();
    Json(
        policy
            .accounts
            .values()
            .map(|a| {
                let token = idb.get(&a.id).and_then(|i| i.token);
                UserView {
                    id: a.id.clone(),
                    federated_name: a.federated_name.clone(),
                    idp: a.idp_id.clone(),
                    roles: a.role_ids.clone(),
                    has_token: token.is_some(),
                    upstream_username: a.upstream.as_ref().map(|u| u.username.clone()),
                }
            })
            .collect(),
    )
}

async fn get_user(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<UserId>,
) -> ApiResult<Json<UserView>> {
    list_users(State(gw))
        .await
        .0
        .into_iter()
        .find(|u| u.id == id)
        .map(Json)
        .ok_or_else(|| AdminError::NotFound(format!("user `{id}`")))
}

async fn create_user(
    State(gw): State<Arc<Gateway>>,
    Json(input): Json<UserInput>,
) -> ApiResult<Response> {
    if input.password.is_empty() {
        return Err(AdminError::BadRequest("password must not be empty".into()));
    }
    let password = tokio::task::spawn_blocking({
        let pw = input.password.clone();
        move || PasswordHash::create(&pw)
    })
    .await
    .map_err(|e| AdminError::Internal(e.to_string()))?;
    let user = User {
        federated_name: input.federated_name.unwrap_or_else(|| input.id.to_string()),
        id: input.id,
        role_ids: input.roles,
        idp_id: input.idp.unwrap_or_else(|| gw.config.idp.idp_id.clone()),
        password,
        token_binding: input.token.map(|t| TokenBinding {
            firm_code: t.firmcode,
            user_code: t.usercode,
        }),
        upstream_credentials: input.upstream.map(|u| UpstreamCredentials {
            username: u.username,
            secret: u.secret,
        }),
    };
    let view = UserView::from(&user);
    gw.policy.transact(|db| {
        if db.policy.accounts.contains_key(&user.id) {
            return Err(StoreError::Conflict(format!("user `{}`", user.id)));
        }
        db.upsert_user(user);
        Ok(())
    })?;
    Ok(created(view))
}

async fn update_user(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<UserId>,
    Json(up): Json<UserUpdate>,
) -> ApiResult<Json<UserView>> {
    let password = match up.password.clone() {
        Some(pw) if pw.is_empty() => {
            return Err(AdminError::BadRequest("password must not be empty".into()))
        }
        Some(pw) => Some(
            tokio::task::spawn_blocking(move || PasswordHash::create(&pw))
                .await
                .map_err(|e| AdminError::Internal(e.to_string()))?,
        ),
        None => None,
    };
    let view = gw.policy.transact(|db| {
        let mut user = db
            .users()
            .find(|u| u.id == id)
            .ok_or_else(|| StoreError::NotFound(format!("user `{id}`")))?;
        if let Some(f) = up.federated_name {
            user.federated_name = f;
        }
        if let Some(i) = up.idp {
            user.idp_id = i;
        }
        if let Some(p) = password {
            user.password = p;
        }
        if let Some(r) = up.roles {
            user.role_ids = r;
        }
        if up.clear_token {
            user.token_binding = None;
        }
        if let Some(t) = up.token {
            user.token_binding = Some(TokenBinding {
                firm_code: t.firmcode,
                user_code: t.usercode,
            });
        }
        if up.clear_upstream {
            user.upstream_credentials = None;
        }
        if let Some(u) = up.upstream {
            user.upstream_credentials = Some(UpstreamCredentials {
                username: u.username,
                secret: u.secret,
            });
        }
        let view = UserView::from(&user);
        db.upsert_user(user);
        Ok(view)
    })?;
    Ok(Json(view))
}

async fn delete_user(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<UserId>,
) -> ApiResult<StatusCode> {
    gw.policy.transact(|db| {
        if !db.remove_user(&id) {
            return Err(StoreError::NotFound(format!("user `{id}`")));
        }
        Ok(())
    })?;
    Ok(StatusCode::NO_CONTENT)
}

// ----------------------------------------------------------------- roles

async fn list_roles(State(gw): State<Arc<Gateway>>) -> Json<Vec<RoleDto>> {
    Json(
        gw.policy
            .policy()
            .roles
            .values()
            .map(RoleDto::from)
            .collect(),
    )
}

async fn get_role(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<RoleId>,
) -> ApiResult<Json<RoleDto>> {
    gw.policy
        .policy()
        .roles
        .get(&id)
        .map(|r| Json(RoleDto::from(r)))
        .ok_or_else(|| AdminError::NotFound(format!("role `{id}`")))
}

async fn create_role(
    State(gw): State<Arc<Gateway>>,
    Json(dto): Json<RoleDto>,
) -> ApiResult<Response> {
    let role = dto.into_role();
    let view = RoleDto::from(&role);
    gw.policy.transact(|db| {
        if db.policy.roles.contains_key(&role.id) {
            return Err(StoreError::Conflict(format!("role `{}`", role.id)));
        }
        db.policy.roles.insert(role.id.clone(), role);
        Ok(())
    })?;
    Ok(created(view))
}

async fn update_role(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<RoleId>,
    Json(dto): Json<RoleDto>,
) -> ApiResult<Json<RoleDto>> {
    if dto.id != id {
        return Err(AdminError::BadRequest(
            "role id in body and path differ".into(),
        ));
    }
    let role = dto.into_role();
    let view = RoleDto::from(&role);
    gw.policy
        .transact(|db| match db.policy.roles.get_mut(&id) {
            Some(slot) => {
                *slot = role;
                Ok(())
            }
            None => Err(StoreError::NotFound(format!("role `{id}`"))),
        })?;
    Ok(Json(view))
}

async fn delete_role(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<RoleId>,
) -> ApiResult<StatusCode> {
    gw.policy.transact(|db| {
        db.policy
            .roles
            .remove(&id)
            .map(|_| ())
            .ok_or_else(|| StoreError::NotFound(format!("role `{id}`")))
    })?;
    Ok(StatusCode::NO_CONTENT)
}

// ------------------------------------------------------------- workflows

async fn list_workflows(State(gw): State<Arc<Gateway>>) -> Json<Vec<Workflow>> {
    Json(gw.policy.policy().workflows.values().cloned().collect())
}

async fn get_workflow(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<WorkflowId>,
) -> ApiResult<Json<Workflow>> {
    gw.policy
        .policy()
        .workflows
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| AdminError::NotFound(format!("workflow `{id}`")))
}

fn attach(
    db: &mut gate_core::model::GateDb,
    wf: &WorkflowId,
    roles: &BTreeSet<RoleId>,
) -> Result<(), StoreError> {
    for r in roles {
        db.policy
            .roles
            .get_mut(r)
            .ok_or_else(|| StoreError::NotFound(format!("role `{r}`")))?
            .workflow_ids
            .insert(wf.clone());
    }
    Ok(())
}

async fn create_workflow(
    State(gw): State<Arc<Gateway>>,
    Json(input): Json<WorkflowInput>,
) -> ApiResult<Response> {
    let (wf, roles) = input.build()?;
    gw.policy.transact(|db| {
        if db.policy.workflows.contains_key(&wf.id) {
            return Err(StoreError::Conflict(format!("workflow `{}`", wf.id)));
        }
        attach(db, &wf.id, &roles)?;
        db.policy.workflows.insert(wf.id.clone(), wf.clone());
        Ok(())
    })?;
    Ok(created(wf))
}

async fn update_workflow(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<WorkflowId>,
    Json(input): Json<WorkflowInput>,
) -> ApiResult<Json<Workflow>> {
    if input.id != id {
        return Err(AdminError::BadRequest(
            "workflow id in body and path differ".into(),
        ));
    }
    let (wf, roles) = input.build()?;
    gw.policy.transact(|db| {
        if !db.policy.workflows.contains_key(&id) {
            return Err(StoreError::NotFound(format!("workflow `{id}`")));
        }
        attach(db, &id, &roles)?;
        db.policy.workflows.insert(id.clone(), wf.clone());
        Ok(())
    })?;
    Ok(Json(wf))
}

async fn delete_workflow(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<WorkflowId>,
) -> ApiResult<StatusCode> {
    gw.policy.transact(|db| {
        db.policy
            .workflows
            .remove(&id)
            .map(|_| ())
            .ok_or_else(|| StoreError::NotFound(format!("workflow `{id}`")))
    })?;
    Ok(StatusCode::NO_CONTENT)
}

async fn set_param_rule(
    State(gw): State<Arc<Gateway>>,
    Path((id, tid, name)): Path<(WorkflowId, u32, String)>,
    Json(spec): Json<RuleSpec>,
) -> ApiResult<Json<Workflow>> {
    let rule = spec.build()?;
    let mut edited: Result<Workflow, TrainingError> = Err(TrainingError::UnknownTransition(tid));
    gw.policy
        .transact(|db| {
            let wf = db
                .policy
                .workflows
                .get_mut(&id)
                .ok_or_else(|| StoreError::NotFound(format!("workflow `{id}`")))?;
            edited = training::edit_rule(wf, tid, &name, rule).map(|_| wf.clone());
            match &edited {
                Ok(_) => Ok(()),
                Err(e) => Err(StoreError::Rejected(e.to_string())),
            }
        })
        .or_else(|e| match (&edited, e) {
            (Err(_), StoreError::Rejected(_)) => Ok(()),
            (_, e) => Err(e),
        })?;
    Ok(Json(edited?))
}

async fn delete_param_rule(
    State(gw): State<Arc<Gateway>>,
    Path((id, tid, name)): Path<(WorkflowId, u32, String)>,
) -> ApiResult<StatusCode> {
    gw.policy.transact(|db| {
        let wf = db
            .policy
            .workflows
            .get_mut(&id)
            .ok_or_else(|| StoreError::NotFound(format!("workflow `{id}`")))?;
        match training::remove_rule(wf, tid, &name) {
            Ok(true) => Ok(()),
            Ok(false) => Err(StoreError::NotFound(format!("parameter `{name}`"))),
            Err(e) => Err(StoreError::NotFound(e.to_string())),
        }
    })?;
    Ok(StatusCode::NO_CONTENT)
}

// ------------------------------------------------------------ exclusions

async fn list_exclusions(State(gw): State<Arc<Gateway>>) -> Json<Vec<ExclusionDto>> {
    Json(
        gw.policy
            .policy()
            .exclusions
            .values()
            .map(|x| ExclusionDto {
                id: x.id.clone(),
                workflows: x.workflow_ids.clone(),
            })
            .collect(),
    )
}

async fn get_exclusion(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<ExclusionId>,
) -> ApiResult<Json<ExclusionDto>> {
    gw.policy
        .policy()
        .exclusions
        .get(&id)
        .map(|x| {
            Json(ExclusionDto {
                id: x.id.clone(),
                workflows: x.workflow_ids.clone(),
            })
        })
        .ok_or_else(|| AdminError::NotFound(format!("exclusion `{id}`")))
}

async fn create_exclusion(
    State(gw): State<Arc<Gateway>>,
    Json(dto): Json<ExclusionDto>,
) -> ApiResult<Response> {
    gw.policy.transact(|db| {
        if db.policy.exclusions.contains_key(&dto.id) {
            return Err(StoreError::Conflict(format!("exclusion `{}`", dto.id)));
        }
        db.policy.exclusions.insert(
            dto.id.clone(),
            ExclusionSet {
                id: dto.id.clone(),
                workflow_ids: dto.workflows.clone(),
            },
        );
        Ok(())
    })?;
    Ok(created(dto))
}

async fn update_exclusion(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<ExclusionId>,
    Json(dto): Json<ExclusionDto>,
) -> ApiResult<Json<ExclusionDto>> {
    if dto.id != id {
        return Err(AdminError::BadRequest(
            "exclusion id in body and path differ".into(),
        ));
    }
    gw.policy
        .transact(|db| match db.policy.exclusions.get_mut(&id) {
            Some(x) => {
                x.workflow_ids = dto.workflows.clone();
                Ok(())
            }
            None => Err(StoreError::NotFound(format!("exclusion `{id}`"))),
        })?;
    Ok(Json(dto))
}

async fn delete_exclusion(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<ExclusionId>,
) -> ApiResult<StatusCode> {
    gw.policy.transact(|db| {
        db.policy
            .exclusions
            .remove(&id)
            .map(|_| ())
            .ok_or_else(|| StoreError::NotFound(format!("exclusion `{id}`")))
    })?;
    Ok(StatusCode::NO_CONTENT)
}

// ------------------------------------------------------------ recordings

async fn list_recordings(State(gw): State<Arc<Gateway>>) -> Json<Vec<RecordingView>> {
    let book = gw.recordings.lock().expect("recordings");
    Json(book.list().map(RecordingView::from).collect())
}

async fn get_recording(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<RecordingId>,
) -> ApiResult<Json<RecordingView>> {
    let book = gw.recordings.lock().expect("recordings");
    book.get(id)
        .map(|r| Json(RecordingView::from(r)))
        .ok_or(AdminError::Training(TrainingError::UnknownRecording(id)))
}

async fn start_recording(
    State(gw): State<Arc<Gateway>>,
    Json(req): Json<RecordingStart>,
) -> ApiResult<Response> {
    if req.name.trim().is_empty() {
        return Err(AdminError::BadRequest(
            "recording name must not be empty".into(),
        ));
    }
    let now = gw.now();
    let rec = gw
        .recordings
        .lock()
        .expect("recordings")
        .start(&req.name, req.trainer, now)?;
    Ok(created(RecordingView::from(&rec)))
}

async fn stop_recording(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<RecordingId>,
) -> ApiResult<Json<RecordingView>> {
    let rec = gw.recordings.lock().expect("recordings").stop(id)?;
    Ok(Json(RecordingView::from(&rec)))
}

async fn delete_recording(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<RecordingId>,
) -> ApiResult<StatusCode> {
    gw.recordings
        .lock()
        .expect("recordings")
        .remove(id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or(AdminError::Training(TrainingError::UnknownRecording(id)))
}

async fn recording_steps(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<RecordingId>,
    Query(q): Query<StepsQuery>,
) -> ApiResult<Json<Vec<StepView>>> {
    let book = gw.recordings.lock().expect("recordings");
    let rec = book
        .get(id)
        .ok_or(AdminError::Training(TrainingError::UnknownRecording(id)))?;
    let since = q.since.unwrap_or(0);
    Ok(Json(
        rec.steps
            .iter()
            .enumerate()
            .skip(since)
            .map(|(index, step)| StepView {
                index,
                step: step.clone(),
            })
            .collect(),
    ))
}

async fn promote_recording(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<RecordingId>,
    Json(req): Json<PromoteRequest>,
) -> ApiResult<Response> {
    let rec = gw
        .recordings
        .lock()
        .expect("recordings")
        .get(id)
        .cloned()
        .ok_or(AdminError::Training(TrainingError::UnknownRecording(id)))?;
    let wf_id = req
        .workflow_id
        .unwrap_or_else(|| WorkflowId::new(format!("rec-{id}")));
    let mut draft = training::build_workflow(&rec, wf_id)?;
    if let Some(name) = &req.name {
        draft.rename(name);
    }
    let wf = draft.workflow;
    gw.policy.transact(|db| {
        if db.policy.workflows.contains_key(&wf.id) {
            return Err(StoreError::Conflict(format!("workflow `{}`", wf.id)));
        }
        attach(db, &wf.id, &BTreeSet::from([req.role.clone()]))?;
        db.policy.workflows.insert(wf.id.clone(), wf.clone());
        Ok(())
    })?;
    Ok(created(wf))
}

// -------------------------------------------------------------- sessions

async fn list_sessions(State(gw): State<Arc<Gateway>>) -> Json<Vec<SessionView>> {
    let sessions = gw.sessions.list(LEASE_TIMEOUT).await;
    Json(sessions.iter().map(|s| SessionView::new(s, &gw)).collect())
}

fn parse_session_id(id: &str) -> ApiResult<SessionId> {
    id.parse()
        .map_err(|_| AdminError::BadRequest(format!("`{id}` is not a session id")))
}

async fn get_session(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionView>> {
    let sid = parse_session_id(&id)?;
    let s = gw
        .sessions
        .get(&sid, LEASE_TIMEOUT)
        .await
        .map_err(|_| AdminError::NotFound(format!("session `{id}`")))?;
    Ok(Json(SessionView::new(&s, &gw)))
}

/// Ends a session as the presence sweep would. Repeating it is harmless.
async fn terminate_session(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionView>> {
    let sid = parse_session_id(&id)?;
    let mut lease = gw
        .sessions
        .lease(&sid, LEASE_TIMEOUT)
        .await
        .map_err(|_| AdminError::NotFound(format!("session `{id}`")))?;
    let now = gw.now();
    if terminate(&mut lease, TerminationReason::AdminAction, now) {
        gw.record(termination_event(
            &lease,
            TerminationReason::AdminAction,
            now,
        ));
    }
    let view = SessionView::new(&lease, &gw);
    lease.commit();
    Ok(Json(view))
}

// ----------------------------------------------------------------- audit

async fn query_audit(
    State(gw): State<Arc<Gateway>>,
    Query(q): Query<AuditQuery>,
) -> ApiResult<Json<Vec<AuditRecord>>> {
    let decision = q
        .decision
        .as_deref()
        .map(str::parse::<AuditDecision>)
        .transpose()
        .map_err(AdminError::BadRequest)?;
    let filter = AuditFilter {
        user: q.user,
        from: q.from,
        to: q.to,
        decision,
    };
    let mut records = gw.audit.query(&filter);
    if let Some(n) = q.limit {
        let start = records.len().saturating_sub(n);
        records.drain(..start);
    }
    Ok(Json(records))
}

async fn idle_report(
    State(gw): State<Arc<Gateway>>,
    Query(q): Query<IdleQuery>,
) -> Json<Vec<IdleGap>> {
    Json(gw.audit.idle_report(
        &q.user,
        q.from.unwrap_or(i64::MIN),
        q.to.unwrap_or(i64::MAX),
    ))
}

async fn stats(State(gw): State<Arc<Gateway>>) -> Json<Stats> {
    Json(Stats {
        monitor_decisions: gw.monitor_decisions(),
        audit_records: gw.audit.len(),
        sessions: gw.sessions.len(),
    })
}

// ---------------------------------------------------------- import/export

async fn export(State(gw): State<Arc<Gateway>>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/xml; charset=utf-8")],
        gw.policy.export(),
    )
        .into_response()
}

async fn import(State(gw): State<Arc<Gateway>>, body: Bytes) -> ApiResult<StatusCode> {
    match gw.policy.import(&body) {
        Ok(()) => Ok(StatusCode::NO_CONTENT),
        Err(StoreError::Import(gate_core::training::xml::ImportError::DanglingReference(v)))
        | Err(StoreError::Import(gate_core::training::xml::ImportError::Invalid(v))) => {
            Err(AdminError::ValidationFailed(v))
        }
        Err(e) => Err(e.into()),
    }
}
