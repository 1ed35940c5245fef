// SPDX-License-Identifier: Apache-2.0

//! HTTP surface of the reporting service, plus the intake endpoints of the
//! patch and regression services.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ReportError, ReportingService};
use crate::envelope::{EnvelopeSink, ShadowEnvelope, ShadowKind};
use crate::patch::{CandidatePatch, CandidateSink, PatchId};
use crate::regression::{DecideError, DecisionKind};

pub const TOKEN_HEADER: &str = "x-itzal-token";

pub type MetricsFn = Arc<dyn Fn() -> Value + Send + Sync>;

#[derive(Clone)]
pub struct ApiState {
    pub reporting: Arc<ReportingService>,
    pub metrics: MetricsFn,
    /// Where `/itzal/patch-search` submissions go.
    pub patch_intake: Option<Arc<dyn EnvelopeSink>>,
    pub cors_origin: Option<String>,
    pub token: Option<String>,
}

impl ApiState {
    pub fn new(reporting: Arc<ReportingService>) -> Self {
        ApiState {
            reporting,
            metrics: Arc::new(|| json!({})),
            patch_intake: None,
            cors_origin: Some("*".into()),
            token: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: DecisionKind,
    #[serde(default = "anonymous")]
    pub actor: String,
}

fn anonymous() -> String {
    "anonymous".into()
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

/// The 401 response to send, if the request lacks the configured token.
fn unauthorized(state: &ApiState, headers: &HeaderMap) -> Option<Response> {
    match &state.token {
        Some(t) if headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) != Some(t.as_str()) => {
            Some(error(StatusCode::UNAUTHORIZED, "missing or wrong token"))
        }
        _ => None,
    }
}

async fn failures(State(s): State<ApiState>) -> Response {
    Json(s.reporting.failure_summary()).into_response()
}

async fn patches(State(s): State<ApiState>) -> Response {
    Json(s.reporting.patches()).into_response()
}

async fn patch(State(s): State<ApiState>, Path(id): Path<String>) -> Response {
    match s.reporting.patch(&PatchId(id.clone())) {
        Some(v) => Json(v).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown patch {id}")),
    }
}

async fn decide(
    State(s): State<ApiState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> Response {
    if let Some(r) = unauthorized(&s, &headers) {
        return r;
    }
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match s.reporting.decide(&PatchId(id), req.decision, &req.actor) {
        Ok(v) => Json(v).into_response(),
        Err(ReportError::Decide(e @ DecideError::UnknownPatch(_))) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(ReportError::Decide(e @ DecideError::NotReportable { .. })) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e @ ReportError::Io(_)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn metrics(State(s): State<ApiState>) -> Response {
    Json((s.metrics)()).into_response()
}

async fn patch_search(
    State(s): State<ApiState>,
    headers: HeaderMap,
    body: Result<Json<ShadowEnvelope>, JsonRejection>,
) -> Response {
    if let Some(r) = unauthorized(&s, &headers) {
        return r;
    }
    let Json(env) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    if env.kind != ShadowKind::ToPatchService {
        return error(StatusCode::BAD_REQUEST, "envelope is not addressed to the patch service");
    }
    let Some(intake) = &s.patch_intake else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "patch search is not enabled");
    };
    if intake.submit(env) {
        (StatusCode::ACCEPTED, Json(json!({ "accepted": 1 }))).into_response()
    } else {
        error(StatusCode::SERVICE_UNAVAILABLE, "patch queue is closed")
    }
}

async fn candidates(
    State(s): State<ApiState>,
    headers: HeaderMap,
    body: Result<Json<Vec<CandidatePatch>>, JsonRejection>,
) -> Response {
    if let Some(r) = unauthorized(&s, &headers) {
        return r;
    }
    let Json(list) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let n = list.len();
    s.reporting.registry().push(list);
    (StatusCode::ACCEPTED, Json(json!({ "accepted": n }))).into_response()
}

async fn cors(State(s): State<ApiState>, req: Request, next: Next) -> Response {
    let Some(origin) = s.cors_origin.clone() else {
        return next.run(req).await;
    };
    let mut resp = if req.method() == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    let h = resp.headers_mut();
    if let Ok(v) = HeaderValue::from_str(&origin) {
        h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, v);
    }
    h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
    h.insert(
        header::ACCESS_CONTROL_ALLOW_HEADERS,
        HeaderValue::from_static("content-type, x-itzal-token"),
    );
    resp
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/api/failures", get(failures))
        .route("/api/patches", get(patches))
        .route("/api/patches/{id}", get(patch))
        .route("/api/patches/{id}/decision", post(decide))
        .route("/api/metrics", get(metrics))
        .route("/itzal/patch-search", post(patch_search))
        .route("/itzal/candidates", post(candidates))
        .layer(middleware::from_fn_with_state(state.clone(), cors))
        .with_state(state)
}
