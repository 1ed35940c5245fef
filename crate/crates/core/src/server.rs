// SPDX-License-Identifier: Apache-2.0

//! HTTP glue: message conversion, the instrumented production server and
//! the proxy front end.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::State;
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::Router;
use base64::Engine;
use tokio::net::TcpListener;

use crate::app::{AppRuntime, Handled};
use crate::lang::{ExecOutcome, Fault};
use crate::message::{parse_query, Request, Response, OUTCOME_HEADER, STATE_VERSION_HEADER};
use crate::shadower::Shadower;

pub const MAX_BODY: usize = 16 * 1024 * 1024;

const HOP_BY_HOP: &[&str] = &[
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
    "content-length",
];

pub fn is_hop_by_hop(name: &str) -> bool {
    HOP_BY_HOP.iter().any(|h| name.eq_ignore_ascii_case(h))
}

pub fn is_internal_header(name: &str) -> bool {
    name.to_ascii_lowercase().starts_with("x-itzal-")
}

/// Converts an incoming HTTP request. Fails only when the body exceeds
/// [`MAX_BODY`].
pub async fn from_http(req: axum::extract::Request) -> Result<Request, StatusCode> {
    let (parts, body) = req.into_parts();
    let body = to_bytes(body, MAX_BODY).await.map_err(|_| StatusCode::PAYLOAD_TOO_LARGE)?;
    let headers = parts
        .headers
        .iter()
        .map(|(k, v)| (k.as_str().to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    Ok(Request {
        method: parts.method.as_str().to_string(),
        path: parts.uri.path().to_string(),
        query: parts.uri.query().map(parse_query).unwrap_or_default(),
        headers,
        body: body.to_vec(),
        request_id: String::new(),
    })
}

pub fn to_http(resp: Response) -> axum::response::Response {
    let mut out = axum::response::Response::new(Body::from(resp.body));
    *out.status_mut() = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    for (k, v) in resp.headers {
        if is_hop_by_hop(&k) {
            continue;
        }
        if let (Ok(k), Ok(v)) = (HeaderName::try_from(k), HeaderValue::try_from(v)) {
            out.headers_mut().append(k, v);
        }
    }
    out
}

/// Production response plus the headers that tell the proxy how the
/// request ran.
pub fn instrument(handled: Handled) -> Response {
    let mut resp = handled.response;
    let outcome = match &handled.outcome {
        ExecOutcome::Completed { .. } => "completed".to_string(),
        ExecOutcome::Faulted { fault } => {
            let json = serde_json::to_vec(fault).expect("faults serialize");
            base64::engine::general_purpose::STANDARD.encode(json)
        }
    };
    resp.headers.push((OUTCOME_HEADER.into(), outcome));
    resp.headers.push((STATE_VERSION_HEADER.into(), handled.pre_state_version.to_string()));
    resp
}

/// What the proxy learns from an upstream reply.
#[derive(Debug, Clone)]
pub struct UpstreamReply {
    /// Reply with internal and hop-by-hop headers removed.
    pub response: Response,
    pub outcome: ExecOutcome,
    pub state_version: Option<u64>,
}

/// Splits instrumentation out of an upstream reply. An uninstrumented
/// upstream is treated as having completed normally.
pub fn read_instrumentation(mut resp: Response) -> UpstreamReply {
    let fault: Option<Fault> = resp.header(OUTCOME_HEADER).and_then(|v| {
        if v == "completed" {
            return None;
        }
        let bytes = base64::engine::general_purpose::STANDARD.decode(v).ok()?;
        serde_json::from_slice(&bytes).ok()
    });
    let state_version = resp.header(STATE_VERSION_HEADER).and_then(|v| v.parse().ok());
    resp.headers.retain(|(k, _)| !is_internal_header(k) && !is_hop_by_hop(k));
    let outcome = match fault {
        Some(fault) => ExecOutcome::Faulted { fault },
        None => ExecOutcome::Completed { response: resp.clone() },
    };
    UpstreamReply {
        response: resp,
        outcome,
        state_version,
    }
}

async fn serve_app(State(app): State<Arc<AppRuntime>>, req: axum::extract::Request) -> axum::response::Response {
    let req = match from_http(req).await {
        Ok(r) => r,
        Err(s) => return to_http(Response::text(s.as_u16(), "request body too large")),
    };
    to_http(instrument(app.handle_traced(&req)))
}

pub fn app_router(app: Arc<AppRuntime>) -> Router {
    Router::new().fallback(serve_app).with_state(app)
}

async fn serve_proxy(State(shadower): State<Arc<Shadower>>, req: axum::extract::Request) -> axum::response::Response {
    let req = match from_http(req).await {
        Ok(r) => r,
        Err(s) => return to_http(Response::text(s.as_u16(), "request body too large")),
    };
    to_http(shadower.on_request(req).await)
}

pub fn proxy_router(shadower: Arc<Shadower>) -> Router {
    Router::new().fallback(serve_proxy).with_state(shadower)
}

/// A router bound to a listener, serving until the returned handle is
/// aborted or the runtime stops.
pub struct Served {
    pub addr: SocketAddr,
    pub task: tokio::task::JoinHandle<()>,
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

pub fn spawn_router(listener: TcpListener, router: Router, name: &'static str) -> std::io::Result<Served> {
    let addr = listener.local_addr()?;
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::error!(server = name, error = %e, "server stopped");
        }
    });
    Ok(Served { addr, task })
}
