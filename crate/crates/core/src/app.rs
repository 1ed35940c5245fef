// SPDX-License-Identifier: Apache-2.0

//! The production application: routes requests to handlers over a
//! snapshot-able key-value store.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{execute_handler, ExecOutcome, Execution, Program};
use crate::message::{Request, Response};
use crate::state::{KvState, StateSnapshot};

pub const INTERNAL_ERROR_BODY: &str = "internal error";

/// Number of pre-request snapshots kept for replay lookups.
const SNAPSHOT_HISTORY: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub method: String,
    /// Exact path, or a prefix ending in `/*` matching one trailing segment.
    pub path: String,
    pub handler: String,
}

/// Ordered routes; the first match wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouteTable {
    pub routes: Vec<Route>,
}

impl RouteTable {
    pub fn new(routes: Vec<Route>) -> Self {
        RouteTable { routes }
    }

    pub fn single(method: &str, path: &str, handler: &str) -> Self {
        RouteTable::new(vec![Route {
            method: method.into(),
            path: path.into(),
            handler: handler.into(),
        }])
    }

    pub fn resolve(&self, method: &str, path: &str) -> Option<&str> {
        self.routes
            .iter()
            .find(|r| r.method.eq_ignore_ascii_case(method) && path_matches(&r.path, path))
            .map(|r| r.handler.as_str())
    }
}

fn path_matches(pattern: &str, path: &str) -> bool {
    match pattern.strip_suffix("/*") {
        Some(prefix) => path
            .strip_prefix(prefix)
            .and_then(|rest| rest.strip_prefix('/'))
            .is_some_and(|seg| !seg.is_empty() && !seg.contains('/')),
        None => pattern == path,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Production,
    Sandbox,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AppError {
    #[error("restore is forbidden on the production instance")]
    RestoreOnProduction,
}

/// Result of one routed request.
#[derive(Debug, Clone)]
pub struct Handled {
    pub response: Response,
    pub outcome: ExecOutcome,
    /// Handler the request was routed to.
    pub handler: Option<String>,
    /// Statement lines that ran; empty when no handler was routed.
    pub executed_lines: std::collections::BTreeSet<u32>,
    /// Write counter of the state before the request ran.
    pub pre_state_version: u64,
}

/// Access to production snapshots for services that replay requests.
pub trait StateSource: Send + Sync {
    fn latest(&self) -> Arc<StateSnapshot>;
    /// Snapshot of the state as it was at write counter `version`.
    fn at_version(&self, version: u64) -> Option<Arc<StateSnapshot>>;
    fn state_version(&self) -> u64;
}

struct Inner {
    state: KvState,
    history: VecDeque<Arc<StateSnapshot>>,
}

/// One application instance. Production instances serialize handler
/// executions; sandbox instances are owned by a single lease holder.
pub struct AppRuntime {
    role: Role,
    program: RwLock<Arc<Program>>,
    routes: RouteTable,
    inner: Mutex<Inner>,
}

impl AppRuntime {
    pub fn production(program: Program, routes: RouteTable, seed: KvState) -> Self {
        Self::build(Role::Production, Arc::new(program), routes, seed)
    }

    pub fn sandbox(program: Arc<Program>, routes: RouteTable) -> Self {
        Self::build(Role::Sandbox, program, routes, KvState::new())
    }

    fn build(role: Role, program: Arc<Program>, routes: RouteTable, seed: KvState) -> Self {
        AppRuntime {
            role,
            program: RwLock::new(program),
            routes,
            inner: Mutex::new(Inner {
                state: seed,
                history: VecDeque::new(),
            }),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn program(&self) -> Arc<Program> {
        self.program.read().unwrap().clone()
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    /// Installs a program. Only sandboxes take new programs at runtime.
    pub(crate) fn install(&self, program: Arc<Program>) {
        debug_assert_eq!(self.role, Role::Sandbox);
        *self.program.write().unwrap() = program;
    }

    pub fn state_version(&self) -> u64 {
        self.inner.lock().unwrap().state.version()
    }

    pub fn handle(&self, request: &Request) -> (Response, ExecOutcome) {
        let h = self.handle_traced(request);
        (h.response, h.outcome)
    }

    pub fn handle_traced(&self, request: &Request) -> Handled {
        let program = self.program();
        let mut inner = self.inner.lock().unwrap();
        let pre_state_version = inner.state.version();
        let plain = |response: Response| Handled {
            outcome: ExecOutcome::Completed {
                response: response.clone(),
            },
            response,
            handler: None,
            executed_lines: Default::default(),
            pre_state_version,
        };
        if !is_valid_request_line(request) {
            return plain(Response::text(400, "bad request"));
        }
        let Some(handler) = self.routes.resolve(&request.method, &request.path) else {
            return plain(Response::text(404, "not found"));
        };
        if self.role == Role::Production {
            inner.record_pre_state();
        }
        let Execution {
            outcome,
            executed_lines,
        } = match execute_handler(&program, handler, request, &mut inner.state) {
            Ok(ex) => ex,
            // A route naming a missing handler is a server-side fault.
            Err(e) => {
                tracing::error!(error = %e, "route points at a missing handler");
                return plain(Response::text(500, INTERNAL_ERROR_BODY));
            }
        };
        let response = match &outcome {
            ExecOutcome::Completed { response } => response.clone(),
            ExecOutcome::Faulted { .. } => Response::text(500, INTERNAL_ERROR_BODY),
        };
        Handled {
            response,
            outcome,
            handler: Some(handler.to_string()),
            executed_lines,
            pre_state_version,
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        self.inner.lock().unwrap().state.snapshot()
    }

    pub fn restore(&self, snapshot: &StateSnapshot) -> Result<(), AppError> {
        if self.role == Role::Production {
            return Err(AppError::RestoreOnProduction);
        }
        self.inner.lock().unwrap().state.load(snapshot);
        Ok(())
    }

    /// Copy of the current contents.
    pub fn dump(&self) -> std::collections::BTreeMap<String, crate::lang::Value> {
        self.inner.lock().unwrap().state.entries().clone()
    }
}

impl Inner {
    fn record_pre_state(&mut self) {
        let version = self.state.version();
        if self.history.back().is_some_and(|s| s.state_version == version) {
            return;
        }
        if self.history.len() == SNAPSHOT_HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(Arc::new(self.state.snapshot()));
    }
}

impl StateSource for AppRuntime {
    fn latest(&self) -> Arc<StateSnapshot> {
        let mut inner = self.inner.lock().unwrap();
        inner.record_pre_state();
        inner.history.back().cloned().expect("just recorded")
    }

    fn at_version(&self, version: u64) -> Option<Arc<StateSnapshot>> {
        let inner = self.inner.lock().unwrap();
        let recorded = inner
            .history
            .iter()
            .rev()
            .find(|s| s.state_version == version)
            .cloned();
        recorded.or_else(|| {
            (inner.state.version() == version).then(|| Arc::new(inner.state.snapshot()))
        })
    }

    fn state_version(&self) -> u64 {
        AppRuntime::state_version(self)
    }
}

fn is_valid_request_line(r: &Request) -> bool {
    !r.method.is_empty()
        && r.method.bytes().all(|b| b.is_ascii_uppercase())
        && r.path.starts_with('/')
        && !r.path.bytes().any(|b| b.is_ascii_whitespace() || b.is_ascii_control())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{parse_program, Value};
    use crate::sample;

    #[test]
    fn routes_first_match_and_wildcard() {
        let t = RouteTable::new(vec![
            Route { method: "GET".into(), path: "/a/*".into(), handler: "one".into() },
            Route { method: "GET".into(), path: "/a/b".into(), handler: "two".into() },
        ]);
        assert_eq!(t.resolve("GET", "/a/b"), Some("one"));
        assert_eq!(t.resolve("GET", "/a"), None);
        assert_eq!(t.resolve("GET", "/a/b/c"), None);
        assert_eq!(t.resolve("POST", "/a/b"), None);
    }

    #[test]
    fn sample_app_paths() {
        let app = sample::production_app();
        let (resp, outcome) = app.handle(&Request::get("/users?id=ada"));
        assert_eq!((resp.status, resp.body_text().as_str()), (200, "Ada"));
        assert!(!outcome.is_faulted());

        let (resp, outcome) = app.handle(&Request::get("/users?id=ghost"));
        assert_eq!((resp.status, resp.body_text().as_str()), (500, INTERNAL_ERROR_BODY));
        assert_eq!(outcome.fault().unwrap().point.as_ref().unwrap().line, 2);

        let (resp, outcome) = app.handle(&Request::get("/nosuch"));
        assert_eq!(resp.status, 404);
        assert!(!outcome.is_faulted());
    }

    #[test]
    fn fault_context_never_leaks_into_body() {
        let app = sample::production_app();
        let (resp, _) = app.handle(&Request::get("/users?id=ghost"));
        assert!(!resp.body_text().contains("null"));
    }

    #[test]
    fn malformed_request_line_is_400() {
        let app = sample::production_app();
        let (resp, outcome) = app.handle(&Request::new("G ET", "/users"));
        assert_eq!(resp.status, 400);
        assert!(!outcome.is_faulted());
        let (resp, _) = app.handle(&Request::new("GET", "users"));
        assert_eq!(resp.status, 400);
    }

    #[test]
    fn restore_guarded_on_production() {
        let app = sample::production_app();
        let snap = app.snapshot();
        assert_eq!(app.restore(&snap), Err(AppError::RestoreOnProduction));
    }

    #[test]
    fn sandbox_restore_discards_mutations() {
        let p = parse_program(r#"handler w { let x = db.put("k", 9); }"#).unwrap();
        let sb = AppRuntime::sandbox(Arc::new(p), RouteTable::single("GET", "/w", "w"));
        let mut seed = KvState::new();
        seed.put("k", Value::Int(1));
        let snap = seed.snapshot();
        sb.restore(&snap).unwrap();
        assert_eq!(sb.dump(), snap.entries);
        sb.handle(&Request::get("/w"));
        assert_eq!(sb.dump().get("k"), Some(&Value::Int(9)));
        sb.restore(&snap).unwrap();
        assert_eq!(sb.dump(), snap.entries);
    }

    #[test]
    fn pre_state_history_lookup() {
        let p = parse_program(r#"handler w { let x = db.put(param("k"), 1); }"#).unwrap();
        let app = AppRuntime::production(p, RouteTable::single("GET", "/w", "w"), KvState::new());
        let h1 = app.handle_traced(&Request::get("/w?k=a"));
        let h2 = app.handle_traced(&Request::get("/w?k=b"));
        assert_eq!((h1.pre_state_version, h2.pre_state_version), (0, 1));
        let before_b = app.at_version(1).unwrap();
        assert!(before_b.get("a").is_some() && before_b.get("b").is_none());
        assert_eq!(app.at_version(2).unwrap().entries.len(), 2);
        assert!(app.at_version(7).is_none());
    }
}
