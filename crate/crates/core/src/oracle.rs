// SPDX-License-Identifier: Apache-2.0

//! Per-request success oracle.
//!
//! Default rule: a request fails when its handler faulted or its status is
//! 5xx. Named checks can flag additional failures but never clear one.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{ExecOutcome, FailurePoint, FaultKind};
use crate::message::{Request, Response};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureKind {
    NullDereference,
    TypeFault,
    Arithmetic,
    StatusOnly,
}

impl From<FaultKind> for FailureKind {
    fn from(k: FaultKind) -> Self {
        match k {
            FaultKind::NullDereference => FailureKind::NullDereference,
            FaultKind::TypeFault => FailureKind::TypeFault,
            FaultKind::Arithmetic => FailureKind::Arithmetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureContext {
    pub request_id: String,
    pub kind: FailureKind,
    /// Always present for `NullDereference`.
    pub point: Option<FailurePoint>,
    pub state_version: u64,
    pub status: u16,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Failure { context: FailureContext },
}

impl Verdict {
    pub fn is_failure(&self) -> bool {
        matches!(self, Verdict::Failure { .. })
    }

    pub fn context(&self) -> Option<&FailureContext> {
        match self {
            Verdict::Failure { context } => Some(context),
            Verdict::Success => None,
        }
    }
}

/// A check as declared in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSpec {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("unknown oracle check `{0}`")]
    Unknown(String),
    #[error("check `{name}`: {message}")]
    BadParams { name: String, message: String },
}

#[derive(Debug, Clone)]
pub enum Check {
    NonEmptyBody,
    JsonBody,
    BodyRegex { pattern: Regex, must_match: bool },
    MaxLatency(Duration),
}

impl Check {
    pub fn from_spec(spec: &CheckSpec) -> Result<Check, CheckError> {
        let bad = |message: &str| CheckError::BadParams {
            name: spec.name.clone(),
            message: message.to_string(),
        };
        match spec.name.as_str() {
            "non-empty-body" => Ok(Check::NonEmptyBody),
            "json-body" => Ok(Check::JsonBody),
            "regex-on-body" => {
                let pattern = spec
                    .params
                    .get("pattern")
                    .and_then(|p| p.as_str())
                    .ok_or_else(|| bad("missing string param `pattern`"))?;
                let pattern = Regex::new(pattern).map_err(|e| bad(&e.to_string()))?;
                let must_match = spec
                    .params
                    .get("must_match")
                    .and_then(|m| m.as_bool())
                    .unwrap_or(true);
                Ok(Check::BodyRegex {
                    pattern,
                    must_match,
                })
            }
            "max-latency-ms" => {
                let ms = spec
                    .params
                    .get("ms")
                    .and_then(|m| m.as_u64())
                    .ok_or_else(|| bad("missing integer param `ms`"))?;
                Ok(Check::MaxLatency(Duration::from_millis(ms)))
            }
            other => Err(CheckError::Unknown(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Check::NonEmptyBody => "non-empty-body",
            Check::JsonBody => "json-body",
            Check::BodyRegex { .. } => "regex-on-body",
            Check::MaxLatency(_) => "max-latency-ms",
        }
    }

    /// True when the response passes.
    fn passes(&self, obs: &Observation<'_>) -> bool {
        let body = &obs.response.body;
        match self {
            Check::NonEmptyBody => !body.is_empty(),
            Check::JsonBody => serde_json::from_slice::<serde_json::Value>(body).is_ok(),
            Check::BodyRegex {
                pattern,
                must_match,
            } => pattern.is_match(&String::from_utf8_lossy(body)) == *must_match,
            Check::MaxLatency(max) => obs.latency.is_none_or(|l| l <= *max),
        }
    }
}

/// Everything the oracle may look at for one request.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub request: &'a Request,
    pub response: &'a Response,
    pub outcome: &'a ExecOutcome,
    pub state_version: u64,
    pub latency: Option<Duration>,
}

#[derive(Debug, Clone)]
pub struct RequestOracle {
    enabled: bool,
    checks: Vec<Check>,
}

impl Default for RequestOracle {
    fn default() -> Self {
        RequestOracle {
            enabled: true,
            checks: Vec::new(),
        }
    }
}

impl RequestOracle {
    pub fn new(checks: Vec<Check>) -> Self {
        RequestOracle {
            enabled: true,
            checks,
        }
    }

    pub fn from_specs(specs: &[CheckSpec]) -> Result<Self, CheckError> {
        Ok(Self::new(
            specs.iter().map(Check::from_spec).collect::<Result<_, _>>()?,
        ))
    }

    /// An oracle that never reports failures.
    pub fn always_success() -> Self {
        RequestOracle {
            enabled: false,
            checks: Vec::new(),
        }
    }

    pub fn with_check(mut self, check: Check) -> Self {
        self.checks.push(check);
        self
    }

    /// Judges a bare (response, outcome) pair with the default rule and
    /// any body checks.
    pub fn judge(&self, response: &Response, outcome: &ExecOutcome) -> Verdict {
        let request = Request::new("GET", "/");
        self.judge_observation(&Observation {
            request: &request,
            response,
            outcome,
            state_version: 0,
            latency: None,
        })
    }

    pub fn judge_observation(&self, obs: &Observation<'_>) -> Verdict {
        if !self.enabled {
            return Verdict::Success;
        }
        let failure = |kind, point, message: String| Verdict::Failure {
            context: FailureContext {
                request_id: obs.request.request_id.clone(),
                kind,
                point,
                state_version: obs.state_version,
                status: obs.response.status,
                message,
            },
        };
        if let ExecOutcome::Faulted { fault } = obs.outcome {
            return failure(fault.kind.into(), fault.point.clone(), fault.message.clone());
        }
        if obs.response.status >= 500 {
            return failure(
                FailureKind::StatusOnly,
                None,
                format!("status {}", obs.response.status),
            );
        }
        for check in &self.checks {
            match catch_unwind(AssertUnwindSafe(|| check.passes(obs))) {
                Ok(true) => {}
                Ok(false) => {
                    return failure(
                        FailureKind::StatusOnly,
                        None,
                        format!("check `{}` failed", check.name()),
                    )
                }
                Err(_) => {
                    tracing::warn!(check = check.name(), "oracle check panicked; treating as pass");
                }
            }
        }
        Verdict::Success
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Fault;

    fn completed(r: &Response) -> ExecOutcome {
        ExecOutcome::Completed { response: r.clone() }
    }

    #[test]
    fn status_500_is_failure() {
        let r = Response::text(500, "internal error");
        let v = RequestOracle::default().judge(&r, &completed(&r));
        assert_eq!(v.context().unwrap().kind, FailureKind::StatusOnly);
    }

    #[test]
    fn ok_and_client_errors_are_success() {
        let o = RequestOracle::default();
        for status in [200, 201, 302, 404, 499] {
            let r = Response::text(status, "x");
            assert_eq!(o.judge(&r, &completed(&r)), Verdict::Success, "{status}");
        }
    }

    #[test]
    fn faulted_carries_failure_point() {
        let point = FailurePoint { handler: "users".into(), line: 2, expr_index: 0, variable: "u".into() };
        let outcome = ExecOutcome::Faulted {
            fault: Fault {
                kind: FaultKind::NullDereference,
                handler: "users".into(),
                line: 2,
                message: "null".into(),
                point: Some(point.clone()),
            },
        };
        let r = Response::text(500, "internal error");
        let v = RequestOracle::default().judge(&r, &outcome);
        let ctx = v.context().unwrap();
        assert_eq!(ctx.kind, FailureKind::NullDereference);
        assert_eq!(ctx.point.as_ref(), Some(&point));
    }

    #[test]
    fn custom_check_flags_empty_body() {
        let r = Response::text(200, "");
        let o = RequestOracle::default().with_check(Check::NonEmptyBody);
        assert!(o.judge(&r, &completed(&r)).is_failure());
        let ok = Response::text(200, "x");
        assert!(!o.judge(&ok, &completed(&ok)).is_failure());
    }

    #[test]
    fn check_specs() {
        let specs: Vec<CheckSpec> = serde_json::from_str(
            r#"[{"name":"json-body"},{"name":"regex-on-body","params":{"pattern":"^A"}},{"name":"max-latency-ms","params":{"ms":5}}]"#,
        )
        .unwrap();
        let o = RequestOracle::from_specs(&specs).unwrap();
        let r = Response::text(200, "\"Ada\"");
        assert!(o.judge(&r, &completed(&r)).is_failure(), "regex requires leading A");
        let r = Response::text(200, "Ada");
        assert!(o.judge(&r, &completed(&r)).is_failure(), "not json");

        let bad = CheckSpec { name: "regex-on-body".into(), params: serde_json::json!({"pattern": "("}) };
        assert!(matches!(Check::from_spec(&bad), Err(CheckError::BadParams { .. })));
        let unknown = CheckSpec { name: "vibes".into(), params: serde_json::Value::Null };
        assert_eq!(Check::from_spec(&unknown).unwrap_err(), CheckError::Unknown("vibes".into()));
    }

    #[test]
    fn latency_check() {
        let o = RequestOracle::default().with_check(Check::MaxLatency(Duration::from_millis(10)));
        let req = Request::get("/");
        let r = Response::text(200, "x");
        let out = completed(&r);
        let slow = Observation { request: &req, response: &r, outcome: &out, state_version: 0, latency: Some(Duration::from_millis(11)) };
        assert!(o.judge_observation(&slow).is_failure());
    }

    #[test]
    fn disabled_oracle_never_fails() {
        let r = Response::text(500, "boom");
        assert_eq!(RequestOracle::always_success().judge(&r, &completed(&r)), Verdict::Success);
    }
}
