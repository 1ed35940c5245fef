// SPDX-License-Identifier: Apache-2.0

//! Front-end proxy: forwards to production, judges each reply and fans
//! duplicates out to the patch and regression queues.

mod dispatch;
mod queue;

pub use dispatch::{DispatchStats, Dispatcher, HttpCandidateSink};
pub use queue::{BoundedQueue, Pop, PushOutcome, QueueStats, DEFAULT_CAPACITY};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::app::AppRuntime;
use crate::config::Duplicates;
use crate::envelope::{ShadowEnvelope, ShadowKind};
use crate::message::{Request, Response, REQUEST_ID_HEADER, SHADOW_HEADER};
use crate::oracle::{Observation, RequestOracle, Verdict};
use crate::reporting::FailureLog;
use crate::server::{instrument, is_hop_by_hop, read_instrumentation, UpstreamReply};

/// `n` copies of `request`, marked as shadow traffic and sharing its id.
pub fn duplicate(request: &Request, n: usize) -> Vec<Request> {
    let mut copy = request.clone();
    copy.headers
        .retain(|(k, _)| !k.eq_ignore_ascii_case(SHADOW_HEADER) && !k.eq_ignore_ascii_case(REQUEST_ID_HEADER));
    copy.headers.push((SHADOW_HEADER.into(), "1".into()));
    copy.headers.push((REQUEST_ID_HEADER.into(), request.request_id.clone()));
    vec![copy; n]
}

#[derive(Debug, thiserror::Error)]
pub enum UpstreamError {
    #[error("upstream unreachable: {0}")]
    Unreachable(String),
    #[error("upstream timed out")]
    Timeout,
}

/// Where production traffic goes.
#[derive(Clone)]
pub enum Upstream {
    Http {
        client: reqwest::Client,
        base: String,
    },
    /// Calls the runtime directly, bypassing the network.
    Local(Arc<AppRuntime>),
}

impl Upstream {
    pub fn http(base: impl Into<String>, timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .pool_max_idle_per_host(64)
            .build()
            .expect("http client builds");
        Upstream::Http {
            client,
            base: base.into().trim_end_matches('/').to_string(),
        }
    }

    pub async fn forward(&self, request: &Request) -> Result<UpstreamReply, UpstreamError> {
        match self {
            Upstream::Local(app) => Ok(read_instrumentation(instrument(app.handle_traced(request)))),
            Upstream::Http { client, base } => {
                let method = reqwest::Method::from_bytes(request.method.as_bytes())
                    .map_err(|e| UpstreamError::Unreachable(e.to_string()))?;
                let mut rb = client.request(method, format!("{base}{}", request.target()));
                for (k, v) in &request.headers {
                    if !is_hop_by_hop(k) && !k.eq_ignore_ascii_case("host") {
                        rb = rb.header(k.as_str(), v.as_str());
                    }
                }
                let resp = rb.body(request.body.clone()).send().await.map_err(classify)?;
                let status = resp.status().as_u16();
                let headers = resp
                    .headers()
                    .iter()
                    .map(|(k, v)| (k.as_str().to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
                    .collect();
                let body = resp.bytes().await.map_err(classify)?.to_vec();
                Ok(read_instrumentation(Response { status, headers, body }))
            }
        }
    }
}

fn classify(e: reqwest::Error) -> UpstreamError {
    if e.is_timeout() {
        UpstreamError::Timeout
    } else {
        UpstreamError::Unreachable(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ShadowerStats {
    pub requests: u64,
    pub upstream_errors: u64,
    pub failures: u64,
    pub passthrough: u64,
    pub patch_queue: QueueStats,
    pub regression_queue: QueueStats,
}

pub struct Shadower {
    upstream: Upstream,
    oracle: RequestOracle,
    duplicates: Duplicates,
    patch_queue: Arc<BoundedQueue<ShadowEnvelope>>,
    regression_queue: Arc<BoundedQueue<ShadowEnvelope>>,
    failures: Arc<FailureLog>,
    requests: AtomicU64,
    upstream_errors: AtomicU64,
    failure_count: AtomicU64,
    passthrough: AtomicU64,
}

impl Shadower {
    pub fn new(
        upstream: Upstream,
        oracle: RequestOracle,
        duplicates: Duplicates,
        patch_queue: Arc<BoundedQueue<ShadowEnvelope>>,
        regression_queue: Arc<BoundedQueue<ShadowEnvelope>>,
        failures: Arc<FailureLog>,
    ) -> Self {
        Shadower {
            upstream,
            oracle,
            duplicates,
            patch_queue,
            regression_queue,
            failures,
            requests: AtomicU64::new(0),
            upstream_errors: AtomicU64::new(0),
            failure_count: AtomicU64::new(0),
            passthrough: AtomicU64::new(0),
        }
    }

    pub fn patch_queue(&self) -> &Arc<BoundedQueue<ShadowEnvelope>> {
        &self.patch_queue
    }

    pub fn regression_queue(&self) -> &Arc<BoundedQueue<ShadowEnvelope>> {
        &self.regression_queue
    }

    pub fn stats(&self) -> ShadowerStats {
        ShadowerStats {
            requests: self.requests.load(Ordering::Relaxed),
            upstream_errors: self.upstream_errors.load(Ordering::Relaxed),
            failures: self.failure_count.load(Ordering::Relaxed),
            passthrough: self.passthrough.load(Ordering::Relaxed),
            patch_queue: self.patch_queue.stats(),
            regression_queue: self.regression_queue.stats(),
        }
    }

    /// Forwards `request` and returns production's reply. Routing to the
    /// shadow queues never waits on the consumers.
    pub async fn on_request(&self, mut request: Request) -> Response {
        if request.is_shadow() {
            // Already a duplicate; forwarding it again must not fan out.
            self.passthrough.fetch_add(1, Ordering::Relaxed);
            return match self.upstream.forward(&request).await {
                Ok(reply) => reply.response,
                Err(_) => Response::text(502, "bad gateway"),
            };
        }
        self.requests.fetch_add(1, Ordering::Relaxed);
        request.request_id = uuid::Uuid::new_v4().to_string();
        let started = Instant::now();
        let reply = match self.upstream.forward(&request).await {
            Ok(r) => r,
            Err(e) => {
                self.upstream_errors.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(error = %e, target = %request.target(), "upstream request failed");
                return Response::text(502, "bad gateway");
            }
        };
        let state_version = reply.state_version.unwrap_or(0);
        let verdict = self.oracle.judge_observation(&Observation {
            request: &request,
            response: &reply.response,
            outcome: &reply.outcome,
            state_version,
            latency: Some(started.elapsed()),
        });
        self.fan_out(&request, &reply.response, verdict, state_version);
        reply.response
    }

    fn fan_out(&self, request: &Request, response: &Response, verdict: Verdict, state_version: u64) {
        let (queue, kind, n) = match verdict.context() {
            Some(ctx) => {
                self.failure_count.fetch_add(1, Ordering::Relaxed);
                self.failures.record(ctx);
                tracing::info!(request = %request.request_id, kind = ?ctx.kind, message = %ctx.message, "failure detected");
                (&self.patch_queue, ShadowKind::ToPatchService, self.duplicates.patch)
            }
            None => (&self.regression_queue, ShadowKind::ToRegression, self.duplicates.regression),
        };
        for copy in duplicate(request, n) {
            let env = ShadowEnvelope {
                kind,
                request: copy,
                response: Some(response.clone()),
                verdict: verdict.clone(),
                state_version,
                snapshot: None,
                attempts: 0,
            };
            if queue.push(env) == PushOutcome::DisplacedOldest {
                tracing::debug!(?kind, "shadow queue full, dropped oldest");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample;

    fn shadower(app: Arc<AppRuntime>, cap: usize) -> Shadower {
        Shadower::new(
            Upstream::Local(app),
            RequestOracle::default(),
            Duplicates::default(),
            Arc::new(BoundedQueue::new(cap)),
            Arc::new(BoundedQueue::new(cap)),
            Arc::new(FailureLog::default()),
        )
    }

    #[test]
    fn duplicates_share_id_and_are_marked() {
        let mut r = Request::get("/users?id=ada");
        r.request_id = "abc".into();
        let d = duplicate(&r, 3);
        assert_eq!(d.len(), 3);
        for c in &d {
            assert!(c.is_shadow());
            assert_eq!(c.header(REQUEST_ID_HEADER), Some("abc"));
            assert_eq!(c.request_id, "abc");
            assert_eq!(c.query, r.query);
        }
    }

    #[tokio::test]
    async fn routes_by_verdict_and_strips_instrumentation() {
        let s = shadower(Arc::new(sample::production_app()), 8);
        let ok = s.on_request(Request::get("/users?id=ada")).await;
        assert_eq!((ok.status, ok.body_text().as_str()), (200, "Ada"));
        assert!(ok.headers.iter().all(|(k, _)| !k.starts_with("x-itzal-")));
        let bad = s.on_request(Request::get("/users?id=ghost")).await;
        assert_eq!(bad.status, 500);
        let st = s.stats();
        assert_eq!((st.requests, st.failures), (2, 1));
        assert_eq!(st.patch_queue.len, 1);
        assert_eq!(st.regression_queue.len, 1);
        let env = s.patch_queue.try_pop().unwrap();
        assert_eq!(env.kind, ShadowKind::ToPatchService);
        assert!(env.request.is_shadow());
        assert!(env.verdict.context().unwrap().point.is_some());
    }

    #[tokio::test]
    async fn shadow_requests_are_not_refanned() {
        let s = shadower(Arc::new(sample::production_app()), 8);
        let r = Request::get("/users?id=ghost").with_header(SHADOW_HEADER, "1");
        assert_eq!(s.on_request(r).await.status, 500);
        let st = s.stats();
        assert_eq!((st.passthrough, st.patch_queue.len, st.failures), (1, 0, 0));
    }

    #[tokio::test]
    async fn unreachable_upstream_is_502_without_dispatch() {
        let s = Shadower::new(
            Upstream::http("http://127.0.0.1:1", Duration::from_millis(500)),
            RequestOracle::default(),
            Duplicates::default(),
            Arc::new(BoundedQueue::new(4)),
            Arc::new(BoundedQueue::new(4)),
            Arc::new(FailureLog::default()),
        );
        assert_eq!(s.on_request(Request::get("/users?id=ada")).await.status, 502);
        let st = s.stats();
        assert_eq!((st.upstream_errors, st.patch_queue.pushed, st.regression_queue.pushed), (1, 0, 0));
    }
}
