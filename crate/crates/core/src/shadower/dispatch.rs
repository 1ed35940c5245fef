// SPDX-License-Identifier: Apache-2.0

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;

use super::{BoundedQueue, Pop};
use crate::envelope::ShadowEnvelope;
use crate::patch::{Budget, CandidatePatch, CandidateSink, PatchEngine, PatchError};
use crate::regression::RegressionService;

const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DispatchStats {
    /// Envelopes fully processed, retries included.
    pub patch_envelopes: u64,
    pub patch_retries: u64,
    /// Patch envelopes given up on after a retry.
    pub patch_dropped: u64,
    pub patch_errors: u64,
    pub regression_envelopes: u64,
    pub regression_errors: u64,
}

#[derive(Default)]
struct Counters {
    patch_envelopes: AtomicU64,
    patch_retries: AtomicU64,
    patch_dropped: AtomicU64,
    patch_errors: AtomicU64,
    regression_envelopes: AtomicU64,
    regression_errors: AtomicU64,
}

/// Worker threads draining the shadow queues.
pub struct Dispatcher {
    stop: Arc<AtomicBool>,
    counters: Arc<Counters>,
    workers: Vec<JoinHandle<()>>,
}

impl Dispatcher {
    pub fn start(
        patch_queue: Arc<BoundedQueue<ShadowEnvelope>>,
        regression_queue: Arc<BoundedQueue<ShadowEnvelope>>,
        engine: Arc<PatchEngine>,
        regression: Arc<RegressionService>,
        budget: Budget,
    ) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let counters = Arc::new(Counters::default());
        let mut workers = Vec::new();
        {
            let (stop, c, q) = (stop.clone(), counters.clone(), patch_queue);
            workers.push(
                std::thread::Builder::new()
                    .name("itzal-patch".into())
                    .spawn(move || {
                        while let Some(mut env) = next(&q, &stop) {
                            match engine.search(&env, budget) {
                                Ok(report) => tracing::debug!(
                                    request = %env.request_id(),
                                    tried = report.tried,
                                    candidates = report.candidates.len(),
                                    deduplicated = report.deduplicated,
                                    "patch search finished"
                                ),
                                Err(PatchError::SandboxUnavailable(e)) if env.attempts == 0 => {
                                    c.patch_retries.fetch_add(1, Ordering::Relaxed);
                                    tracing::debug!(error = %e, "no sandbox for patch search, retrying once");
                                    env.attempts += 1;
                                    q.push(env);
                                }
                                Err(PatchError::SandboxUnavailable(e)) => {
                                    c.patch_dropped.fetch_add(1, Ordering::Relaxed);
                                    tracing::warn!(request = %env.request_id(), error = %e, "dropping patch search");
                                }
                                Err(e) => {
                                    c.patch_errors.fetch_add(1, Ordering::Relaxed);
                                    tracing::debug!(request = %env.request_id(), error = %e, "patch search declined");
                                }
                            }
                            c.patch_envelopes.fetch_add(1, Ordering::Relaxed);
                        }
                    })
                    .expect("spawn patch worker"),
            );
        }
        {
            let (stop, c, q) = (stop.clone(), counters.clone(), regression_queue);
            workers.push(
                std::thread::Builder::new()
                    .name("itzal-regression".into())
                    .spawn(move || {
                        while let Some(env) = next(&q, &stop) {
                            if let Err(e) = regression.check(&env) {
                                c.regression_errors.fetch_add(1, Ordering::Relaxed);
                                tracing::debug!(request = %env.request_id(), error = %e, "regression check declined");
                            }
                            c.regression_envelopes.fetch_add(1, Ordering::Relaxed);
                        }
                    })
                    .expect("spawn regression worker"),
            );
        }
        Dispatcher { stop, counters, workers }
    }

    pub fn stats(&self) -> DispatchStats {
        let c = &self.counters;
        DispatchStats {
            patch_envelopes: c.patch_envelopes.load(Ordering::Relaxed),
            patch_retries: c.patch_retries.load(Ordering::Relaxed),
            patch_dropped: c.patch_dropped.load(Ordering::Relaxed),
            patch_errors: c.patch_errors.load(Ordering::Relaxed),
            regression_envelopes: c.regression_envelopes.load(Ordering::Relaxed),
            regression_errors: c.regression_errors.load(Ordering::Relaxed),
        }
    }

    /// Stops the workers after their current envelope.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for Dispatcher {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

fn next(q: &BoundedQueue<ShadowEnvelope>, stop: &AtomicBool) -> Option<ShadowEnvelope> {
    loop {
        if stop.load(Ordering::Relaxed) {
            return None;
        }
        match q.pop_timeout(POLL) {
            Pop::Item(env) => return Some(env),
            Pop::TimedOut => continue,
            Pop::Closed => return None,
        }
    }
}

/// Posts candidates to a remote regression service.
pub struct HttpCandidateSink {
    client: reqwest::Client,
    url: String,
    token: Option<String>,
    runtime: tokio::runtime::Handle,
}

impl HttpCandidateSink {
    /// `base` is the reporting service root. Must be created inside a
    /// tokio runtime; `push` must then be called from outside it.
    pub fn new(base: &str, token: Option<String>) -> Self {
        HttpCandidateSink {
            client: reqwest::Client::new(),
            url: format!("{}/itzal/candidates", base.trim_end_matches('/')),
            token,
            runtime: tokio::runtime::Handle::current(),
        }
    }
}

impl CandidateSink for HttpCandidateSink {
    fn push(&self, candidates: Vec<CandidatePatch>) {
        if candidates.is_empty() {
            return;
        }
        let mut rb = self.client.post(&self.url).json(&candidates);
        if let Some(t) = &self.token {
            rb = rb.header(crate::reporting::api::TOKEN_HEADER, t.as_str());
        }
        match self.runtime.block_on(rb.send()) {
            Ok(r) if r.status().is_success() => {}
            Ok(r) => tracing::warn!(status = r.status().as_u16(), "candidate upload rejected"),
            Err(e) => tracing::warn!(error = %e, "candidate upload failed"),
        }
    }
}
