// SPDX-License-Identifier: Apache-2.0

//! Budgeted, sequential patch search in a sandbox.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{apply_patch, enumerate_for_failure, CandidatePatch, PatchError, ReturnEarlyDefaults};
use crate::app::StateSource;
use crate::envelope::{ShadowEnvelope, ShadowKind};
use crate::lang::{render_program, FailurePoint, Program};
use crate::oracle::{Observation, RequestOracle, Verdict};
use crate::sandbox::SandboxPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    #[serde(rename = "budget_ms", with = "millis")]
    pub time: Duration,
    pub max_patches: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            time: Duration::from_millis(5000),
            max_patches: 256,
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Receives candidates found by a search.
pub trait CandidateSink: Send + Sync {
    fn push(&self, candidates: Vec<CandidatePatch>);
}

#[derive(Debug, Clone, Default)]
pub struct SearchReport {
    pub enumerated: usize,
    pub tried: usize,
    pub candidates: Vec<CandidatePatch>,
    /// True when this failure point was already searched on this program.
    pub deduplicated: bool,
    pub elapsed: Duration,
}

#[derive(Debug, Default, Clone, Copy, Serialize)]
pub struct SearchStats {
    pub searches: u64,
    pub deduplicated: u64,
    pub patches_tried: u64,
    pub candidates: u64,
}

#[derive(Default)]
struct Counters {
    searches: AtomicU64,
    deduplicated: AtomicU64,
    tried: AtomicU64,
    candidates: AtomicU64,
}

pub struct PatchEngine {
    program: Arc<Program>,
    fingerprint: String,
    pool: SandboxPool,
    oracle: Arc<RequestOracle>,
    states: Arc<dyn StateSource>,
    early: ReturnEarlyDefaults,
    sink: Arc<dyn CandidateSink>,
    searched: Mutex<HashSet<(FailurePoint, String)>>,
    counters: Counters,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl PatchEngine {
    pub fn new(
        program: Arc<Program>,
        pool: SandboxPool,
        oracle: Arc<RequestOracle>,
        states: Arc<dyn StateSource>,
        early: ReturnEarlyDefaults,
        sink: Arc<dyn CandidateSink>,
    ) -> Self {
        let fingerprint = program_fingerprint(&program);
        PatchEngine {
            program,
            fingerprint,
            pool,
            oracle,
            states,
            early,
            sink,
            searched: Mutex::new(HashSet::new()),
            counters: Counters::default(),
        }
    }

    pub fn stats(&self) -> SearchStats {
        SearchStats {
            searches: self.counters.searches.load(Ordering::Relaxed),
            deduplicated: self.counters.deduplicated.load(Ordering::Relaxed),
            patches_tried: self.counters.tried.load(Ordering::Relaxed),
            candidates: self.counters.candidates.load(Ordering::Relaxed),
        }
    }

    /// Tries each enumerated patch against the failing request until the
    /// list or the budget runs out, and pushes the fixes to the sink.
    pub fn search(&self, envelope: &ShadowEnvelope, budget: Budget) -> Result<SearchReport, PatchError> {
        let start = Instant::now();
        if envelope.kind != ShadowKind::ToPatchService {
            return Err(PatchError::WrongEnvelope);
        }
        let Verdict::Failure { context } = &envelope.verdict else {
            return Err(PatchError::MissingFailurePoint);
        };
        let patches = enumerate_for_failure(&self.program, context, &self.early)?;
        let point = context.point.clone().expect("checked by enumerate_for_failure");

        let key = (point, self.fingerprint.clone());
        if !self.searched.lock().unwrap().insert(key.clone()) {
            self.counters.deduplicated.fetch_add(1, Ordering::Relaxed);
            return Ok(SearchReport {
                enumerated: patches.len(),
                deduplicated: true,
                elapsed: start.elapsed(),
                ..Default::default()
            });
        }
        let forget = || {
            self.searched.lock().unwrap().remove(&key);
        };
        self.counters.searches.fetch_add(1, Ordering::Relaxed);

        let snapshot = match envelope
            .snapshot
            .clone()
            .or_else(|| self.states.at_version(context.state_version))
        {
            Some(s) => s,
            None => {
                forget();
                return Err(PatchError::SnapshotUnavailable(context.state_version));
            }
        };

        let mut report = SearchReport {
            enumerated: patches.len(),
            ..Default::default()
        };
        let mut sandbox = None;
        for patch in patches {
            if start.elapsed() >= budget.time || report.tried >= budget.max_patches {
                break;
            }
            let patched = Arc::new(apply_patch(&self.program, &patch)?.program);
            let sb = match sandbox.as_mut() {
                Some(sb) => {
                    crate::sandbox::Sandbox::reset(sb, &snapshot, patched);
                    sb
                }
                None => match self.pool.lease("patch-engine", &snapshot, patched) {
                    Ok(sb) => sandbox.insert(sb),
                    Err(e) => {
                        forget();
                        return Err(PatchError::SandboxUnavailable(e.to_string()));
                    }
                },
            };
            let replay_start = Instant::now();
            let handled = sb.handle(&envelope.request);
            report.tried += 1;
            self.counters.tried.fetch_add(1, Ordering::Relaxed);
            let verdict = self.oracle.judge_observation(&Observation {
                request: &envelope.request,
                response: &handled.response,
                outcome: &handled.outcome,
                state_version: snapshot.state_version,
                latency: Some(replay_start.elapsed()),
            });
            if verdict == Verdict::Success {
                report.candidates.push(CandidatePatch {
                    patch,
                    request_id: envelope.request.request_id.clone(),
                    created_at_ms: now_ms(),
                    fixes: 1,
                    triggering_request: envelope.request.clone(),
                    state_version: snapshot.state_version,
                });
            }
        }
        drop(sandbox);
        self.counters
            .candidates
            .fetch_add(report.candidates.len() as u64, Ordering::Relaxed);
        if !report.candidates.is_empty() {
            self.sink.push(report.candidates.clone());
        }
        report.elapsed = start.elapsed();
        tracing::info!(
            tried = report.tried,
            candidates = report.candidates.len(),
            elapsed_ms = report.elapsed.as_millis() as u64,
            "patch search finished"
        );
        Ok(report)
    }
}

pub fn program_fingerprint(program: &Program) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(render_program(program).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
