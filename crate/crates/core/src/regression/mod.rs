// SPDX-License-Identifier: Apache-2.0

//! Live regression testing of candidate patches.
//!
//! Every successful production request is replayed against each candidate
//! still in `Validating`. A single output mismatch invalidates the
//! candidate for good; enough matching replays that exercise the patched
//! line promote it to `Reported`.

mod normalize;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use normalize::{compare, normalize, Comparison, NormalizationRule, Normalizer, RuleError};

use crate::app::StateSource;
use crate::envelope::{ShadowEnvelope, ShadowKind};
use crate::lang::{ExecOutcome, Program};
use crate::message::{Request, Response};
use crate::patch::{apply_patch, now_ms, CandidatePatch, CandidateSink, PatchId, PatchedProgram};
use crate::sandbox::{Sandbox, SandboxPool};
use crate::state::StateSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lifecycle {
    Validating,
    Invalidated,
    Reported,
    Approved,
    Rejected,
}

impl Lifecycle {
    pub fn is_terminal(self) -> bool {
        matches!(self, Lifecycle::Invalidated | Lifecycle::Approved | Lifecycle::Rejected)
    }

    pub fn can_become(self, next: Lifecycle) -> bool {
        use Lifecycle::*;
        matches!(
            (self, next),
            (Validating, Invalidated) | (Validating, Reported) | (Reported, Approved) | (Reported, Rejected)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub patch_id: PatchId,
    pub decision: DecisionKind,
    pub actor: String,
    pub at_ms: u64,
}

/// The first regression that invalidated a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchDetail {
    pub detail: String,
    pub request: Request,
    pub production: Response,
    pub patched: Response,
    pub state_version: u64,
    /// State the replay ran against; kept in memory only.
    #[serde(skip)]
    pub snapshot: Option<Arc<StateSnapshot>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub candidate: CandidatePatch,
    pub state: Lifecycle,
    /// Matching regression replays.
    pub executions: u64,
    /// Matching replays in which the patched statement ran.
    pub patched_line_executions: u64,
    pub mismatch: Option<MismatchDetail>,
    pub decision: Option<Decision>,
    pub updated_at_ms: u64,
}

impl PatchRecord {
    pub fn new(candidate: CandidatePatch) -> Self {
        PatchRecord {
            candidate,
            state: Lifecycle::Validating,
            executions: 0,
            patched_line_executions: 0,
            mismatch: None,
            decision: None,
            updated_at_ms: now_ms(),
        }
    }

    pub fn id(&self) -> &PatchId {
        &self.candidate.patch.id
    }

    fn transition(&mut self, next: Lifecycle) -> bool {
        if !self.state.can_become(next) {
            return false;
        }
        self.state = next;
        self.updated_at_ms = now_ms();
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub min_patched_line_executions: u64,
    pub min_executions: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            min_patched_line_executions: 10,
            min_executions: 50,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecideError {
    #[error("unknown patch {0}")]
    UnknownPatch(PatchId),
    #[error("patch {id} is {state:?}, not Reported")]
    NotReportable { id: PatchId, state: Lifecycle },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("envelope is not addressed to the regression service")]
    WrongEnvelope,
    #[error("envelope carries no production response")]
    MissingResponse,
}

/// Notified on lifecycle changes, outside the registry lock.
pub trait RecordObserver: Send + Sync {
    fn on_transition(&self, record: &PatchRecord);
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckReport {
    pub replayed: usize,
    pub matched: usize,
    pub invalidated: Vec<PatchId>,
    pub promoted: Vec<PatchId>,
    /// Records skipped because no sandbox was free.
    pub skipped: usize,
}

#[derive(Debug, Default, Clone, Copy, Serialize)]
pub struct RegressionStats {
    pub checks: u64,
    pub replays: u64,
    pub skipped_replays: u64,
    pub rejected_candidates: u64,
}

struct Slot {
    record: PatchRecord,
    patched: Arc<PatchedProgram>,
}

pub struct RegressionService {
    program: Arc<Program>,
    pool: SandboxPool,
    states: Arc<dyn StateSource>,
    normalizer: Normalizer,
    thresholds: Thresholds,
    records: Mutex<BTreeMap<PatchId, Slot>>,
    observers: RwLock<Vec<Arc<dyn RecordObserver>>>,
    checks: AtomicU64,
    replays: AtomicU64,
    skipped: AtomicU64,
    rejected: AtomicU64,
}

enum ReplayResult {
    Done {
        id: PatchId,
        comparison: Comparison,
        patched_line_ran: bool,
        patched: Response,
    },
    Skipped,
}

impl RegressionService {
    pub fn new(
        program: Arc<Program>,
        pool: SandboxPool,
        states: Arc<dyn StateSource>,
        normalizer: Normalizer,
        thresholds: Thresholds,
    ) -> Self {
        RegressionService {
            program,
            pool,
            states,
            normalizer,
            thresholds,
            records: Mutex::new(BTreeMap::new()),
            observers: RwLock::new(Vec::new()),
            checks: AtomicU64::new(0),
            replays: AtomicU64::new(0),
            skipped: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        }
    }

    pub fn add_observer(&self, observer: Arc<dyn RecordObserver>) {
        self.observers.write().unwrap().push(observer);
    }

    fn notify(&self, records: &[PatchRecord]) {
        let observers = self.observers.read().unwrap();
        for r in records {
            for o in observers.iter() {
                o.on_transition(r);
            }
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn stats(&self) -> RegressionStats {
        RegressionStats {
            checks: self.checks.load(Ordering::Relaxed),
            replays: self.replays.load(Ordering::Relaxed),
            skipped_replays: self.skipped.load(Ordering::Relaxed),
            rejected_candidates: self.rejected.load(Ordering::Relaxed),
        }
    }

    /// Adds a candidate, or bumps the fix count of an existing record.
    pub fn register(&self, candidate: CandidatePatch) {
        let mut records = self.records.lock().unwrap();
        if let Some(slot) = records.get_mut(&candidate.patch.id) {
            slot.record.candidate.fixes += candidate.fixes.max(1);
            slot.record.updated_at_ms = now_ms();
            return;
        }
        match apply_patch(&self.program, &candidate.patch) {
            Ok(patched) => {
                let id = candidate.patch.id.clone();
                records.insert(
                    id,
                    Slot {
                        record: PatchRecord::new(candidate),
                        patched: Arc::new(patched),
                    },
                );
            }
            Err(e) => {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(patch = %candidate.patch.id, error = %e, "candidate does not apply to the production program");
            }
        }
    }

    /// Reinstates a persisted record as-is.
    pub fn restore_record(&self, record: PatchRecord) -> bool {
        let Ok(patched) = apply_patch(&self.program, &record.candidate.patch) else {
            return false;
        };
        self.records.lock().unwrap().insert(
            record.id().clone(),
            Slot {
                record,
                patched: Arc::new(patched),
            },
        );
        true
    }

    pub fn record(&self, id: &PatchId) -> Option<PatchRecord> {
        self.records.lock().unwrap().get(id).map(|s| s.record.clone())
    }

    /// Consistent copy of all records.
    pub fn records(&self) -> Vec<PatchRecord> {
        self.records.lock().unwrap().values().map(|s| s.record.clone()).collect()
    }

    pub fn count_in(&self, state: Lifecycle) -> usize {
        self.records.lock().unwrap().values().filter(|s| s.record.state == state).count()
    }

    /// Replays the envelope's request against every `Validating` record and
    /// compares with the production response.
    pub fn check(&self, envelope: &ShadowEnvelope) -> Result<CheckReport, CheckError> {
        if envelope.kind != ShadowKind::ToRegression {
            return Err(CheckError::WrongEnvelope);
        }
        let production = envelope.response.as_ref().ok_or(CheckError::MissingResponse)?;
        self.checks.fetch_add(1, Ordering::Relaxed);
        let targets: Vec<(PatchId, Arc<PatchedProgram>)> = self
            .records
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, s)| s.record.state == Lifecycle::Validating)
            .map(|(id, s)| (id.clone(), s.patched.clone()))
            .collect();
        let mut report = CheckReport::default();
        if targets.is_empty() {
            return Ok(report);
        }
        let snapshot = envelope
            .snapshot
            .clone()
            .or_else(|| self.states.at_version(envelope.state_version))
            .unwrap_or_else(|| self.states.latest());

        let workers = self.pool.size().min(targets.len()).max(1);
        let chunk = targets.len().div_ceil(workers);
        let results: Vec<ReplayResult> = std::thread::scope(|scope| {
            let handles: Vec<_> = targets
                .chunks(chunk)
                .map(|part| {
                    let snapshot = &snapshot;
                    scope.spawn(move || self.replay_chunk(part, &envelope.request, production, snapshot))
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("replay worker panicked")).collect()
        });

        let mut changed = Vec::new();
        {
            let mut records = self.records.lock().unwrap();
            for result in results {
                let ReplayResult::Done { id, comparison, patched_line_ran, patched } = result else {
                    report.skipped += 1;
                    continue;
                };
                report.replayed += 1;
                let Some(slot) = records.get_mut(&id) else { continue };
                let record = &mut slot.record;
                if record.state != Lifecycle::Validating {
                    continue;
                }
                match comparison {
                    Comparison::Match => {
                        report.matched += 1;
                        record.executions += 1;
                        if patched_line_ran {
                            record.patched_line_executions += 1;
                        }
                        record.updated_at_ms = now_ms();
                        if record.patched_line_executions >= self.thresholds.min_patched_line_executions
                            && record.executions >= self.thresholds.min_executions
                            && record.transition(Lifecycle::Reported)
                        {
                            report.promoted.push(id.clone());
                            changed.push(record.clone());
                        }
                    }
                    Comparison::Mismatch { detail } => {
                        record.mismatch = Some(MismatchDetail {
                            detail,
                            request: envelope.request.clone(),
                            production: production.clone(),
                            patched,
                            state_version: snapshot.state_version,
                            snapshot: Some(snapshot.clone()),
                        });
                        record.transition(Lifecycle::Invalidated);
                        report.invalidated.push(id.clone());
                        changed.push(record.clone());
                    }
                }
            }
        }
        self.replays.fetch_add(report.replayed as u64, Ordering::Relaxed);
        self.skipped.fetch_add(report.skipped as u64, Ordering::Relaxed);
        self.notify(&changed);
        Ok(report)
    }

    fn replay_chunk(
        &self,
        part: &[(PatchId, Arc<PatchedProgram>)],
        request: &Request,
        production: &Response,
        snapshot: &Arc<StateSnapshot>,
    ) -> Vec<ReplayResult> {
        let mut sandbox: Option<Sandbox> = None;
        let mut out = Vec::with_capacity(part.len());
        for (id, patched) in part {
            let program = Arc::new(patched.program.clone());
            let sb = match sandbox.as_mut() {
                Some(sb) => {
                    sb.reset(snapshot, program);
                    sb
                }
                None => match self.pool.lease("regression", snapshot, program) {
                    Ok(sb) => sandbox.insert(sb),
                    Err(e) => {
                        tracing::debug!(error = %e, "regression replay skipped");
                        out.push(ReplayResult::Skipped);
                        continue;
                    }
                },
            };
            let handled = sb.handle(request);
            let comparison = match &handled.outcome {
                ExecOutcome::Faulted { fault } => Comparison::Mismatch {
                    detail: format!("patched replay faulted: {}", fault.message),
                },
                ExecOutcome::Completed { .. } => compare(production, &handled.response, &self.normalizer),
            };
            let patched_line_ran = handled.handler.as_deref() == Some(patched.handler.as_str())
                && handled.executed_lines.contains(&patched.patched_line);
            out.push(ReplayResult::Done {
                id: id.clone(),
                comparison,
                patched_line_ran,
                patched: handled.response,
            });
        }
        out
    }

    /// Re-runs the stored mismatch of an invalidated record in a fresh
    /// sandbox.
    pub fn replay_mismatch(&self, id: &PatchId) -> Option<Comparison> {
        let (mismatch, patched) = {
            let records = self.records.lock().unwrap();
            let slot = records.get(id)?;
            (slot.record.mismatch.clone()?, slot.patched.clone())
        };
        let snapshot = mismatch
            .snapshot
            .clone()
            .or_else(|| self.states.at_version(mismatch.state_version))?;
        let sb = self.pool.lease("mismatch-replay", &snapshot, Arc::new(patched.program.clone())).ok()?;
        let handled = sb.handle(&mismatch.request);
        Some(match &handled.outcome {
            ExecOutcome::Faulted { fault } => Comparison::Mismatch {
                detail: format!("patched replay faulted: {}", fault.message),
            },
            ExecOutcome::Completed { .. } => compare(&mismatch.production, &handled.response, &self.normalizer),
        })
    }

    /// Records a developer decision on a `Reported` record.
    pub fn decide(&self, id: &PatchId, decision: DecisionKind, actor: &str) -> Result<PatchRecord, DecideError> {
        let record = {
            let mut records = self.records.lock().unwrap();
            let slot = records.get_mut(id).ok_or_else(|| DecideError::UnknownPatch(id.clone()))?;
            let next = match decision {
                DecisionKind::Approve => Lifecycle::Approved,
                DecisionKind::Reject => Lifecycle::Rejected,
            };
            if slot.record.state != Lifecycle::Reported || !slot.record.transition(next) {
                return Err(DecideError::NotReportable {
                    id: id.clone(),
                    state: slot.record.state,
                });
            }
            slot.record.decision = Some(Decision {
                patch_id: id.clone(),
                decision,
                actor: actor.to_string(),
                at_ms: now_ms(),
            });
            slot.record.clone()
        };
        self.notify(std::slice::from_ref(&record));
        Ok(record)
    }
}

impl CandidateSink for RegressionService {
    fn push(&self, candidates: Vec<CandidatePatch>) {
        for c in candidates {
            self.register(c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::FailurePoint;
    use crate::patch::{Patch, TemplateArgs, TemplateKind};
    use crate::{app::AppRuntime, sample};
    use std::time::Duration;

    fn site() -> FailurePoint {
        FailurePoint { handler: "users".into(), line: 2, expr_index: 0, variable: "u".into() }
    }

    fn candidate(kind: TemplateKind, args: TemplateArgs) -> CandidatePatch {
        let patch = Patch::new(&sample::program(), kind, site(), args).unwrap();
        CandidatePatch {
            patch,
            request_id: "r0".into(),
            created_at_ms: 0,
            fixes: 1,
            triggering_request: Request::get("/users?id=ghost"),
            state_version: 0,
        }
    }

    fn service(thresholds: Thresholds) -> (Arc<AppRuntime>, RegressionService) {
        let app = Arc::new(sample::production_app());
        let pool = SandboxPool::new(2, sample::routes(), Duration::from_millis(500));
        let svc = RegressionService::new(Arc::new(sample::program()), pool, app.clone(), Normalizer::default(), thresholds);
        (app, svc)
    }

    fn envelope(app: &AppRuntime, target: &str) -> ShadowEnvelope {
        let request = Request::get(target);
        let h = app.handle_traced(&request);
        ShadowEnvelope {
            kind: ShadowKind::ToRegression,
            request,
            response: Some(h.response),
            verdict: crate::oracle::Verdict::Success,
            state_version: h.pre_state_version,
            snapshot: None,
            attempts: 0,
        }
    }

    fn early() -> TemplateArgs {
        TemplateArgs::Early { status: 200, body: String::new() }
    }

    #[test]
    fn register_and_merge() {
        let (_, svc) = service(Thresholds::default());
        let c = candidate(TemplateKind::ReturnEarly, early());
        svc.register(c.clone());
        let r = svc.record(&c.patch.id).unwrap();
        assert_eq!((r.state, r.executions, r.candidate.fixes), (Lifecycle::Validating, 0, 1));
        svc.register(c.clone());
        assert_eq!(svc.records().len(), 1);
        assert_eq!(svc.record(&c.patch.id).unwrap().candidate.fixes, 2);
    }

    #[test]
    fn good_patch_on_unrelated_request() {
        let app = Arc::new(crate::app::AppRuntime::production(
            crate::lang::parse_program(&format!("{}\nhandler ping {{ return 200, \"pong\"; }}", sample::USERS_HANDLER)).unwrap(),
            crate::app::RouteTable::new(vec![
                crate::app::Route { method: "GET".into(), path: "/users".into(), handler: "users".into() },
                crate::app::Route { method: "GET".into(), path: "/ping".into(), handler: "ping".into() },
            ]),
            sample::seed_state(),
        ));
        let pool = SandboxPool::new(2, app.routes().clone(), Duration::from_millis(500));
        let svc = RegressionService::new(app.program(), pool, app.clone(), Normalizer::default(), Thresholds::default());
        let c = {
            let patch = Patch::new(&app.program(), TemplateKind::ReturnEarly, site(), early()).unwrap();
            CandidatePatch { patch, request_id: "r".into(), created_at_ms: 0, fixes: 1, triggering_request: Request::get("/users"), state_version: 0 }
        };
        svc.register(c.clone());
        let report = svc.check(&envelope(&app, "/ping")).unwrap();
        assert_eq!(report.matched, 1);
        let r = svc.record(&c.patch.id).unwrap();
        assert_eq!((r.executions, r.patched_line_executions), (1, 0));

        svc.check(&envelope(&app, "/users?id=ada")).unwrap();
        let r = svc.record(&c.patch.id).unwrap();
        assert_eq!((r.executions, r.patched_line_executions), (2, 1));
    }

    #[test]
    fn default_substitution_is_invalidated() {
        let (app, svc) = service(Thresholds::default());
        let c = candidate(TemplateKind::ReplaceWithDefault, TemplateArgs::Default { value: crate::patch::DefaultValue::EmptyMap });
        svc.register(c.clone());
        let env = envelope(&app, "/users?id=ada");
        let report = svc.check(&env).unwrap();
        assert_eq!(report.invalidated, vec![c.patch.id.clone()]);
        let r = svc.record(&c.patch.id).unwrap();
        assert_eq!(r.state, Lifecycle::Invalidated);
        let m = r.mismatch.unwrap();
        assert_eq!((m.production.body_text().as_str(), m.patched.body_text().as_str()), ("Ada", ""));
        assert!(matches!(svc.replay_mismatch(&c.patch.id), Some(Comparison::Mismatch { .. })));

        // Invalidated records are not replayed again.
        let again = svc.check(&env).unwrap();
        assert_eq!(again.replayed, 0);
        svc.register(c.clone());
        assert_eq!(svc.record(&c.patch.id).unwrap().state, Lifecycle::Invalidated);
    }

    #[test]
    fn promotion_thresholds() {
        let (app, svc) = service(Thresholds { min_patched_line_executions: 2, min_executions: 3 });
        let c = candidate(TemplateKind::SkipStatement, TemplateArgs::None);
        svc.register(c.clone());
        for i in 0..3 {
            let report = svc.check(&envelope(&app, "/users?id=grace")).unwrap();
            assert_eq!(report.promoted.is_empty(), i < 2);
        }
        assert_eq!(svc.record(&c.patch.id).unwrap().state, Lifecycle::Reported);
        // Reported records no longer count toward validation.
        assert_eq!(svc.check(&envelope(&app, "/users?id=grace")).unwrap().replayed, 0);
    }

    #[test]
    fn decide_rules() {
        let (app, svc) = service(Thresholds { min_patched_line_executions: 1, min_executions: 1 });
        let c = candidate(TemplateKind::ReturnEarly, early());
        svc.register(c.clone());
        let id = c.patch.id.clone();
        assert!(matches!(svc.decide(&id, DecisionKind::Approve, "dev"), Err(DecideError::NotReportable { .. })));
        svc.check(&envelope(&app, "/users?id=ada")).unwrap();
        let rec = svc.decide(&id, DecisionKind::Reject, "dev").unwrap();
        assert_eq!(rec.state, Lifecycle::Rejected);
        assert!(matches!(svc.decide(&id, DecisionKind::Approve, "dev"), Err(DecideError::NotReportable { .. })));
        let unknown = PatchId("nope".into());
        assert_eq!(svc.decide(&unknown, DecisionKind::Approve, "dev"), Err(DecideError::UnknownPatch(unknown.clone())));
    }

    #[test]
    fn wrong_envelopes() {
        let (app, svc) = service(Thresholds::default());
        let mut env = envelope(&app, "/users?id=ada");
        env.kind = ShadowKind::ToPatchService;
        assert_eq!(svc.check(&env), Err(CheckError::WrongEnvelope));
        env.kind = ShadowKind::ToRegression;
        env.response = None;
        assert_eq!(svc.check(&env), Err(CheckError::MissingResponse));
    }

    #[test]
    fn lifecycle_table() {
        use Lifecycle::*;
        let all = [Validating, Invalidated, Reported, Approved, Rejected];
        for from in all {
            for to in all {
                if from.is_terminal() {
                    assert!(!from.can_become(to));
                }
            }
        }
        assert!(!Reported.can_become(Invalidated));
        assert!(!Validating.can_become(Approved));
    }
}
