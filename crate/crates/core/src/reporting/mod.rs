// SPDX-License-Identifier: Apache-2.0

//! Ranking, developer decisions, persistence and the failure log.

pub mod api;

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::FailurePoint;
use crate::oracle::{FailureContext, FailureKind};
use crate::patch::{PatchId, Patch, TemplateArgs, TemplateKind};
use crate::regression::{
    Decision, DecideError, DecisionKind, Lifecycle, MismatchDetail, PatchRecord, RecordObserver, RegressionService,
    Thresholds,
};

fn rank_order(a: &PatchRecord, b: &PatchRecord) -> std::cmp::Ordering {
    b.patched_line_executions
        .cmp(&a.patched_line_executions)
        .then(b.executions.cmp(&a.executions))
        .then(a.id().cmp(b.id()))
}

/// Records grouped for presentation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ranking {
    /// `Reported` records first, then `Validating`, each ordered by
    /// patched-line executions, total executions, then id.
    pub ranked: Vec<PatchRecord>,
    pub approved: Vec<PatchRecord>,
    pub rejected: Vec<PatchRecord>,
    pub invalidated: Vec<PatchRecord>,
}

pub fn rank(records: &[PatchRecord]) -> Ranking {
    let mut reported = Vec::new();
    let mut validating = Vec::new();
    let mut out = Ranking::default();
    for r in records {
        match r.state {
            Lifecycle::Reported => reported.push(r.clone()),
            Lifecycle::Validating => validating.push(r.clone()),
            Lifecycle::Approved => out.approved.push(r.clone()),
            Lifecycle::Rejected => out.rejected.push(r.clone()),
            Lifecycle::Invalidated => out.invalidated.push(r.clone()),
        }
    }
    for group in [&mut reported, &mut validating, &mut out.approved, &mut out.rejected, &mut out.invalidated] {
        group.sort_by(rank_order);
    }
    out.ranked = reported;
    out.ranked.extend(validating);
    out
}

/// Flat, presentation-oriented view of a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchView {
    /// Position in the ranked list; absent for decided or invalidated
    /// records.
    pub rank: Option<usize>,
    pub id: PatchId,
    pub state: Lifecycle,
    pub kind: TemplateKind,
    pub site: FailurePoint,
    pub args: TemplateArgs,
    pub diff: String,
    pub fixes: u32,
    pub request_id: String,
    pub executions: u64,
    pub patched_line_executions: u64,
    pub thresholds: Thresholds,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub mismatch: Option<MismatchDetail>,
    pub decision: Option<Decision>,
}

impl PatchView {
    pub fn new(record: &PatchRecord, rank: Option<usize>, thresholds: Thresholds) -> Self {
        let p = &record.candidate.patch;
        PatchView {
            rank,
            id: p.id.clone(),
            state: record.state,
            kind: p.kind,
            site: p.site.clone(),
            args: p.args.clone(),
            diff: p.diff.clone(),
            fixes: record.candidate.fixes,
            request_id: record.candidate.request_id.clone(),
            executions: record.executions,
            patched_line_executions: record.patched_line_executions,
            thresholds,
            created_at_ms: record.candidate.created_at_ms,
            updated_at_ms: record.updated_at_ms,
            mismatch: record.mismatch.clone(),
            decision: record.decision.clone(),
        }
    }
}

/// Grouping key for failures.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "site", rename_all = "snake_case")]
pub enum FailureSite {
    Point { point: FailurePoint },
    Status { kind: FailureKind, status: u16 },
}

impl FailureSite {
    pub fn of(ctx: &FailureContext) -> Self {
        match &ctx.point {
            Some(point) => FailureSite::Point { point: point.clone() },
            None => FailureSite::Status { kind: ctx.kind, status: ctx.status },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSummary {
    #[serde(flatten)]
    pub site: FailureSite,
    pub kind: FailureKind,
    pub count: u64,
    pub first_request_id: String,
    pub last_request_id: String,
    pub last_message: String,
    /// Records whose patch targets this site.
    #[serde(default)]
    pub patches: Vec<PatchId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub total: u64,
    /// Sites ordered by count, most frequent first.
    pub sites: Vec<SiteSummary>,
    /// Most recent failures, newest last.
    pub recent: Vec<FailureContext>,
}

struct FailureInner {
    total: u64,
    sites: BTreeMap<FailureSite, SiteSummary>,
    recent: VecDeque<FailureContext>,
}

/// Detected failures with per-site counts.
pub struct FailureLog {
    capacity: usize,
    inner: Mutex<FailureInner>,
}

impl Default for FailureLog {
    fn default() -> Self {
        FailureLog::new(256)
    }
}

impl FailureLog {
    pub fn new(recent_capacity: usize) -> Self {
        FailureLog {
            capacity: recent_capacity.max(1),
            inner: Mutex::new(FailureInner {
                total: 0,
                sites: BTreeMap::new(),
                recent: VecDeque::new(),
            }),
        }
    }

    pub fn record(&self, ctx: &FailureContext) {
        let mut inner = self.inner.lock().unwrap();
        inner.total += 1;
        let site = FailureSite::of(ctx);
        inner
            .sites
            .entry(site.clone())
            .and_modify(|s| {
                s.count += 1;
                s.last_request_id = ctx.request_id.clone();
                s.last_message = ctx.message.clone();
            })
            .or_insert_with(|| SiteSummary {
                site,
                kind: ctx.kind,
                count: 1,
                first_request_id: ctx.request_id.clone(),
                last_request_id: ctx.request_id.clone(),
                last_message: ctx.message.clone(),
                patches: Vec::new(),
            });
        if inner.recent.len() == self.capacity {
            inner.recent.pop_front();
        }
        inner.recent.push_back(ctx.clone());
    }

    pub fn total(&self) -> u64 {
        self.inner.lock().unwrap().total
    }

    pub fn summary(&self) -> FailureSummary {
        let inner = self.inner.lock().unwrap();
        let mut sites: Vec<SiteSummary> = inner.sites.values().cloned().collect();
        sites.sort_by(|a, b| b.count.cmp(&a.count).then(a.site.cmp(&b.site)));
        FailureSummary {
            total: inner.total,
            sites,
            recent: inner.recent.iter().cloned().collect(),
        }
    }
}

const REPORTED_LOG: &str = "reported.jsonl";
const DECISIONS_LOG: &str = "decisions.jsonl";

/// JSON-lines logs plus approved diffs, all under one directory.
pub struct ReportStore {
    dir: PathBuf,
    write: Mutex<()>,
}

impl ReportStore {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ReportStore { dir, write: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn diff_path(&self, id: &PatchId) -> PathBuf {
        self.dir.join(format!("{id}.diff"))
    }

    fn append<T: Serialize>(&self, file: &str, value: &T) -> io::Result<()> {
        let mut line = serde_json::to_string(value).map_err(io::Error::other)?;
        line.push('\n');
        let _guard = self.write.lock().unwrap();
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join(file))?;
        f.write_all(line.as_bytes())?;
        f.flush()
    }

    pub fn append_reported(&self, record: &PatchRecord) -> io::Result<()> {
        self.append(REPORTED_LOG, record)
    }

    pub fn append_decision(&self, decision: &Decision) -> io::Result<()> {
        self.append(DECISIONS_LOG, decision)
    }

    pub fn write_diff(&self, patch: &Patch) -> io::Result<PathBuf> {
        let path = self.diff_path(&patch.id);
        fs::write(&path, &patch.diff)?;
        Ok(path)
    }

    fn read_lines<T: for<'de> Deserialize<'de>>(&self, file: &str) -> io::Result<Vec<T>> {
        let path = self.dir.join(file);
        let f = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut out = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(v) => out.push(v),
                // A torn final line from a crash is skipped rather than fatal.
                Err(e) => tracing::warn!(file = %path.display(), line = n + 1, error = %e, "skipping unreadable log line"),
            }
        }
        Ok(out)
    }

    /// Reported records with their recorded decisions applied.
    pub fn load(&self) -> io::Result<Vec<PatchRecord>> {
        let mut records: BTreeMap<PatchId, PatchRecord> = BTreeMap::new();
        for r in self.read_lines::<PatchRecord>(REPORTED_LOG)? {
            records.insert(r.id().clone(), r);
        }
        for d in self.read_lines::<Decision>(DECISIONS_LOG)? {
            if let Some(r) = records.get_mut(&d.patch_id) {
                r.state = match d.decision {
                    DecisionKind::Approve => Lifecycle::Approved,
                    DecisionKind::Reject => Lifecycle::Rejected,
                };
                r.updated_at_ms = d.at_ms;
                r.decision = Some(d);
            }
        }
        Ok(records.into_values().collect())
    }
}

struct ReportedLogger(Arc<ReportStore>);

impl RecordObserver for ReportedLogger {
    fn on_transition(&self, record: &PatchRecord) {
        if record.state == Lifecycle::Reported {
            if let Err(e) = self.0.append_reported(record) {
                tracing::error!(patch = %record.id(), error = %e, "cannot persist reported patch");
            }
            tracing::info!(patch = %record.id(), kind = ?record.candidate.patch.kind, "patch reported for review");
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Decide(#[from] DecideError),
    #[error("decision recorded but not persisted: {0}")]
    Io(#[from] io::Error),
}

pub struct ReportingService {
    registry: Arc<RegressionService>,
    failures: Arc<FailureLog>,
    store: Option<Arc<ReportStore>>,
}

impl ReportingService {
    /// Restores persisted records into `registry` and starts logging new
    /// `Reported` transitions.
    pub fn new(
        registry: Arc<RegressionService>,
        failures: Arc<FailureLog>,
        store: Option<ReportStore>,
    ) -> io::Result<Self> {
        let store = store.map(Arc::new);
        if let Some(store) = &store {
            let mut restored = 0;
            for record in store.load()? {
                if registry.restore_record(record) {
                    restored += 1;
                }
            }
            if restored > 0 {
                tracing::info!(restored, dir = %store.dir().display(), "restored reported patches");
            }
            registry.add_observer(Arc::new(ReportedLogger(store.clone())));
        }
        Ok(ReportingService { registry, failures, store })
    }

    pub fn registry(&self) -> &Arc<RegressionService> {
        &self.registry
    }

    pub fn failures(&self) -> &Arc<FailureLog> {
        &self.failures
    }

    pub fn store(&self) -> Option<&ReportStore> {
        self.store.as_deref()
    }

    pub fn ranking(&self) -> Ranking {
        rank(&self.registry.records())
    }

    /// Ranked records followed by approved, rejected and invalidated ones.
    pub fn patches(&self) -> Vec<PatchView> {
        let t = self.registry.thresholds();
        let ranking = self.ranking();
        let mut out: Vec<PatchView> = ranking
            .ranked
            .iter()
            .enumerate()
            .map(|(i, r)| PatchView::new(r, Some(i + 1), t))
            .collect();
        for r in ranking.approved.iter().chain(&ranking.rejected).chain(&ranking.invalidated) {
            out.push(PatchView::new(r, None, t));
        }
        out
    }

    pub fn patch(&self, id: &PatchId) -> Option<PatchView> {
        self.patches().into_iter().find(|v| &v.id == id)
    }

    pub fn failure_summary(&self) -> FailureSummary {
        let mut summary = self.failures.summary();
        let records = self.registry.records();
        for site in &mut summary.sites {
            if let FailureSite::Point { point } = &site.site {
                site.patches = records
                    .iter()
                    .filter(|r| &r.candidate.patch.site == point)
                    .map(|r| r.id().clone())
                    .collect();
            }
        }
        summary
    }

    pub fn decide(&self, id: &PatchId, decision: DecisionKind, actor: &str) -> Result<PatchView, ReportError> {
        let record = self.registry.decide(id, decision, actor)?;
        if let Some(store) = &self.store {
            if decision == DecisionKind::Approve {
                let path = store.write_diff(&record.candidate.patch)?;
                tracing::info!(patch = %id, path = %path.display(), "approved patch written");
            }
            if let Some(d) = &record.decision {
                store.append_decision(d)?;
            }
        }
        Ok(PatchView::new(&record, None, self.registry.thresholds()))
    }
}
