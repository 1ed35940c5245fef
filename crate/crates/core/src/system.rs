// SPDX-License-Identifier: Apache-2.0

//! Wires every component into one process.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::Context;
use serde_json::json;

use crate::app::{AppRuntime, StateSource};
use crate::config::{Config, Resolved};
use crate::envelope::EnvelopeSink;
use crate::patch::{Budget, PatchEngine};
use crate::regression::RegressionService;
use crate::reporting::api::{self, ApiState};
use crate::reporting::{FailureLog, ReportStore, ReportingService};
use crate::sandbox::SandboxPool;
use crate::server::{self, Served};
use crate::shadower::{BoundedQueue, DispatchStats, Dispatcher, Shadower, Upstream};

pub struct System {
    pub config: Config,
    pub app: Arc<AppRuntime>,
    pub pool: SandboxPool,
    pub engine: Arc<PatchEngine>,
    pub regression: Arc<RegressionService>,
    pub reporting: Arc<ReportingService>,
    pub shadower: Arc<Shadower>,
    pub budget: Budget,
    dispatcher: Mutex<Option<Dispatcher>>,
    last_dispatch: Mutex<DispatchStats>,
}

impl System {
    /// Builds the components. Persisted reports under the configured output
    /// directory are restored.
    pub fn build(config: &Config, upstream_of: impl FnOnce(&Arc<AppRuntime>) -> Upstream) -> anyhow::Result<System> {
        let Resolved {
            program,
            routes,
            seed,
            oracle,
            normalizer,
            budget,
            thresholds,
        } = config.resolve()?;
        let app = Arc::new(AppRuntime::production(program, routes.clone(), seed));
        let states: Arc<dyn StateSource> = app.clone();
        let program = app.program();
        let pool = SandboxPool::new(
            config.patch.pool_size,
            routes,
            Duration::from_millis(config.patch.lease_timeout_ms),
        );
        let regression = Arc::new(RegressionService::new(
            program.clone(),
            pool.clone(),
            states.clone(),
            normalizer,
            thresholds,
        ));
        let oracle = Arc::new(oracle);
        let engine = Arc::new(PatchEngine::new(
            program,
            pool.clone(),
            oracle.clone(),
            states,
            config.patch.return_early.clone(),
            regression.clone(),
        ));
        let failures = Arc::new(FailureLog::default());
        let out = config.output_dir();
        let store = ReportStore::open(&out).with_context(|| format!("cannot open output directory {}", out.display()))?;
        let reporting = Arc::new(
            ReportingService::new(regression.clone(), failures.clone(), Some(store))
                .with_context(|| format!("cannot restore reports from {}", out.display()))?,
        );
        let cap = config.shadower.queue_capacity;
        let shadower = Arc::new(Shadower::new(
            upstream_of(&app),
            (*oracle).clone(),
            config.shadower.duplicates,
            Arc::new(BoundedQueue::new(cap)),
            Arc::new(BoundedQueue::new(cap)),
            failures,
        ));
        Ok(System {
            config: config.clone(),
            app,
            pool,
            engine,
            regression,
            reporting,
            shadower,
            budget,
            dispatcher: Mutex::new(None),
            last_dispatch: Mutex::new(DispatchStats::default()),
        })
    }

    /// In-process system whose proxy calls the runtime directly.
    pub fn local(config: &Config) -> anyhow::Result<System> {
        System::build(config, |app| Upstream::Local(app.clone()))
    }

    pub fn start_workers(&self) {
        let mut d = self.dispatcher.lock().unwrap();
        if d.is_none() {
            *d = Some(Dispatcher::start(
                self.shadower.patch_queue().clone(),
                self.shadower.regression_queue().clone(),
                self.engine.clone(),
                self.regression.clone(),
                self.budget,
            ));
        }
    }

    pub fn stop_workers(&self) {
        if let Some(d) = self.dispatcher.lock().unwrap().take() {
            *self.last_dispatch.lock().unwrap() = d.stats();
            d.shutdown();
        }
    }

    pub fn dispatch_stats(&self) -> DispatchStats {
        match &*self.dispatcher.lock().unwrap() {
            Some(d) => d.stats(),
            None => *self.last_dispatch.lock().unwrap(),
        }
    }

    /// Blocks until both queues are empty and stay empty for a moment, or
    /// `timeout` passes. Returns whether the queues drained.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        let mut quiet = 0;
        while std::time::Instant::now() < deadline {
            let s = self.shadower.stats();
            let d = self.dispatch_stats();
            let handled = d.patch_envelopes + d.regression_envelopes;
            let popped = s.patch_queue.popped + s.regression_queue.popped;
            if s.patch_queue.len == 0 && s.regression_queue.len == 0 && handled >= popped {
                quiet += 1;
                if quiet >= 3 {
                    return true;
                }
            } else {
                quiet = 0;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        false
    }

    pub fn metrics(&self) -> serde_json::Value {
        json!({
            "shadower": self.shadower.stats(),
            "dispatch": self.dispatch_stats(),
            "sandbox_pool": self.pool.stats(),
            "patch_search": self.engine.stats(),
            "regression": self.regression.stats(),
            "records": {
                "validating": self.regression.count_in(crate::regression::Lifecycle::Validating),
                "reported": self.regression.count_in(crate::regression::Lifecycle::Reported),
                "invalidated": self.regression.count_in(crate::regression::Lifecycle::Invalidated),
                "approved": self.regression.count_in(crate::regression::Lifecycle::Approved),
                "rejected": self.regression.count_in(crate::regression::Lifecycle::Rejected),
            },
            "failures": self.reporting.failures().total(),
            "production_state_version": self.app.state_version(),
        })
    }

    pub fn api_state(self: &Arc<Self>) -> ApiState {
        let me = self.clone();
        ApiState {
            reporting: self.reporting.clone(),
            metrics: Arc::new(move || me.metrics()),
            patch_intake: Some(self.shadower.patch_queue().clone() as Arc<dyn EnvelopeSink>),
            cors_origin: Some(self.config.reporting.cors_origin.clone()),
            token: self.config.reporting.token.clone(),
        }
    }
}

impl Drop for System {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

/// A system with its three listeners bound and serving.
pub struct Running {
    pub system: Arc<System>,
    pub app: Served,
    pub proxy: Served,
    pub reporting: Served,
}

impl Running {
    /// Binds the configured addresses (port 0 picks a free port), points the
    /// proxy at the bound application unless an upstream is configured, and
    /// starts the workers.
    pub async fn start(config: &Config) -> anyhow::Result<Running> {
        config.check_ports()?;
        let app_l = server::bind(config.app.listen)
            .await
            .with_context(|| format!("cannot bind app listener {}", config.app.listen))?;
        let proxy_l = server::bind(config.shadower.listen)
            .await
            .with_context(|| format!("cannot bind proxy listener {}", config.shadower.listen))?;
        let rep_l = server::bind(config.reporting.listen)
            .await
            .with_context(|| format!("cannot bind reporting listener {}", config.reporting.listen))?;
        let app_addr = app_l.local_addr()?;
        let upstream_url = config
            .shadower
            .upstream
            .clone()
            .unwrap_or_else(|| format!("http://{app_addr}"));
        let timeout = Duration::from_millis(config.shadower.upstream_timeout_ms);
        let system = Arc::new(System::build(config, |_| Upstream::http(upstream_url, timeout))?);
        system.start_workers();
        let app = server::spawn_router(app_l, server::app_router(system.app.clone()), "app")?;
        let proxy = server::spawn_router(proxy_l, server::proxy_router(system.shadower.clone()), "proxy")?;
        let reporting = server::spawn_router(rep_l, api::router(system.api_state()), "reporting")?;
        Ok(Running { system, app, proxy, reporting })
    }

    pub fn proxy_url(&self) -> String {
        format!("http://{}", self.proxy.addr)
    }

    pub fn app_url(&self) -> String {
        format!("http://{}", self.app.addr)
    }

    pub fn reporting_url(&self) -> String {
        format!("http://{}", self.reporting.addr)
    }

    pub fn shutdown(self) {
        self.app.task.abort();
        self.proxy.task.abort();
        self.reporting.task.abort();
        self.system.stop_workers();
    }
}
