// SPDX-License-Identifier: Apache-2.0

//! JSON configuration for the composed system.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app::RouteTable;
use crate::lang::{parse_program, ParseError, Program, Value};
use crate::oracle::{CheckError, CheckSpec, RequestOracle};
use crate::patch::{Budget, ReturnEarlyDefaults};
use crate::regression::{NormalizationRule, Normalizer, RuleError, Thresholds};
use crate::sample;
use crate::state::KvState;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config field `{field}` (line {line}, column {column}): {message}")]
    Field { field: String, line: usize, column: usize, message: String },
    #[error("cannot read handler source {path}: {source}")]
    HandlerFile { path: PathBuf, source: std::io::Error },
    #[error("handler source {path}: {source}")]
    HandlerParse { path: PathBuf, source: ParseError },
    #[error("route for {method} {path} names unknown handler `{handler}`")]
    UnknownRouteHandler { method: String, path: String, handler: String },
    #[error("listen address {0} is used by more than one component")]
    DuplicatePort(SocketAddr),
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub app: AppSection,
    #[serde(default)]
    pub shadower: ShadowerSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub patch: PatchSection,
    #[serde(default)]
    pub regression: RegressionSection,
    #[serde(default)]
    pub reporting: ReportingSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSection {
    #[serde(default = "defaults::app_listen")]
    pub listen: SocketAddr,
    /// Handler source file. The built-in sample is used when absent.
    #[serde(default)]
    pub handlers: Option<PathBuf>,
    #[serde(default)]
    pub routes: Option<RouteTable>,
    /// Initial state, inline.
    #[serde(default)]
    pub seed: Option<BTreeMap<String, Value>>,
    /// Initial state from a JSON file.
    #[serde(default)]
    pub seed_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Duplicates {
    #[serde(default = "defaults::one")]
    pub patch: usize,
    #[serde(default = "defaults::one")]
    pub regression: usize,
}

impl Default for Duplicates {
    fn default() -> Self {
        Duplicates { patch: 1, regression: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowerSection {
    #[serde(default = "defaults::shadower_listen")]
    pub listen: SocketAddr,
    /// Base URL of the production application; defaults to `app.listen`.
    #[serde(default)]
    pub upstream: Option<String>,
    #[serde(default = "defaults::queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default)]
    pub duplicates: Duplicates,
    #[serde(default = "defaults::upstream_timeout_ms")]
    pub upstream_timeout_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "defaults::yes")]
    pub enabled: bool,
    #[serde(default)]
    pub checks: Vec<CheckSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSection {
    #[serde(default = "defaults::budget_ms")]
    pub budget_ms: u64,
    #[serde(default = "defaults::max_patches")]
    pub max_patches: usize,
    #[serde(default = "defaults::pool_size")]
    pub pool_size: usize,
    #[serde(default = "defaults::lease_timeout_ms")]
    pub lease_timeout_ms: u64,
    #[serde(default)]
    pub return_early: ReturnEarlyDefaults,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSection {
    #[serde(default)]
    pub rules: Vec<NormalizationRule>,
    #[serde(default = "defaults::min_patched_line")]
    pub min_patched_line_executions: u64,
    #[serde(default = "defaults::min_executions")]
    pub min_executions: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportingSection {
    #[serde(default = "defaults::reporting_listen")]
    pub listen: SocketAddr,
    /// Approved diffs and the JSON-lines logs go here.
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "defaults::cors_origin")]
    pub cors_origin: String,
    /// When set, decisions require a matching `x-itzal-token` header.
    #[serde(default)]
    pub token: Option<String>,
}

mod defaults {
    use std::net::SocketAddr;
    use std::path::PathBuf;

    pub fn app_listen() -> SocketAddr {
        "127.0.0.1:8081".parse().unwrap()
    }
    pub fn shadower_listen() -> SocketAddr {
        "127.0.0.1:8080".parse().unwrap()
    }
    pub fn reporting_listen() -> SocketAddr {
        "127.0.0.1:8090".parse().unwrap()
    }
    pub fn one() -> usize {
        1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn queue_capacity() -> usize {
        1024
    }
    pub fn upstream_timeout_ms() -> u64 {
        10_000
    }
    pub fn budget_ms() -> u64 {
        5000
    }
    pub fn max_patches() -> usize {
        256
    }
    pub fn pool_size() -> usize {
        2
    }
    pub fn lease_timeout_ms() -> u64 {
        1000
    }
    pub fn min_patched_line() -> u64 {
        10
    }
    pub fn min_executions() -> u64 {
        50
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("itzal-out")
    }
    pub fn cors_origin() -> String {
        "*".to_string()
    }
}

macro_rules! section_default {
    ($($ty:ident),*) => {$(
        impl Default for $ty {
            fn default() -> Self {
                serde_json::from_str("{}").expect("all fields have defaults")
            }
        }
    )*};
}

section_default!(AppSection, ShadowerSection, OracleSection, PatchSection, RegressionSection, ReportingSection);

impl Default for Config {
    fn default() -> Self {
        Config {
            app: AppSection::default(),
            shadower: ShadowerSection::default(),
            oracle: OracleSection::default(),
            patch: PatchSection::default(),
            regression: RegressionSection::default(),
            reporting: ReportingSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Everything the runtime needs, loaded and checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub program: Program,
    pub routes: RouteTable,
    pub seed: KvState,
    pub oracle: RequestOracle,
    pub normalizer: Normalizer,
    pub budget: Budget,
    pub thresholds: Thresholds,
}

impl Config {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Config, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            ConfigError::Field {
                field,
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            }
        })?;
        config.base_dir = base_dir.to_path_buf();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Config::from_json(&text, &base)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn upstream_url(&self) -> String {
        self.shadower
            .upstream
            .clone()
            .unwrap_or_else(|| format!("http://{}", self.app.listen))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve_path(&self.reporting.output_dir)
    }

    /// Rejects two components sharing a non-ephemeral listen address.
    pub fn check_ports(&self) -> Result<(), ConfigError> {
        let mut seen = HashSet::new();
        for addr in [self.app.listen, self.shadower.listen, self.reporting.listen] {
            if addr.port() != 0 && !seen.insert(addr) {
                return Err(ConfigError::DuplicatePort(addr));
            }
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        self.check_ports()?;
        let invalid = |field: &str, message: &str| ConfigError::Invalid {
            field: field.to_string(),
            message: message.to_string(),
        };
        if self.patch.pool_size == 0 {
            return Err(invalid("patch.pool_size", "must be positive"));
        }
        if self.patch.max_patches == 0 {
            return Err(invalid("patch.max_patches", "must be positive"));
        }
        if self.shadower.queue_capacity == 0 {
            return Err(invalid("shadower.queue_capacity", "must be positive"));
        }
        if self.shadower.duplicates.patch == 0 || self.shadower.duplicates.regression == 0 {
            return Err(invalid("shadower.duplicates", "counts must be at least 1"));
        }
        if !(100..=599).contains(&self.patch.return_early.status) {
            return Err(invalid("patch.return_early.status", "must be within 100..=599"));
        }

        let program = match &self.app.handlers {
            None => sample::program(),
            Some(p) => {
                let path = self.resolve_path(p);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::HandlerFile {
                    path: path.clone(),
                    source,
                })?;
                parse_program(&text).map_err(|source| ConfigError::HandlerParse { path, source })?
            }
        };
        let routes = self.app.routes.clone().unwrap_or_else(sample::routes);
        for r in &routes.routes {
            if program.handler(&r.handler).is_none() {
                return Err(ConfigError::UnknownRouteHandler {
                    method: r.method.clone(),
                    path: r.path.clone(),
                    handler: r.handler.clone(),
                });
            }
        }
        let seed = match (&self.app.seed, &self.app.seed_file) {
            (Some(inline), _) => KvState::from_entries(inline.clone()),
            (None, Some(p)) => {
                let path = self.resolve_path(p);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                let entries: BTreeMap<String, Value> =
                    serde_json::from_str(&text).map_err(|e| ConfigError::Field {
                        field: "app.seed_file".into(),
                        line: e.line(),
                        column: e.column(),
                        message: e.to_string(),
                    })?;
                KvState::from_entries(entries)
            }
            (None, None) if self.app.handlers.is_none() => sample::seed_state(),
            (None, None) => KvState::new(),
        };
        let oracle = if self.oracle.enabled {
            RequestOracle::from_specs(&self.oracle.checks)?
        } else {
            RequestOracle::always_success()
        };
        Ok(Resolved {
            program,
            routes,
            seed,
            oracle,
            normalizer: Normalizer::new(&self.regression.rules)?,
            budget: Budget {
                time: std::time::Duration::from_millis(self.patch.budget_ms),
                max_patches: self.patch.max_patches,
            },
            thresholds: Thresholds {
                min_patched_line_executions: self.regression.min_patched_line_executions,
                min_executions: self.regression.min_executions,
            },
        })
    }
}
