//! Topology configuration, read from TOML.
//!
//! ```toml
//! seed = 42
//! fog_count = 1
//! cadence_seconds = 5
//! package_period_seconds = 300
//! retention_seconds = 86400
//! slack_seconds = 120
//! dedup_horizon_windows = 2
//! min_tuples_per_trip = 1
//!
//! [broker]
//! mode = "in-process"          # or "tcp"
//! address = "127.0.0.1:0"
//! high_water_mark = 1024
//! # disconnect_after_messages = 500   (tcp only: drop every connection once)
//!
//! [paths]
//! feed = "feed.csv"            # generated from schedule + corruption when absent
//! schedule = "schedule.toml"
//! out_dir = "out"
//! quarantine = "quarantine"    # relative to out_dir
//!
//! [[edges]]
//! id = "edge1"
//! # source = "edge1.csv"       (otherwise a share of the shared feed)
//!
//! [corruption]                 # optional; rng_seed is derived from `seed`
//! duplicate_rate = 0.01
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::BrokerConfig;
use crate::edge::{EdgeConfig, DEFAULT_PACKAGE_PERIOD};
use crate::feedgen::CorruptionPlan;
use crate::fog::FogConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrokerMode {
    #[default]
    InProcess,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerSection {
    #[serde(default)]
    pub mode: BrokerMode,
    #[serde(default = "default_address")]
    pub address: String,
    #[serde(default = "default_hwm")]
    pub high_water_mark: usize,
    #[serde(default)]
    pub disconnect_after_messages: Option<u64>,
}

fn default_address() -> String {
    "127.0.0.1:0".into()
}

fn default_hwm() -> usize {
    BrokerConfig::default().high_water_mark
}

impl Default for BrokerSection {
    fn default() -> Self {
        Self {
            mode: BrokerMode::InProcess,
            address: default_address(),
            high_water_mark: default_hwm(),
            disconnect_after_messages: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "default_feed")]
    pub feed: PathBuf,
    #[serde(default)]
    pub schedule: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_quarantine")]
    pub quarantine: PathBuf,
}

fn default_feed() -> PathBuf {
    "feed.csv".into()
}

fn default_out() -> PathBuf {
    "out".into()
}

fn default_quarantine() -> PathBuf {
    "quarantine".into()
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { feed: default_feed(), schedule: None, out_dir: default_out(), quarantine: default_quarantine() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub id: String,
    #[serde(default)]
    pub source: Option<PathBuf>,
    /// Overrides the top-level period for this edge.
    #[serde(default)]
    pub package_period_seconds: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub fog_count: usize,
    #[serde(default = "default_cadence")]
    pub cadence_seconds: u32,
    #[serde(default = "default_period")]
    pub package_period_seconds: u32,
    #[serde(default = "default_retention")]
    pub retention_seconds: i64,
    #[serde(default = "default_slack")]
    pub slack_seconds: i64,
    #[serde(default = "default_horizon")]
    pub dedup_horizon_windows: usize,
    #[serde(default = "one_u64")]
    pub min_tuples_per_trip: u64,
    #[serde(default)]
    pub broker: BrokerSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub edges: Vec<EdgeEntry>,
    #[serde(default)]
    pub corruption: Option<CorruptionPlan>,
}

fn one() -> usize {
    1
}

fn one_u64() -> u64 {
    1
}

fn default_cadence() -> u32 {
    5
}

fn default_period() -> u32 {
    DEFAULT_PACKAGE_PERIOD
}

fn default_retention() -> i64 {
    crate::fog::db::DEFAULT_RETENTION_SECONDS
}

fn default_slack() -> i64 {
    crate::fog::clean::DEFAULT_SLACK_SECONDS
}

fn default_horizon() -> usize {
    2
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fog_count: 1,
            cadence_seconds: default_cadence(),
            package_period_seconds: default_period(),
            retention_seconds: default_retention(),
            slack_seconds: default_slack(),
            dedup_horizon_windows: default_horizon(),
            min_tuples_per_trip: 1,
            broker: BrokerSection::default(),
            paths: PathsSection::default(),
            edges: vec![EdgeEntry { id: "edge1".into(), source: None, package_period_seconds: None }],
            corruption: None,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl TopologyConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Parses, resolves relative paths against `base` and validates.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: TopologyConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.paths.feed = resolve(base, &self.paths.feed);
        self.paths.schedule = self.paths.schedule.as_deref().map(|p| resolve(base, p));
        self.paths.out_dir = resolve(base, &self.paths.out_dir);
        for e in &mut self.edges {
            e.source = e.source.as_deref().map(|p| resolve(base, p));
        }
    }

    /// Collects every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.edges.is_empty() {
            errs.push("at least one [[edges]] entry is required".to_string());
        }
        if self.fog_count == 0 {
            errs.push("fog_count must be at least 1".into());
        }
        if self.fog_count > self.edges.len().max(1) {
            errs.push(format!(
                "fog_count {} exceeds the number of edges {}; idle fog nodes are not supported",
                self.fog_count,
                self.edges.len()
            ));
        }
        let positive = [
            ("cadence_seconds", i64::from(self.cadence_seconds)),
            ("package_period_seconds", i64::from(self.package_period_seconds)),
            ("retention_seconds", self.retention_seconds),
            ("dedup_horizon_windows", self.dedup_horizon_windows as i64),
            ("min_tuples_per_trip", self.min_tuples_per_trip as i64),
            ("broker.high_water_mark", self.broker.high_water_mark as i64),
        ];
        for (name, v) in positive {
            if v <= 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.slack_seconds < 0 {
            errs.push("slack_seconds must not be negative".into());
        }
        let mut ids = BTreeSet::new();
        for e in &self.edges {
            if e.id.is_empty() || e.id.contains(['/', '$', ' ']) {
                errs.push(format!("edge id {:?} must be non-empty without '/', '$' or spaces", e.id));
            }
            if !ids.insert(e.id.as_str()) {
                errs.push(format!("duplicate edge id {:?}", e.id));
            }
            if e.package_period_seconds == Some(0) {
                errs.push(format!("edge {}: package_period_seconds must be positive", e.id));
            }
        }
        if self.broker.mode == BrokerMode::Tcp && self.broker.address.parse::<SocketAddr>().is_err() {
            errs.push(format!("broker.address {:?} is not a socket address", self.broker.address));
        }
        if self.broker.disconnect_after_messages.is_some() && self.broker.mode != BrokerMode::Tcp {
            errs.push("broker.disconnect_after_messages needs mode = \"tcp\"".into());
        }
        if let Some(plan) = &self.corruption {
            if let Err(e) = plan.validate() {
                errs.push(e.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn edge_configs(&self) -> Vec<EdgeConfig> {
        self.edges
            .iter()
            .map(|e| EdgeConfig {
                edge_id: e.id.clone(),
                package_period_seconds: e.package_period_seconds.unwrap_or(self.package_period_seconds),
                source: e.source.clone(),
            })
            .collect()
    }

    pub fn fog_name(k: usize) -> String {
        format!("fog-{k}")
    }

    /// Edge ids served by fog `k`: every edge whose index is `k` modulo `fog_count`.
    pub fn edges_of_fog(&self, k: usize) -> Vec<String> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(i, _)| i % self.fog_count.max(1) == k)
            .map(|(_, e)| e.id.clone())
            .collect()
    }

    pub fn fog_config(&self, k: usize) -> FogConfig {
        FogConfig {
            fog_node: Self::fog_name(k),
            cadence_seconds: self.cadence_seconds,
            slack_seconds: self.slack_seconds,
            package_period_seconds: self.package_period_seconds,
            retention_seconds: self.retention_seconds,
            dedup_horizon_windows: self.dedup_horizon_windows,
            ..FogConfig::default()
        }
    }

    pub fn broker_config(&self) -> BrokerConfig {
        BrokerConfig { high_water_mark: self.broker.high_water_mark, ..BrokerConfig::default() }
    }

    /// The corruption plan with its seed taken from the topology seed.
    pub fn corruption_plan(&self) -> Option<CorruptionPlan> {
        self.corruption.clone().map(|p| CorruptionPlan { rng_seed: self.seed, ..p })
    }

    pub fn quarantine_dir(&self) -> PathBuf {
        resolve(&self.paths.out_dir, &self.paths.quarantine)
    }
}
