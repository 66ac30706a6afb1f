//! Edge node emulator: buffers raw records as they arrive and ships one
//! [`StreamPackage`] per clock period. Records are forwarded verbatim.
//!
//! Windows follow arrival time. In replay the arrival clock comes from
//! [`ReplayClock`], which tracks the feed's own timestamps but ignores
//! outliers, so a corrupted or late record never jumps the clock.

use std::collections::VecDeque;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{control_topic, packages_topic, Backoff, BrokerError, Link, Producer};
use crate::model::{parse_timestamp, split_record, Field, StreamPackage, Timestamp, FIELD_COUNT};

pub const DEFAULT_PACKAGE_PERIOD: u32 = 300;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("edge {0}: package_period_seconds must be at least 1")]
    InvalidPeriod(String),
    #[error("edge {edge}: {source}")]
    Broker {
        edge: String,
        #[source]
        source: BrokerError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub edge_id: String,
    #[serde(default = "default_period")]
    pub package_period_seconds: u32,
    /// Feed file for this edge. `None` means the orchestrator hands it a
    /// share of the shared feed.
    #[serde(default)]
    pub source: Option<PathBuf>,
}

fn default_period() -> u32 {
    DEFAULT_PACKAGE_PERIOD
}

impl EdgeConfig {
    pub fn new(edge_id: impl Into<String>, package_period_seconds: u32) -> Self {
        Self { edge_id: edge_id.into(), package_period_seconds, source: None }
    }

    pub fn validate(&self) -> Result<(), EdgeError> {
        if self.package_period_seconds == 0 {
            return Err(EdgeError::InvalidPeriod(self.edge_id.clone()));
        }
        Ok(())
    }
}

/// Sent on `control/<edge_id>` after the last package.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndOfStream {
    pub edge_id: String,
    pub packages: u64,
    pub records: u64,
}

impl EndOfStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("eos serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }
}

const CLOCK_SAMPLES: usize = 9;

/// Arrival clock for replayed feeds: the running maximum of the median of
/// the last few parseable record timestamps.
#[derive(Debug, Clone, Default)]
pub struct ReplayClock {
    recent: VecDeque<Timestamp>,
    now: Option<Timestamp>,
}

impl ReplayClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Option<Timestamp> {
        self.now
    }

    pub fn observe(&mut self, record: &str) -> Option<Timestamp> {
        if let Some(ts) = record_timestamp(record) {
            if self.recent.len() == CLOCK_SAMPLES {
                self.recent.pop_front();
            }
            self.recent.push_back(ts);
            let mut sorted: Vec<Timestamp> = self.recent.iter().copied().collect();
            sorted.sort_unstable();
            let median = sorted[sorted.len() / 2];
            self.now = Some(self.now.map_or(median, |n| n.max(median)));
        }
        self.now
    }
}

fn record_timestamp(record: &str) -> Option<Timestamp> {
    let fields = split_record(record).ok()?;
    if fields.len() != FIELD_COUNT {
        return None;
    }
    parse_timestamp(&fields[Field::Timestamp.index()])
}

fn align(t: Timestamp, period: i64) -> Timestamp {
    t.div_euclid(period) * period
}

/// Package builder for one edge. Feed it records with their arrival time;
/// it hands back every package that closed as a result.
#[derive(Debug)]
pub struct EdgeNode {
    edge_id: String,
    period: i64,
    next_seq: u64,
    window: Option<Timestamp>,
    buffer: Vec<String>,
    records: u64,
}

impl EdgeNode {
    pub fn new(config: &EdgeConfig) -> Result<Self, EdgeError> {
        config.validate()?;
        Ok(Self {
            edge_id: config.edge_id.clone(),
            period: i64::from(config.package_period_seconds),
            next_seq: 1,
            window: None,
            buffer: Vec::new(),
            records: 0,
        })
    }

    pub fn edge_id(&self) -> &str {
        &self.edge_id
    }

    /// `at = None` means "no clock reading yet": the record joins the
    /// current (or first) window.
    pub fn offer(&mut self, at: Option<Timestamp>, record: String) -> Vec<StreamPackage> {
        let mut out = Vec::new();
        if let Some(at) = at {
            let start = align(at, self.period);
            match self.window {
                None => self.window = Some(start),
                Some(w) if start > w => {
                    out.push(self.close(w));
                    let mut gap = w + self.period;
                    while gap < start {
                        out.push(self.close(gap));
                        gap += self.period;
                    }
                    self.window = Some(start);
                }
                // the clock never runs backwards; an earlier reading stays in the open window
                Some(_) => {}
            }
        }
        self.buffer.push(record);
        self.records += 1;
        out
    }

    fn close(&mut self, start: Timestamp) -> StreamPackage {
        let pkg = StreamPackage {
            edge_id: self.edge_id.clone(),
            window_start: start,
            window_end: start + self.period,
            seq: self.next_seq,
            records: std::mem::take(&mut self.buffer),
        };
        self.next_seq += 1;
        pkg
    }

    /// Flushes the partial package, if any, and returns the end-of-stream marker.
    pub fn finish(&mut self) -> (Option<StreamPackage>, EndOfStream) {
        let last = match self.window.take() {
            Some(w) => Some(self.close(w)),
            // records arrived but none carried a clock reading
            None if !self.buffer.is_empty() => Some(self.close(0)),
            None => None,
        };
        let eos = EndOfStream { edge_id: self.edge_id.clone(), packages: self.next_seq - 1, records: self.records };
        (last, eos)
    }
}

/// Replays `records` through an [`EdgeNode`] without a broker.
pub fn package_records(
    config: &EdgeConfig,
    records: impl IntoIterator<Item = String>,
) -> Result<(Vec<StreamPackage>, EndOfStream), EdgeError> {
    let mut node = EdgeNode::new(config)?;
    let mut clock = ReplayClock::new();
    let mut out = Vec::new();
    for r in records {
        let at = clock.observe(&r);
        out.extend(node.offer(at, r));
    }
    let (last, eos) = node.finish();
    out.extend(last);
    Ok((out, eos))
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub backoff: Backoff,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { backoff: Backoff::default(), max_attempts: 1000 }
    }
}

/// Replays `records` and publishes every package on `packages/<edge_id>`,
/// then the end-of-stream marker on `control/<edge_id>`.
pub fn run_edge<L: Link>(
    config: &EdgeConfig,
    records: impl IntoIterator<Item = String>,
    producer: &mut Producer<L>,
    retry: &mut RetryPolicy,
) -> Result<EndOfStream, EdgeError> {
    let mut node = EdgeNode::new(config)?;
    let mut clock = ReplayClock::new();
    let data_topic = packages_topic(&config.edge_id);
    let wrap = |source| EdgeError::Broker { edge: config.edge_id.clone(), source };
    let mut publish = |producer: &mut Producer<L>, topic: &str, payload: Vec<u8>| -> Result<(), EdgeError> {
        let env = producer.prepare(topic, payload).map_err(wrap)?;
        producer.send_with_retry(&env, &mut retry.backoff, retry.max_attempts).map_err(wrap)?;
        Ok(())
    };
    for r in records {
        let at = clock.observe(&r);
        for pkg in node.offer(at, r) {
            publish(producer, &data_topic, pkg.to_bytes())?;
        }
    }
    let (last, eos) = node.finish();
    if let Some(pkg) = last {
        publish(producer, &data_topic, pkg.to_bytes())?;
    }
    publish(producer, &control_topic(&config.edge_id), eos.to_bytes())?;
    tracing::info!(edge = %config.edge_id, packages = eos.packages, records = eos.records, "edge finished");
    Ok(eos)
}
