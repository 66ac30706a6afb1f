//! Cloud sink: an append-only batch store, the keyed trip aggregation and
//! the pipeline totals.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{decompose, BrokerError, Inbox, TOPIC_ALARMS, TOPIC_UPLOAD};
use crate::feedgen::Schedule;
use crate::fog::{FogSnapshot, TablePayload};
use crate::jsonl;
use crate::model::{AlarmEvent, CanonicalTuple, TripReportRow, TupleKey};

pub const TRIPS_REPORT: &str = "trips.csv";
pub const TOTALS_REPORT: &str = "totals.txt";
pub const BATCHES_FILE: &str = "batches.jsonl";
pub const SNAPSHOTS_FILE: &str = "fog_snapshots.json";
pub const COUNTERS_FILE: &str = "cloud_counters.json";

/// Route label of the residual row collecting unscheduled trips.
pub const UNSCHEDULED_ROUTE: &str = "(unscheduled)";

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("cannot decode batch: {0}")]
    Decode(String),
    #[error(
        "inconsistent snapshots: received {received} != deleted {deleted} + arrived {arrived} + quarantined {quarantined}"
    )]
    InconsistentSnapshots { received: u64, deleted: u64, arrived: u64, quarantined: u64 },
    #[error("missing artifact {0}")]
    MissingArtifacts(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CloudError + '_ {
    move |source| CloudError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredBatch {
    pub fog_node: String,
    pub window_id: String,
    pub chunk: u32,
    /// Smallest and largest fog_id in the batch.
    pub fog_id_range: Option<(u64, u64)>,
    pub tuples: Vec<CanonicalTuple>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Stored {
        accepted: usize,
        ignored: usize,
    },
    /// The whole batch was seen before (broker redelivery).
    Redelivered,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreCounters {
    duplicates_ignored: u64,
    redelivered_batches: u64,
}

#[derive(Debug, Default, Clone)]
pub struct CloudStore {
    batches: Vec<StoredBatch>,
    seen_batches: HashSet<(String, String, u32)>,
    keys: HashSet<TupleKey>,
    duplicates_ignored: u64,
    redelivered: u64,
}

impl CloudStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ingest_batch(&mut self, bytes: &[u8]) -> Result<IngestOutcome, CloudError> {
        let payload = TablePayload::from_bytes(bytes).map_err(|e| CloudError::Decode(e.to_string()))?;
        Ok(self.ingest_payload(payload))
    }

    /// Tuples whose key was stored before are ignored; the rest are appended.
    pub fn ingest_payload(&mut self, payload: TablePayload) -> IngestOutcome {
        let id = (payload.fog_node, payload.window_id, payload.chunk);
        if !self.seen_batches.insert(id.clone()) {
            self.redelivered += 1;
            return IngestOutcome::Redelivered;
        }
        let total = payload.tuples.len();
        let tuples: Vec<CanonicalTuple> =
            payload.tuples.into_iter().filter(|t| self.keys.insert(t.key.clone())).collect();
        let ignored = total - tuples.len();
        self.duplicates_ignored += ignored as u64;
        let fog_id_range = tuples
            .iter()
            .map(|t| t.fog_id)
            .fold(None, |r: Option<(u64, u64)>, id| Some(r.map_or((id, id), |(a, b)| (a.min(id), b.max(id)))));
        let accepted = tuples.len();
        self.batches.push(StoredBatch { fog_node: id.0, window_id: id.1, chunk: id.2, fog_id_range, tuples });
        IngestOutcome::Stored { accepted, ignored }
    }

    pub fn batches(&self) -> &[StoredBatch] {
        &self.batches
    }

    pub fn tuples(&self) -> impl Iterator<Item = &CanonicalTuple> {
        self.batches.iter().flat_map(|b| b.tuples.iter())
    }

    /// Tuples stored.
    pub fn arrived(&self) -> u64 {
        self.keys.len() as u64
    }

    /// Tuples that reached the cloud again under a key already stored.
    pub fn duplicates_ignored(&self) -> u64 {
        self.duplicates_ignored
    }

    pub fn redelivered_batches(&self) -> u64 {
        self.redelivered
    }

    /// Batches in a canonical order, independent of arrival interleaving.
    fn sorted_batches(&self) -> Vec<&StoredBatch> {
        let mut v: Vec<&StoredBatch> = self.batches.iter().collect();
        v.sort_by(|a, b| (&a.fog_node, &a.window_id, a.chunk).cmp(&(&b.fog_node, &b.window_id, b.chunk)));
        v
    }

    /// Writes the batches plus the counters of what the store turned away,
    /// which the batches alone cannot reproduce.
    pub fn save(&self, dir: &Path) -> Result<(), CloudError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(BATCHES_FILE);
        let batches: Vec<&StoredBatch> = self.sorted_batches();
        jsonl::write_file(&path, &batches).map_err(io_err(&path))?;
        let counters =
            StoreCounters { duplicates_ignored: self.duplicates_ignored, redelivered_batches: self.redelivered };
        let path = dir.join(COUNTERS_FILE);
        fs::write(&path, serde_json::to_string_pretty(&counters).expect("counters serialize")).map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, CloudError> {
        let path = dir.join(BATCHES_FILE);
        if !path.exists() {
            return Err(CloudError::MissingArtifacts(path));
        }
        let batches: Vec<StoredBatch> = jsonl::read_file(&path).map_err(|e| CloudError::Decode(e.to_string()))?;
        let mut store = CloudStore::new();
        for b in batches {
            store.ingest_payload(TablePayload {
                fog_node: b.fog_node,
                window_id: b.window_id,
                chunk: b.chunk,
                chunks: 0,
                tuples: b.tuples,
            });
        }
        let path = dir.join(COUNTERS_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let c: StoreCounters = serde_json::from_str(&text).map_err(|e| CloudError::Decode(e.to_string()))?;
            store.duplicates_ignored += c.duplicates_ignored;
            store.redelivered += c.redelivered_batches;
        }
        Ok(store)
    }
}

/// Map: key each tuple by (route_id_rta, trip_id_br). Reduce: count per key.
pub fn map_reduce_counts<'a>(tuples: impl Iterator<Item = &'a CanonicalTuple>) -> HashMap<(String, String), u64> {
    let mapped = tuples.map(|t| ((t.key.route_id_rta.clone(), t.key.trip_id_br.clone()), 1u64));
    let mut reduced: HashMap<(String, String), u64> = HashMap::new();
    for (k, v) in mapped {
        *reduced.entry(k).or_insert(0) += v;
    }
    reduced
}

/// One row per scheduled route, sorted by route_id_rta. A trip counts as
/// performed when at least `min_tuples_per_trip` of its tuples arrived.
/// Tuples of trips absent from the schedule land in a trailing residual row.
pub fn map_reduce_trips(store: &CloudStore, schedule: &Schedule, min_tuples_per_trip: u64) -> Vec<TripReportRow> {
    let counts = map_reduce_counts(store.tuples());
    let scheduled: HashMap<&str, HashSet<&str>> = schedule
        .routes
        .iter()
        .map(|r| (r.route_id_rta.as_str(), r.trips.iter().map(|t| t.trip_id_br.as_str()).collect()))
        .collect();
    let mut performed: BTreeMap<&str, u64> = BTreeMap::new();
    let mut unscheduled = 0u64;
    for ((route, trip), n) in &counts {
        if *n < min_tuples_per_trip.max(1) {
            continue;
        }
        match scheduled.get(route.as_str()) {
            Some(trips) if trips.contains(trip.as_str()) => *performed.entry(route.as_str()).or_insert(0) += 1,
            _ => unscheduled += 1,
        }
    }
    let mut routes: Vec<(&str, u64)> =
        schedule.routes.iter().map(|r| (r.route_id_rta.as_str(), r.trips.len() as u64)).collect();
    routes.sort();
    let mut rows: Vec<TripReportRow> = routes
        .into_iter()
        .map(|(route, n)| TripReportRow::new(route, n, performed.get(route).copied().unwrap_or(0)))
        .collect();
    let has_unscheduled = counts
        .keys()
        .any(|(route, trip)| scheduled.get(route.as_str()).is_none_or(|trips| !trips.contains(trip.as_str())));
    if has_unscheduled {
        rows.push(TripReportRow::new(UNSCHEDULED_ROUTE, 0, unscheduled));
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub received: u64,
    pub deleted: u64,
    pub arrived: u64,
    pub quarantined: u64,
    /// Drops by reason, fog rules plus duplicates caught at the cloud.
    pub deleted_by_reason: BTreeMap<String, u64>,
    pub late: u64,
    pub alarms: u64,
}

impl Totals {
    /// Checks `received == deleted + arrived + quarantined`.
    pub fn from_counts(received: u64, deleted: u64, arrived: u64, quarantined: u64) -> Result<Self, CloudError> {
        if deleted.checked_add(arrived).and_then(|s| s.checked_add(quarantined)) != Some(received) {
            return Err(CloudError::InconsistentSnapshots { received, deleted, arrived, quarantined });
        }
        Ok(Totals { received, deleted, arrived, quarantined, deleted_by_reason: BTreeMap::new(), late: 0, alarms: 0 })
    }
}

pub const CLOUD_DUPLICATE_REASON: &str = "duplicate_tuple(cloud)";

pub fn totals(store: &CloudStore, snapshots: &[FogSnapshot]) -> Result<Totals, CloudError> {
    let received = snapshots.iter().map(FogSnapshot::received).sum();
    let quarantined = snapshots.iter().map(FogSnapshot::quarantined).sum();
    let deleted = snapshots.iter().map(FogSnapshot::deleted).sum::<u64>() + store.duplicates_ignored();
    let mut t = Totals::from_counts(received, deleted, store.arrived(), quarantined)?;
    for s in snapshots {
        for (reason, n) in &s.task(crate::fog::Task::Processing).tuples_dropped {
            *t.deleted_by_reason.entry(reason.clone()).or_insert(0) += n;
        }
    }
    if store.duplicates_ignored() > 0 {
        t.deleted_by_reason.insert(CLOUD_DUPLICATE_REASON.into(), store.duplicates_ignored());
    }
    t.late = snapshots.iter().map(|s| s.late_tuples).sum();
    t.alarms = snapshots.iter().map(FogSnapshot::alarms).sum();
    Ok(t)
}

pub fn render_trips_csv(rows: &[TripReportRow]) -> String {
    let mut out = String::from("route_id_rta,scheduled,performed,percent\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.route_id_rta, r.scheduled_trips, r.performed_trips, r.percent());
    }
    out
}

/// `key value` lines.
pub fn render_totals(t: &Totals) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "received_at_fog {}", t.received);
    let _ = writeln!(out, "deleted_at_fog {}", t.deleted);
    let _ = writeln!(out, "quarantined_at_fog {}", t.quarantined);
    let _ = writeln!(out, "arrived_at_cloud {}", t.arrived);
    let _ = writeln!(out, "late_tuples {}", t.late);
    let _ = writeln!(out, "alarms {}", t.alarms);
    for (reason, n) in &t.deleted_by_reason {
        let _ = writeln!(out, "deleted.{reason} {n}");
    }
    out
}

/// Human-readable trip table with a total line.
pub fn render_table(rows: &[TripReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} {:>9} {:>9} {:>8}", "route", "scheduled", "performed", "percent");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>9} {:>8}",
            r.route_id_rta,
            r.scheduled_trips,
            r.performed_trips,
            r.percent()
        );
    }
    let sched: u64 = rows.iter().map(|r| r.scheduled_trips).sum();
    let perf: u64 = rows.iter().map(|r| r.performed_trips).sum();
    let total = TripReportRow::new("total", sched, perf);
    let _ = writeln!(out, "{:<14} {:>9} {:>9} {:>8}", "total", sched, perf, total.percent());
    out
}

/// Everything the sink collected in one run.
#[derive(Debug, Default)]
pub struct CloudRun {
    pub store: CloudStore,
    pub snapshots: Vec<FogSnapshot>,
    pub alarms: Vec<AlarmEvent>,
}

impl CloudRun {
    pub fn accept_upload(&mut self, envelope_payload: &[u8]) -> Result<(), CloudError> {
        self.store.ingest_batch(envelope_payload)?;
        Ok(())
    }
}

/// Drains `cloud/upload`, `alarms` and `control/<fog>` until every fog in
/// `fog_nodes` has sent its final snapshot.
pub fn run_cloud_sink<I: Inbox>(mut inbox: I, fog_nodes: &[String]) -> Result<CloudRun, CloudError> {
    let mut remaining: BTreeSet<String> = fog_nodes.iter().cloned().collect();
    let mut run = CloudRun::default();
    while !remaining.is_empty() {
        let Some(d) = inbox.recv_timeout(Duration::from_millis(50))? else {
            continue;
        };
        let topic = d.envelope.topic.as_str();
        if topic == TOPIC_UPLOAD {
            for inner in decompose(&d.envelope)? {
                run.accept_upload(&inner.payload)?;
            }
        } else if topic == TOPIC_ALARMS {
            for inner in decompose(&d.envelope)? {
                let alarm: AlarmEvent =
                    serde_json::from_slice(&inner.payload).map_err(|e| CloudError::Decode(e.to_string()))?;
                run.alarms.push(alarm);
            }
        } else if let Some(node) = topic.strip_prefix("control/") {
            if remaining.remove(node) {
                let snap: FogSnapshot =
                    serde_json::from_slice(&d.envelope.payload).map_err(|e| CloudError::Decode(e.to_string()))?;
                run.snapshots.push(snap);
            }
        }
    }
    run.snapshots.sort_by(|a, b| a.fog_node.cmp(&b.fog_node));
    Ok(run)
}
