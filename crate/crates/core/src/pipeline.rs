//! End-to-end runs: edges -> broker -> fogs -> cloud, then reports.
//!
//! Three drivers share one set of inputs and produce the same reports:
//! [`run_inline`] (single thread, no broker; used by the browser demo),
//! and [`run_topology`] over the in-process broker or loopback TCP.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::broker::{
    control_topic, packages_topic, Broker, BrokerError, BrokerServer, DedupInbox, Inbox, Link, Producer, TcpLink,
    TcpSubscriber, TOPIC_ALARMS, TOPIC_UPLOAD,
};
use crate::cloud::{
    self, map_reduce_trips, render_table, render_totals, render_trips_csv, CloudError, CloudRun, CloudStore, Totals,
    SNAPSHOTS_FILE, TOTALS_REPORT, TRIPS_REPORT,
};
use crate::config::{BrokerMode, ConfigError, TopologyConfig};
use crate::edge::{package_records, run_edge, EdgeConfig, EdgeError, EndOfStream, RetryPolicy};
use crate::feedgen::{
    self, corrupt_feed, generate_clean_feed, load_schedule, read_record_lines, FeedError, Schedule, SCHEDULE_FILE,
};
use crate::fog::{clean, spawn_fog_node, FogEngine, FogError, FogSnapshot, QuarantineWriter};
use crate::model::{parse_raw_record, AlarmEvent, Field, StreamPackage, TripReportRow};

pub const REPORT_DIR: &str = "report";
pub const STORE_DIR: &str = "store";
pub const ALARMS_LOG: &str = "alarms.jsonl";
pub const TABLE_REPORT: &str = "table.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const INPUT_DIR: &str = "input";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Feed(#[from] FeedError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error(transparent)]
    Fog(#[from] FogError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{0} thread panicked")]
    Panicked(String),
}

impl PipelineError {
    /// 2 for configuration problems, 3 for a broken invariant, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Feed(FeedError::InvalidSchedule(_) | FeedError::InvalidPlan(_)) => 2,
            PipelineError::Edge(EdgeError::InvalidPeriod(_)) => 2,
            PipelineError::Invariant(_) => 3,
            PipelineError::Cloud(CloudError::InconsistentSnapshots { .. }) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Record lines for every edge, plus the schedule the report is measured against.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub schedule: Schedule,
    pub edges: Vec<(EdgeConfig, Vec<String>)>,
}

impl Inputs {
    pub fn record_count(&self) -> usize {
        self.edges.iter().map(|(_, r)| r.len()).sum()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

/// Splits a shared feed across `n` edges by route, so every trip stays on
/// one edge. Unparseable lines go to the first edge.
pub fn split_by_route(records: Vec<String>, n: usize) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new(); n.max(1)];
    if n <= 1 {
        out[0] = records;
        return out;
    }
    for r in records {
        let k = match parse_raw_record(&r) {
            Ok(t) => (fnv1a(t.get(Field::RouteIdRta).as_bytes()) % n as u64) as usize,
            Err(_) => 0,
        };
        out[k].push(r);
    }
    out
}

/// Generates the feed (clean, then corrupted per the plan) and writes it
/// with its manifest, ledger and schedule into `dir`. Returns the record lines.
pub fn generate_into(
    dir: &Path,
    schedule: &Schedule,
    plan: Option<&feedgen::CorruptionPlan>,
) -> Result<Vec<String>, FeedError> {
    let feed = generate_clean_feed(schedule)?;
    let (tuples, ledger) = match plan {
        Some(p) => {
            let c = corrupt_feed(&feed.tuples, p)?;
            (c.tuples, c.ledger)
        }
        None => (feed.tuples, Vec::new()),
    };
    feedgen::write_outputs(dir, schedule, &tuples, &feed.manifest, &ledger)?;
    Ok(tuples.iter().map(|t| t.to_csv_line()).collect())
}

fn find_schedule(cfg: &TopologyConfig) -> Option<PathBuf> {
    if let Some(p) = &cfg.paths.schedule {
        return Some(p.clone());
    }
    // a generated feed carries its schedule alongside
    cfg.paths.feed.parent().map(|d| d.join(SCHEDULE_FILE)).filter(|p| p.exists())
}

/// Loads the schedule and the feed. A missing feed is generated from the
/// schedule and the corruption plan into `<out_dir>/input`.
pub fn prepare_inputs(cfg: &TopologyConfig) -> Result<Inputs, PipelineError> {
    let schedule_path = find_schedule(cfg).ok_or_else(|| {
        ConfigError::Invalid(vec![format!(
            "paths.schedule is not set and no {SCHEDULE_FILE} sits next to {}",
            cfg.paths.feed.display()
        )])
    })?;
    let schedule = load_schedule(&schedule_path)?;
    let shared_edges = cfg.edges.iter().filter(|e| e.source.is_none()).count();
    let shared = if shared_edges == 0 {
        Vec::new()
    } else if cfg.paths.feed.exists() {
        read_record_lines(&cfg.paths.feed)?
    } else {
        let dir = cfg.paths.out_dir.join(INPUT_DIR);
        tracing::info!(dir = %dir.display(), "feed not found, generating it");
        generate_into(&dir, &schedule, cfg.corruption_plan().as_ref())?
    };
    let mut parts = split_by_route(shared, shared_edges).into_iter();
    let mut edges = Vec::new();
    for ec in cfg.edge_configs() {
        let records = match &ec.source {
            Some(p) => read_record_lines(p)?,
            None => parts.next().unwrap_or_default(),
        };
        edges.push((ec, records));
    }
    Ok(Inputs { schedule, edges })
}

/// Everything a run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub store: CloudStore,
    pub snapshots: Vec<FogSnapshot>,
    /// Sorted.
    pub alarms: Vec<AlarmEvent>,
    pub edges: Vec<EndOfStream>,
    pub totals: Totals,
    pub rows: Vec<TripReportRow>,
    /// Broker deliveries discarded as replays, at the fogs and the cloud.
    pub replays: u64,
}

fn finish(
    cfg: &TopologyConfig,
    schedule: &Schedule,
    run: CloudRun,
    edges: Vec<EndOfStream>,
    replays: u64,
) -> Result<RunOutcome, PipelineError> {
    let CloudRun { store, snapshots, mut alarms } = run;
    check_invariants(&store, &snapshots, &edges)?;
    let replays = replays + snapshots.iter().map(|s| s.replayed_packages).sum::<u64>();
    let totals = cloud::totals(&store, &snapshots)?;
    let rows = map_reduce_trips(&store, schedule, cfg.min_tuples_per_trip);
    alarms.sort();
    Ok(RunOutcome { store, snapshots, alarms, edges, totals, rows, replays })
}

/// Per-task conservation, edge-to-fog accounting and table order.
pub fn check_invariants(
    store: &CloudStore,
    snapshots: &[FogSnapshot],
    edges: &[EndOfStream],
) -> Result<(), PipelineError> {
    for s in snapshots {
        if !s.is_conserved() {
            return Err(PipelineError::Invariant(format!("{} does not conserve tuples", s.fog_node)));
        }
    }
    let sent: u64 = edges.iter().map(|e| e.records).sum();
    let received: u64 = snapshots.iter().map(FogSnapshot::received).sum();
    if sent != received {
        return Err(PipelineError::Invariant(format!("edges sent {sent} records but fogs received {received}")));
    }
    for b in store.batches() {
        if !clean::is_sorted(&b.tuples) {
            return Err(PipelineError::Invariant(format!("{} chunk {} is not sorted", b.window_id, b.chunk)));
        }
    }
    Ok(())
}

fn fog_names(cfg: &TopologyConfig) -> Vec<String> {
    (0..cfg.fog_count).map(TopologyConfig::fog_name).collect()
}

fn quarantine_writer(cfg: &TopologyConfig, write: bool) -> Result<Option<QuarantineWriter>, PipelineError> {
    if !write {
        return Ok(None);
    }
    let dir = cfg.quarantine_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    Ok(Some(QuarantineWriter::new(dir)))
}

/// Single-threaded run without a broker. Packages from the edges of one fog
/// are interleaved by window start, as if the edges ran side by side.
pub fn run_inline(cfg: &TopologyConfig, inputs: &Inputs, write_quarantine: bool) -> Result<RunOutcome, PipelineError> {
    let quarantine = quarantine_writer(cfg, write_quarantine)?;
    let mut packaged: BTreeMap<String, (Vec<StreamPackage>, EndOfStream)> = BTreeMap::new();
    for (ec, records) in &inputs.edges {
        packaged.insert(ec.edge_id.clone(), package_records(ec, records.iter().cloned())?);
    }
    let mut run = CloudRun::default();
    for k in 0..cfg.fog_count {
        let mut engine = FogEngine::new(cfg.fog_config(k));
        let edges = cfg.edges_of_fog(k);
        let mut order: Vec<(i64, usize, &StreamPackage)> = edges
            .iter()
            .enumerate()
            .flat_map(|(i, e)| packaged[e].0.iter().map(move |p| (p.window_start, i, p)))
            .collect();
        order.sort_by_key(|(start, i, p)| (*start, *i, p.seq));
        let mut outputs = Vec::new();
        for (_, _, pkg) in order {
            outputs.push(engine.ingest(pkg)?);
        }
        for e in &edges {
            outputs.push(engine.end_of_stream(e)?);
        }
        for out in outputs {
            if let Some(q) = &quarantine {
                q.write(&out.quarantine).map_err(FogError::from)?;
            }
            for u in out.uploads {
                run.store.ingest_payload(u);
            }
            run.alarms.extend(out.alarms);
        }
        run.snapshots.push(engine.snapshot());
    }
    let edges = packaged.into_values().map(|(_, eos)| eos).collect();
    finish(cfg, &inputs.schedule, run, edges, 0)
}

fn join<T>(name: &str, h: thread::JoinHandle<Result<T, PipelineError>>) -> Result<T, PipelineError> {
    h.join().map_err(|_| PipelineError::Panicked(name.to_string()))?
}

fn cloud_patterns(fogs: &[String]) -> Vec<String> {
    let mut p = vec![TOPIC_UPLOAD.to_string(), TOPIC_ALARMS.to_string()];
    p.extend(fogs.iter().map(|f| control_topic(f)));
    p
}

fn fog_patterns(edges: &[String]) -> Vec<String> {
    edges.iter().flat_map(|e| [packages_topic(e), control_topic(e)]).collect()
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// How each tier reaches the broker.
trait Transport: Sync {
    type Link: Link + 'static;
    type Inbox: Inbox + 'static;
    fn producer(&self, name: &str) -> Producer<Self::Link>;
    fn subscribe(&self, name: &str, patterns: &[String]) -> Result<Self::Inbox, BrokerError>;
}

struct InProc(Broker);

impl Transport for InProc {
    type Link = crate::broker::InProcLink;
    type Inbox = crate::broker::Subscription;

    fn producer(&self, name: &str) -> Producer<Self::Link> {
        self.0.producer(name)
    }

    fn subscribe(&self, name: &str, patterns: &[String]) -> Result<Self::Inbox, BrokerError> {
        self.0.subscribe_many(name, &as_strs(patterns))
    }
}

struct Tcp(std::net::SocketAddr);

impl Transport for Tcp {
    type Link = TcpLink;
    type Inbox = TcpSubscriber;

    fn producer(&self, name: &str) -> Producer<Self::Link> {
        Producer::new(TcpLink::new(self.0, name))
    }

    fn subscribe(&self, name: &str, patterns: &[String]) -> Result<Self::Inbox, BrokerError> {
        TcpSubscriber::connect(self.0, name, &as_strs(patterns))
    }
}

fn run_over<T: Transport>(
    cfg: &TopologyConfig,
    inputs: &Inputs,
    transport: &T,
    write_quarantine: bool,
) -> Result<(CloudRun, Vec<EndOfStream>, u64), PipelineError> {
    let fogs = fog_names(cfg);
    let quarantine = quarantine_writer(cfg, write_quarantine)?;

    let cloud_inbox = DedupInbox::new(transport.subscribe("cloud", &cloud_patterns(&fogs))?);
    let cloud_fogs = fogs.clone();
    let cloud = thread::Builder::new()
        .name("cloud".into())
        .spawn(move || {
            let mut inbox = cloud_inbox;
            let run = cloud::run_cloud_sink(&mut inbox, &cloud_fogs)?;
            Ok((run, inbox.replays()))
        })
        .map_err(io_err(Path::new("cloud thread")))?;

    let mut nodes = Vec::new();
    for (k, name) in fogs.iter().enumerate() {
        let edges = cfg.edges_of_fog(k);
        // the engine drops replayed packages itself, by per-edge sequence number
        let inbox = transport.subscribe(name, &fog_patterns(&edges))?;
        nodes.push(spawn_fog_node(
            FogEngine::new(cfg.fog_config(k)),
            edges,
            inbox,
            transport.producer(name),
            quarantine.clone(),
        ));
    }

    let edge_results: Vec<Result<EndOfStream, PipelineError>> = thread::scope(|s| {
        let handles: Vec<_> = inputs
            .edges
            .iter()
            .map(|(ec, records)| {
                let mut producer = transport.producer(&ec.edge_id);
                s.spawn(move || {
                    run_edge(ec, records.iter().cloned(), &mut producer, &mut RetryPolicy::default())
                        .map_err(PipelineError::from)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(PipelineError::Panicked("edge".into())))).collect()
    });
    let edges = edge_results.into_iter().collect::<Result<Vec<_>, _>>()?;
    for n in nodes {
        n.join()?;
    }
    let (run, replays) = join("cloud", cloud)?;
    Ok((run, edges, replays))
}

/// Runs the configured topology over the in-process broker or loopback TCP.
pub fn run_topology(
    cfg: &TopologyConfig,
    inputs: &Inputs,
    write_quarantine: bool,
) -> Result<RunOutcome, PipelineError> {
    let broker = Broker::new(cfg.broker_config());
    let (run, edges, replays) = match cfg.broker.mode {
        BrokerMode::InProcess => {
            let transport = InProc(broker.clone());
            let r = run_over(cfg, inputs, &transport, write_quarantine);
            broker.close();
            r?
        }
        BrokerMode::Tcp => {
            let server = BrokerServer::bind(cfg.broker.address.as_str(), broker)
                .map_err(io_err(Path::new(&cfg.broker.address)))?;
            if let Some(n) = cfg.broker.disconnect_after_messages {
                server.disconnect_after_publishes(n);
            }
            let transport = Tcp(server.local_addr());
            run_over(cfg, inputs, &transport, write_quarantine)?
        }
    };
    finish(cfg, &inputs.schedule, run, edges, replays)
}

#[derive(Debug, Serialize)]
struct Metric<'a, T: Serialize> {
    event: &'a str,
    #[serde(flatten)]
    data: T,
}

fn metric<T: Serialize>(event: &str, data: T) -> String {
    serde_json::to_string(&Metric { event, data }).expect("metric serializes")
}

/// Line-delimited metric events for one run.
pub fn metrics_lines(outcome: &RunOutcome, mode: &str, wall_ms: u128) -> Vec<String> {
    let mut lines = Vec::new();
    for e in &outcome.edges {
        lines.push(metric("edge_finished", e));
    }
    for s in &outcome.snapshots {
        for t in &s.tasks {
            lines.push(metric(
                "fog_task",
                json!({
                    "fog_node": s.fog_node,
                    "task": t.task,
                    "tuples_in": t.tuples_in,
                    "tuples_out": t.tuples_out,
                    "tuples_dropped": t.tuples_dropped,
                    "alarms_emitted": t.alarms_emitted,
                }),
            ));
        }
        lines.push(metric(
            "fog_tables",
            json!({
                "fog_node": s.fog_node,
                "retained": s.tables_retained,
                "uploaded": s.tables_uploaded,
                "evicted": s.tables_evicted,
                "late_tuples": s.late_tuples,
                "replayed_packages": s.replayed_packages,
            }),
        ));
    }
    lines.push(metric(
        "cloud",
        json!({
            "batches": outcome.store.batches().len(),
            "arrived": outcome.store.arrived(),
            "duplicates_ignored": outcome.store.duplicates_ignored(),
            "redelivered_batches": outcome.store.redelivered_batches(),
            "broker_replays": outcome.replays,
        }),
    ));
    lines.push(metric("totals", &outcome.totals));
    lines.push(metric("run", json!({ "mode": mode, "wall_ms": wall_ms })));
    lines
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn jsonl_text<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("serializes") + "\n").collect()
}

/// Writes `report/` and `store/` under `out_dir`.
pub fn write_artifacts(
    out_dir: &Path,
    schedule: &Schedule,
    outcome: &RunOutcome,
    metrics: &[String],
) -> Result<(), PipelineError> {
    write_reports(&out_dir.join(REPORT_DIR), &outcome.rows, &outcome.totals)?;
    write(&out_dir.join(REPORT_DIR).join(ALARMS_LOG), jsonl_text(&outcome.alarms))?;
    write(&out_dir.join(METRICS_FILE), metrics.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    let store = out_dir.join(STORE_DIR);
    outcome.store.save(&store)?;
    write(&store.join(SCHEDULE_FILE), schedule.to_json())?;
    write(&store.join(SNAPSHOTS_FILE), serde_json::to_string_pretty(&outcome.snapshots).expect("snapshots serialize"))?;
    Ok(())
}

pub fn write_reports(dir: &Path, rows: &[TripReportRow], totals: &Totals) -> Result<(), PipelineError> {
    write(&dir.join(TRIPS_REPORT), render_trips_csv(rows))?;
    write(&dir.join(TOTALS_REPORT), render_totals(totals))?;
    write(&dir.join(TABLE_REPORT), render_table(rows))?;
    Ok(())
}

/// Loads inputs, runs the topology and writes every artifact under the
/// configured out dir.
pub fn run_configured(cfg: &TopologyConfig) -> Result<RunOutcome, PipelineError> {
    let inputs = prepare_inputs(cfg)?;
    let started = Instant::now();
    tracing::info!(records = inputs.record_count(), edges = inputs.edges.len(), fogs = cfg.fog_count, "run starting");
    let outcome = run_topology(cfg, &inputs, true)?;
    let mode = match cfg.broker.mode {
        BrokerMode::InProcess => "in-process",
        BrokerMode::Tcp => "tcp",
    };
    let metrics = metrics_lines(&outcome, mode, started.elapsed().as_millis());
    write_artifacts(&cfg.paths.out_dir, &inputs.schedule, &outcome, &metrics)?;
    Ok(outcome)
}

/// Re-renders the reports of an earlier run from `<out_dir>/store`.
/// `min_tuples_per_trip` overrides the threshold the run used.
pub fn report_from_store(
    out_dir: &Path,
    min_tuples_per_trip: u64,
) -> Result<(Vec<TripReportRow>, Totals), PipelineError> {
    let store_dir = out_dir.join(STORE_DIR);
    let store = CloudStore::load(&store_dir)?;
    let schedule_path = store_dir.join(SCHEDULE_FILE);
    if !schedule_path.exists() {
        return Err(CloudError::MissingArtifacts(schedule_path).into());
    }
    let schedule = load_schedule(&schedule_path)?;
    let snap_path = store_dir.join(SNAPSHOTS_FILE);
    let text = fs::read_to_string(&snap_path).map_err(|_| CloudError::MissingArtifacts(snap_path.clone()))?;
    let snapshots: Vec<FogSnapshot> = serde_json::from_str(&text).map_err(|e| CloudError::Decode(e.to_string()))?;
    let totals = cloud::totals(&store, &snapshots)?;
    Ok((map_reduce_trips(&store, &schedule, min_tuples_per_trip), totals))
}
