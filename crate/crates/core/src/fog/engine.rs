use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::clean::{acquire, assign_ids, clean, CleanConfig, DedupIndex, IdCounter, TripIndex, DEFAULT_SLACK_SECONDS};
use super::db::{StreamDatabase, UploadState, WindowId, DEFAULT_RETENTION_SECONDS};
use super::monitor::{Monitor, Task, TaskStatus};
use super::FogError;
use crate::model::{AlarmEvent, CanonicalTuple, DropCode, StreamPackage, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FogConfig {
    pub fog_node: String,
    pub cadence_seconds: u32,
    pub slack_seconds: i64,
    pub package_period_seconds: u32,
    pub retention_seconds: i64,
    /// Windows per edge whose keys take part in duplicate detection.
    pub dedup_horizon_windows: usize,
    pub upload_chunk_tuples: usize,
}

impl FogConfig {
    pub fn new(fog_node: impl Into<String>) -> Self {
        Self { fog_node: fog_node.into(), ..Self::default() }
    }
}

impl Default for FogConfig {
    fn default() -> Self {
        Self {
            fog_node: "fog-0".into(),
            cadence_seconds: 5,
            slack_seconds: DEFAULT_SLACK_SECONDS,
            package_period_seconds: 300,
            retention_seconds: DEFAULT_RETENTION_SECONDS,
            dedup_horizon_windows: 2,
            upload_chunk_tuples: 2000,
        }
    }
}

/// One chunk of an uploaded table, as published on `cloud/upload`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablePayload {
    pub fog_node: String,
    pub window_id: String,
    pub chunk: u32,
    pub chunks: u32,
    pub tuples: Vec<CanonicalTuple>,
}

impl TablePayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("payload serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantinedRecord {
    pub window_id: String,
    pub line: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FogOutput {
    pub uploads: Vec<TablePayload>,
    pub alarms: Vec<AlarmEvent>,
    pub quarantine: Vec<QuarantinedRecord>,
}

impl FogOutput {
    fn extend(&mut self, other: FogOutput) {
        self.uploads.extend(other.uploads);
        self.alarms.extend(other.alarms);
        self.quarantine.extend(other.quarantine);
    }

    pub fn is_empty(&self) -> bool {
        self.uploads.is_empty() && self.alarms.is_empty() && self.quarantine.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdminCommand {
    Pause,
    Resume,
    Flush,
    SetRetention(i64),
}

impl FromStr for AdminCommand {
    type Err = FogError;

    /// `pause`, `resume`, `flush` or `set-retention <seconds>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut words = s.split_whitespace();
        let cmd = match (words.next(), words.next(), words.next()) {
            (Some("pause"), None, _) => AdminCommand::Pause,
            (Some("resume"), None, _) => AdminCommand::Resume,
            (Some("flush"), None, _) => AdminCommand::Flush,
            (Some("set-retention"), Some(n), None) => match n.parse::<i64>() {
                Ok(secs) if secs > 0 => AdminCommand::SetRetention(secs),
                _ => return Err(FogError::UnknownCommand(s.to_string())),
            },
            _ => return Err(FogError::UnknownCommand(s.to_string())),
        };
        Ok(cmd)
    }
}

/// Monitor view of one fog node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FogSnapshot {
    pub fog_node: String,
    pub tasks: Vec<TaskStatus>,
    pub late_tuples: u64,
    pub replayed_packages: u64,
    pub tables_retained: usize,
    pub tables_uploaded: usize,
    pub tables_evicted: usize,
    pub paused: bool,
}

impl FogSnapshot {
    pub fn task(&self, task: Task) -> &TaskStatus {
        self.tasks.iter().find(|t| t.task == task).expect("every task is reported")
    }

    pub fn received(&self) -> u64 {
        self.task(Task::Acquisition).tuples_in
    }

    pub fn quarantined(&self) -> u64 {
        self.task(Task::Acquisition).dropped_total()
    }

    pub fn deleted(&self) -> u64 {
        self.task(Task::Processing).dropped_total()
    }

    pub fn survivors(&self) -> u64 {
        self.task(Task::Processing).tuples_out
    }

    pub fn forwarded(&self) -> u64 {
        self.task(Task::Transportation).tuples_out
    }

    pub fn dropped_by_code(&self, code: DropCode) -> u64 {
        self.task(Task::Processing).dropped_by_code(code)
    }

    pub fn alarms(&self) -> u64 {
        self.task(Task::Processing).alarms_emitted
    }

    /// Every task conserves tuples and the node as a whole accounts for every record.
    pub fn is_conserved(&self) -> bool {
        self.tasks.iter().all(TaskStatus::is_conserved)
            && self.received() == self.quarantined() + self.deleted() + self.survivors()
    }
}

#[derive(Debug)]
struct EdgeState {
    open: Option<Timestamp>,
    last_seq: u64,
    dedup: DedupIndex,
    finished: bool,
}

/// The fog life cycle for one node, without any I/O.
#[derive(Debug)]
pub struct FogEngine {
    cfg: FogConfig,
    clean_cfg: CleanConfig,
    ids: IdCounter,
    db: StreamDatabase,
    edges: BTreeMap<String, EdgeState>,
    trips: TripIndex,
    monitor: Monitor,
    now: Timestamp,
    late: u64,
    replays: u64,
    paused: bool,
}

impl FogEngine {
    pub fn new(cfg: FogConfig) -> Self {
        Self {
            clean_cfg: CleanConfig {
                cadence_seconds: i64::from(cfg.cadence_seconds),
                slack_seconds: cfg.slack_seconds,
            },
            db: StreamDatabase::new(cfg.retention_seconds),
            cfg,
            ids: IdCounter::new(),
            edges: BTreeMap::new(),
            trips: TripIndex::new(),
            monitor: Monitor::default(),
            now: Timestamp::MIN,
            late: 0,
            replays: 0,
            paused: false,
        }
    }

    pub fn config(&self) -> &FogConfig {
        &self.cfg
    }

    pub fn db(&self) -> &StreamDatabase {
        &self.db
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    fn event_window(&self, edge_id: &str, ts: Timestamp) -> WindowId {
        let p = i64::from(self.cfg.package_period_seconds.max(1));
        WindowId::new(edge_id, ts.div_euclid(p) * p)
    }

    /// Runs one package through acquisition, ID assignment, cleaning and
    /// storage. Arrival of window `W + 1` from an edge uploads its window `W`.
    pub fn ingest(&mut self, pkg: &StreamPackage) -> Result<FogOutput, FogError> {
        let horizon = self.cfg.dedup_horizon_windows;
        let state = self.edges.entry(pkg.edge_id.clone()).or_insert_with(|| EdgeState {
            open: None,
            last_seq: 0,
            dedup: DedupIndex::new(horizon),
            finished: false,
        });
        if pkg.seq <= state.last_seq {
            self.replays += 1;
            return Ok(FogOutput::default());
        }
        state.last_seq = pkg.seq;
        let previous = state.open.filter(|w| *w != pkg.window_start);
        self.now = self.now.max(pkg.window_end);

        let mut out = FogOutput::default();
        if let Some(w) = previous {
            out.extend(self.upload(&WindowId::new(pkg.edge_id.as_str(), w))?);
        }
        let wid = WindowId::new(pkg.edge_id.as_str(), pkg.window_start);
        let state = self.edges.get_mut(&pkg.edge_id).expect("edge state");
        state.open = Some(pkg.window_start);
        state.dedup.open_window(pkg.window_start);

        let acquired = acquire(pkg);
        let label = wid.to_string();
        let acq = self.monitor.task_mut(Task::Acquisition);
        acq.tuples_in += pkg.records.len() as u64;
        acq.tuples_out += acquired.tuples.len() as u64;
        acq.drop_n(DropCode::MalformedRecord.to_string(), acquired.malformed.len() as u64);
        acq.last_completed_window = Some(label.clone());
        out.quarantine.extend(acquired.malformed.into_iter().map(|(line, e)| QuarantinedRecord {
            window_id: label.clone(),
            line,
            reason: e.to_string(),
        }));

        let parsed = acquired.tuples.len() as u64;
        let numbered = assign_ids(acquired.tuples, &mut self.ids);
        let state = self.edges.get_mut(&pkg.edge_id).expect("edge state");
        let mut cleaned = clean(numbered, &mut state.dedup, &mut self.trips, &self.clean_cfg, pkg.window_end);
        for t in &mut cleaned.survivors {
            let ew = self.event_window(&pkg.edge_id, t.key.timestamp);
            if matches!(self.db.state(&ew), Some(UploadState::Uploaded | UploadState::Evicted)) {
                t.late = true;
                self.late += 1;
            }
        }

        let proc = self.monitor.task_mut(Task::Processing);
        proc.tuples_in += parsed;
        proc.tuples_out += cleaned.survivors.len() as u64;
        for (_, reason) in &cleaned.drops {
            proc.drop(reason);
        }
        proc.alarms_emitted += cleaned.alarms.len() as u64;
        proc.last_completed_window = Some(label.clone());

        let stored = cleaned.survivors.len() as u64;
        self.db.store_table(&wid, cleaned.survivors)?;
        let storage = self.monitor.task_mut(Task::Storage);
        storage.tuples_in += stored;
        storage.tuples_out += stored;
        storage.last_completed_window = Some(label);

        for evicted in self.db.evict_expired(self.now) {
            tracing::debug!(window = %evicted, "evicted");
        }
        out.alarms.extend(cleaned.alarms);
        Ok(out)
    }

    fn upload(&mut self, wid: &WindowId) -> Result<FogOutput, FogError> {
        let tuples = self.db.leverage(wid)?;
        let n = tuples.len() as u64;
        let label = wid.to_string();
        let lev = self.monitor.task_mut(Task::Leverage);
        lev.tuples_in += self.db.table_len(wid).unwrap_or(0) as u64;
        lev.tuples_out += n;
        lev.last_completed_window = Some(label.clone());

        let chunk = self.cfg.upload_chunk_tuples.max(1);
        let chunks = tuples.len().div_ceil(chunk) as u32;
        let uploads: Vec<TablePayload> = tuples
            .chunks(chunk)
            .enumerate()
            .map(|(i, part)| TablePayload {
                fog_node: self.cfg.fog_node.clone(),
                window_id: label.clone(),
                chunk: i as u32,
                chunks,
                tuples: part.to_vec(),
            })
            .collect();
        self.db.mark_uploaded(wid, self.now)?;
        let tr = self.monitor.task_mut(Task::Transportation);
        tr.tuples_in += n;
        tr.tuples_out += uploads.iter().map(|u| u.tuples.len() as u64).sum::<u64>();
        tr.last_completed_window = Some(label);
        Ok(FogOutput { uploads, ..FogOutput::default() })
    }

    /// Uploads the edge's open table; its stream is over.
    pub fn end_of_stream(&mut self, edge_id: &str) -> Result<FogOutput, FogError> {
        let open = match self.edges.get_mut(edge_id) {
            Some(state) => {
                state.finished = true;
                state.open.take()
            }
            None => None,
        };
        match open {
            Some(w) => self.upload(&WindowId::new(edge_id, w)),
            None => Ok(FogOutput::default()),
        }
    }

    /// Uploads every open table now.
    pub fn flush(&mut self) -> Result<FogOutput, FogError> {
        let open: Vec<(String, Timestamp)> =
            self.edges.iter_mut().filter_map(|(id, s)| s.open.take().map(|w| (id.clone(), w))).collect();
        let mut out = FogOutput::default();
        for (edge, w) in open {
            out.extend(self.upload(&WindowId::new(edge, w))?);
        }
        Ok(out)
    }

    pub fn admin(&mut self, cmd: AdminCommand) -> Result<FogOutput, FogError> {
        self.monitor.task_mut(Task::Control).tuples_in += 1;
        let out = match cmd {
            AdminCommand::Pause => {
                self.paused = true;
                FogOutput::default()
            }
            AdminCommand::Resume => {
                self.paused = false;
                FogOutput::default()
            }
            AdminCommand::Flush => self.flush()?,
            AdminCommand::SetRetention(secs) => {
                self.db.set_retention_ttl(secs);
                self.db.evict_expired(self.now);
                FogOutput::default()
            }
        };
        self.monitor.task_mut(Task::Control).tuples_out += 1;
        Ok(out)
    }

    /// Parses and applies a textual command; unknown ones are counted and refused.
    pub fn admin_text(&mut self, text: &str) -> Result<FogOutput, FogError> {
        match text.parse::<AdminCommand>() {
            Ok(cmd) => self.admin(cmd),
            Err(e) => {
                let ctl = self.monitor.task_mut(Task::Control);
                ctl.tuples_in += 1;
                ctl.drop_n("unknown_command", 1);
                Err(e)
            }
        }
    }

    pub fn all_finished(&self) -> bool {
        self.edges.values().all(|s| s.finished)
    }

    pub fn snapshot(&self) -> FogSnapshot {
        FogSnapshot {
            fog_node: self.cfg.fog_node.clone(),
            tasks: self.monitor.snapshot(),
            late_tuples: self.late,
            replayed_packages: self.replays,
            tables_retained: self.db.count_in(UploadState::Retained),
            tables_uploaded: self.db.count_in(UploadState::Uploaded),
            tables_evicted: self.db.count_in(UploadState::Evicted),
            paused: self.paused,
        }
    }
}
