//! Threaded fog node: one sequential loop per node, fed by a broker inbox.
//! Snapshots and admin commands travel over a channel, so the engine is
//! never shared.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{AdminCommand, FogEngine, FogError, FogOutput, FogSnapshot, QuarantinedRecord};
use crate::broker::{aggregate, control_topic, Envelope, Inbox, Link, Producer, TOPIC_ALARMS, TOPIC_UPLOAD};
use crate::edge::{EndOfStream, RetryPolicy};
use crate::model::StreamPackage;

pub const UPLOAD_FRAME_BYTES: usize = 1 << 20;

const POLL: Duration = Duration::from_millis(10);

/// Appends malformed records to `<dir>/<window_id>.csv`.
#[derive(Debug, Clone)]
pub struct QuarantineWriter {
    dir: PathBuf,
}

impl QuarantineWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, records: &[QuarantinedRecord]) -> std::io::Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        fs::create_dir_all(&self.dir)?;
        let mut i = 0;
        while i < records.len() {
            let window = &records[i].window_id;
            let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join(format!("{window}.csv")))?;
            while i < records.len() && &records[i].window_id == window {
                writeln!(f, "{}", records[i].line)?;
                i += 1;
            }
        }
        Ok(())
    }
}

enum NodeCommand {
    Admin(AdminCommand, Sender<Result<(), String>>),
    Snapshot(Sender<FogSnapshot>),
}

pub struct FogNodeHandle {
    name: String,
    tx: Sender<NodeCommand>,
    join: Option<JoinHandle<Result<FogSnapshot, FogError>>>,
}

impl FogNodeHandle {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn admin(&self, cmd: AdminCommand) -> Result<(), FogError> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(NodeCommand::Admin(cmd, tx)).map_err(|_| FogError::Stopped)?;
        rx.recv().map_err(|_| FogError::Stopped)?.map_err(FogError::UnknownCommand)
    }

    pub fn snapshot(&self) -> Result<FogSnapshot, FogError> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(NodeCommand::Snapshot(tx)).map_err(|_| FogError::Stopped)?;
        rx.recv().map_err(|_| FogError::Stopped)
    }

    /// Waits for every assigned edge to finish; returns the final snapshot.
    pub fn join(mut self) -> Result<FogSnapshot, FogError> {
        self.join.take().expect("joined once").join().unwrap_or(Err(FogError::Stopped))
    }
}

/// Publishes uploads on `cloud/upload` and alarms on `alarms`, aggregated
/// into frames of at most [`UPLOAD_FRAME_BYTES`].
pub fn publish_output<L: Link>(
    producer: &mut Producer<L>,
    out: &FogOutput,
    retry: &mut RetryPolicy,
) -> Result<(), FogError> {
    let mut batches: Vec<Vec<Envelope>> = vec![Vec::new(), Vec::new()];
    for u in &out.uploads {
        batches[0].push(producer.prepare(TOPIC_UPLOAD, u.to_bytes())?);
    }
    for a in &out.alarms {
        batches[1].push(producer.prepare(TOPIC_ALARMS, a.to_json_line().into_bytes())?);
    }
    for batch in batches {
        for env in aggregate(&batch, UPLOAD_FRAME_BYTES)? {
            producer.send_with_retry(&env, &mut retry.backoff, retry.max_attempts)?;
        }
    }
    Ok(())
}

/// Starts the node loop. It ends once every edge in `edges` has sent its
/// end-of-stream marker, after publishing its own marker (carrying the final
/// snapshot) on `control/<fog_node>`.
pub fn spawn_fog_node<I, L>(
    engine: FogEngine,
    edges: impl IntoIterator<Item = String>,
    inbox: I,
    producer: Producer<L>,
    quarantine: Option<QuarantineWriter>,
) -> FogNodeHandle
where
    I: Inbox + 'static,
    L: Link + 'static,
{
    let name = engine.config().fog_node.clone();
    let edges: BTreeSet<String> = edges.into_iter().collect();
    let (tx, rx) = mpsc::channel();
    let thread_name = name.clone();
    let join = thread::Builder::new()
        .name(thread_name)
        .spawn(move || run_loop(engine, edges, inbox, producer, quarantine, rx))
        .expect("spawn fog node");
    FogNodeHandle { name, tx, join: Some(join) }
}

fn run_loop<I: Inbox, L: Link>(
    mut engine: FogEngine,
    mut remaining: BTreeSet<String>,
    mut inbox: I,
    mut producer: Producer<L>,
    quarantine: Option<QuarantineWriter>,
    commands: Receiver<NodeCommand>,
) -> Result<FogSnapshot, FogError> {
    let mut retry = RetryPolicy::default();
    let mut emit = |engine: &FogEngine, out: FogOutput, producer: &mut Producer<L>| -> Result<(), FogError> {
        if let Some(q) = &quarantine {
            q.write(&out.quarantine)?;
        }
        if !out.quarantine.is_empty() {
            tracing::warn!(node = %engine.config().fog_node, count = out.quarantine.len(), "quarantined records");
        }
        publish_output(producer, &out, &mut retry)
    };

    while !remaining.is_empty() {
        let cmd = if engine.is_paused() {
            match commands.recv_timeout(POLL) {
                Ok(c) => Some(c),
                Err(RecvTimeoutError::Timeout) => None,
                // nobody can resume a paused node any more
                Err(RecvTimeoutError::Disconnected) => return Err(FogError::Stopped),
            }
        } else {
            commands.try_recv().ok()
        };
        if let Some(cmd) = cmd {
            match cmd {
                NodeCommand::Admin(c, reply) => {
                    let result = engine.admin(c);
                    let ack = match result {
                        Ok(out) => {
                            emit(&engine, out, &mut producer)?;
                            Ok(())
                        }
                        Err(e) => Err(e.to_string()),
                    };
                    let _ = reply.send(ack);
                }
                NodeCommand::Snapshot(reply) => {
                    let _ = reply.send(engine.snapshot());
                }
            }
            continue;
        }
        if engine.is_paused() {
            continue;
        }
        let Some(delivery) = inbox.recv_timeout(POLL)? else {
            continue;
        };
        let topic = delivery.envelope.topic.as_str();
        let decode_err = |e: serde_json::Error| FogError::Decode { topic: topic.to_string(), message: e.to_string() };
        if topic.starts_with("packages/") {
            let pkg = StreamPackage::from_bytes(&delivery.envelope.payload).map_err(decode_err)?;
            let out = engine.ingest(&pkg)?;
            emit(&engine, out, &mut producer)?;
        } else if topic.starts_with("control/") {
            let eos = EndOfStream::from_bytes(&delivery.envelope.payload).map_err(decode_err)?;
            let out = engine.end_of_stream(&eos.edge_id)?;
            emit(&engine, out, &mut producer)?;
            remaining.remove(&eos.edge_id);
            tracing::info!(node = %engine.config().fog_node, edge = %eos.edge_id, "edge finished");
        }
    }

    let snapshot = engine.snapshot();
    let env = producer.prepare(
        &control_topic(&engine.config().fog_node),
        serde_json::to_vec(&snapshot).expect("snapshot serializes"),
    )?;
    producer.send_with_retry(&env, &mut retry.backoff, retry.max_attempts)?;
    Ok(snapshot)
}
