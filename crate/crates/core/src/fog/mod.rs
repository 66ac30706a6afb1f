//! Fog node: the life-cycle engine between edge and cloud.
//!
//! [`FogEngine`] holds the pure pipeline (acquire, assign IDs, clean, sort,
//! store, leverage). [`node`] wraps it in a thread fed by a broker
//! subscription and steered through a command channel.

pub mod clean;
pub mod db;
mod engine;
pub mod monitor;
pub mod node;

use thiserror::Error;

use crate::broker::BrokerError;

pub use clean::{
    acquire, assign_ids, clean, is_sorted, sort_window, Acquired, CleanConfig, CleanOutput, DedupIndex, IdCounter,
    TripIndex,
};
pub use db::{DbError, StreamDatabase, UploadState, WindowId};
pub use engine::{AdminCommand, FogConfig, FogEngine, FogOutput, FogSnapshot, QuarantinedRecord, TablePayload};
pub use monitor::{Monitor, Task, TaskStatus};
pub use node::{spawn_fog_node, FogNodeHandle, QuarantineWriter};

#[derive(Debug, Error)]
pub enum FogError {
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("unknown admin command {0:?}")]
    UnknownCommand(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("undecodable message on {topic}: {message}")]
    Decode { topic: String, message: String },
    #[error("quarantine: {0}")]
    Io(#[from] std::io::Error),
    #[error("fog node stopped")]
    Stopped,
}
