//! Deterministic synthetic transit feeds with controlled defect injection,
//! and the CSV/JSONL file formats they travel in.
//!
//! Files written by [`write_outputs`]:
//!
//! * `feed.csv`: 17-column records with a header row.
//! * `manifest.jsonl`: one object per scheduled trip with fields `route_id_rta`,
//!   `trip_id_br`, `vehicle_id_vlr`, `trip_start`, `trip_finish`,
//!   `cadence_seconds`, `tuple_count`.
//! * `ledger.jsonl`: one object per injected defect with fields `defect`
//!   (`drop`, `duplicate`, `blank_field`, `wrong_value`), `index`,
//!   `route_id_rta`, `trip_id_br`, `vehicle_id_vlr`, `timestamp` and, for
//!   blank/wrong values, `field`.
//! * `schedule.json`: the resolved schedule.

mod corrupt;
mod csvio;
mod generate;
mod schedule;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use corrupt::{corrupt_feed, CorruptedFeed, CorruptionPlan, DefectEntry, DefectKind, WRONG_TIMESTAMP_OFFSET};
pub use csvio::{read_csv, read_csv_from, read_record_lines, record_lines, write_csv, write_csv_to};
pub use generate::{generate_clean_feed, Feed, ManifestEntry, BBOX_LAT, BBOX_LNG};
pub use schedule::{
    load_schedule, parse_schedule_toml, RouteSchedule, Schedule, TripPattern, TripSchedule, DEFAULT_CADENCE_SECONDS,
    REFERENCE_ROUTES,
};

use crate::jsonl;
use crate::model::{MalformedRecord, RawTuple};

#[derive(Debug, Error)]
pub enum FeedError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid corruption plan: {0}")]
    InvalidPlan(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Malformed(#[from] MalformedRecord),
}

impl FeedError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FeedError::Io { path: path.to_path_buf(), source }
    }
}

pub const FEED_FILE: &str = "feed.csv";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const SCHEDULE_FILE: &str = "schedule.json";

/// Writes feed, manifest, ledger and schedule into `dir`.
pub fn write_outputs(
    dir: &Path,
    schedule: &Schedule,
    tuples: &[RawTuple],
    manifest: &[ManifestEntry],
    ledger: &[DefectEntry],
) -> Result<(), FeedError> {
    std::fs::create_dir_all(dir).map_err(|e| FeedError::io(dir, e))?;
    write_csv(tuples, &dir.join(FEED_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    jsonl::write_file(&manifest_path, manifest).map_err(|e| FeedError::io(&manifest_path, e))?;
    let ledger_path = dir.join(LEDGER_FILE);
    jsonl::write_file(&ledger_path, ledger).map_err(|e| FeedError::io(&ledger_path, e))?;
    let schedule_path = dir.join(SCHEDULE_FILE);
    std::fs::write(&schedule_path, schedule.to_json()).map_err(|e| FeedError::io(&schedule_path, e))?;
    Ok(())
}
