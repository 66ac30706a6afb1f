use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::clean::sort_window;
use crate::model::{CanonicalTuple, Timestamp};

pub const DEFAULT_RETENTION_SECONDS: i64 = 24 * 3600;

/// Table key: the edge that produced the package and the window's start.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowId {
    pub edge_id: String,
    pub start: Timestamp,
}

impl WindowId {
    pub fn new(edge_id: impl Into<String>, start: Timestamp) -> Self {
        Self { edge_id: edge_id.into(), start }
    }
}

impl fmt::Display for WindowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.edge_id, self.start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UploadState {
    Retained,
    Uploaded,
    Evicted,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DbError {
    #[error("unknown window {0}")]
    UnknownWindow(WindowId),
    #[error("window {0} must be uploaded before eviction")]
    EvictBeforeUpload(WindowId),
    #[error("window {0} was already leveraged")]
    AlreadyLeveraged(WindowId),
    #[error("window {0} has not been leveraged")]
    NotLeveraged(WindowId),
    #[error("window {0} no longer accepts tuples")]
    TableClosed(WindowId),
}

#[derive(Debug, Clone)]
struct Table {
    tuples: Vec<CanonicalTuple>,
    state: UploadState,
    leveraged: bool,
    uploaded_at: Option<Timestamp>,
}

/// Per-window tables with a one-way life cycle
/// `Retained -> Uploaded -> Evicted`. Evicted tables keep a tombstone so
/// late tuples for them can still be recognised.
#[derive(Debug, Clone)]
pub struct StreamDatabase {
    tables: BTreeMap<WindowId, Table>,
    retention_ttl: i64,
}

impl Default for StreamDatabase {
    fn default() -> Self {
        Self::new(DEFAULT_RETENTION_SECONDS)
    }
}

impl StreamDatabase {
    pub fn new(retention_ttl: i64) -> Self {
        Self { tables: BTreeMap::new(), retention_ttl }
    }

    pub fn retention_ttl(&self) -> i64 {
        self.retention_ttl
    }

    pub fn set_retention_ttl(&mut self, ttl: i64) {
        self.retention_ttl = ttl;
    }

    pub fn state(&self, id: &WindowId) -> Option<UploadState> {
        self.tables.get(id).map(|t| t.state)
    }

    /// Appends `tuples` to the window's table, creating it if needed, and
    /// keeps the table sorted.
    pub fn store_table(&mut self, id: &WindowId, tuples: Vec<CanonicalTuple>) -> Result<usize, DbError> {
        let table = self.tables.entry(id.clone()).or_insert_with(|| Table {
            tuples: Vec::new(),
            state: UploadState::Retained,
            leveraged: false,
            uploaded_at: None,
        });
        if table.state != UploadState::Retained || table.leveraged {
            return Err(DbError::TableClosed(id.clone()));
        }
        if !tuples.is_empty() {
            table.tuples.extend(tuples);
            sort_window(&mut table.tuples);
        }
        Ok(table.tuples.len())
    }

    /// Hands out the table's tuples for upload, once.
    pub fn leverage(&mut self, id: &WindowId) -> Result<Vec<CanonicalTuple>, DbError> {
        let table = self.tables.get_mut(id).ok_or_else(|| DbError::UnknownWindow(id.clone()))?;
        if table.leveraged {
            return Err(DbError::AlreadyLeveraged(id.clone()));
        }
        table.leveraged = true;
        Ok(table.tuples.clone())
    }

    pub fn mark_uploaded(&mut self, id: &WindowId, now: Timestamp) -> Result<(), DbError> {
        let table = self.tables.get_mut(id).ok_or_else(|| DbError::UnknownWindow(id.clone()))?;
        if !table.leveraged {
            return Err(DbError::NotLeveraged(id.clone()));
        }
        if table.state == UploadState::Retained {
            table.state = UploadState::Uploaded;
            table.uploaded_at = Some(now);
        }
        Ok(())
    }

    /// Evicts one table; only uploaded tables past their TTL qualify.
    /// Returns whether the table was evicted now.
    pub fn evict(&mut self, id: &WindowId, now: Timestamp) -> Result<bool, DbError> {
        let ttl = self.retention_ttl;
        let table = self.tables.get_mut(id).ok_or_else(|| DbError::UnknownWindow(id.clone()))?;
        match (table.state, table.uploaded_at) {
            (UploadState::Retained, _) => Err(DbError::EvictBeforeUpload(id.clone())),
            (UploadState::Uploaded, Some(at)) if now - at >= ttl => {
                table.state = UploadState::Evicted;
                table.tuples = Vec::new();
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    pub fn evict_expired(&mut self, now: Timestamp) -> Vec<WindowId> {
        let ids: Vec<WindowId> =
            self.tables.iter().filter(|(_, t)| t.state == UploadState::Uploaded).map(|(id, _)| id.clone()).collect();
        ids.into_iter().filter(|id| self.evict(id, now).unwrap_or(false)).collect()
    }

    pub fn table_len(&self, id: &WindowId) -> Option<usize> {
        self.tables.get(id).map(|t| t.tuples.len())
    }

    pub fn count_in(&self, state: UploadState) -> usize {
        self.tables.values().filter(|t| t.state == state).count()
    }

    /// Tuples currently held in memory.
    pub fn resident_tuples(&self) -> usize {
        self.tables.values().map(|t| t.tuples.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TupleKey;

    fn tuple(id: u64, route: &str, ts: Timestamp) -> CanonicalTuple {
        CanonicalTuple {
            fog_id: id,
            key: TupleKey {
                vehicle_id_vlr: "v".into(),
                route_id_rta: route.into(),
                trip_id_br: "t".into(),
                timestamp: ts,
            },
            route_name: String::new(),
            trip_start: 0,
            trip_finish: 0,
            lat: 0.0,
            lng: 0.0,
            late: false,
        }
    }

    #[test]
    fn store_then_leverage_sorted() {
        let mut db = StreamDatabase::default();
        let w = WindowId::new("e", 0);
        let input: Vec<CanonicalTuple> = (0..100).rev().map(|i| tuple(100 - i, "r", i as i64)).collect();
        assert_eq!(db.store_table(&w, input).unwrap(), 100);
        let out = db.leverage(&w).unwrap();
        assert_eq!(out.len(), 100);
        assert!(out.windows(2).all(|p| p[0].sort_key() <= p[1].sort_key()));
        assert_eq!(db.leverage(&w), Err(DbError::AlreadyLeveraged(w.clone())));
    }

    #[test]
    fn evicting_retained_table_is_refused() {
        let mut db = StreamDatabase::default();
        let w = WindowId::new("e", 0);
        db.store_table(&w, vec![tuple(1, "r", 0)]).unwrap();
        assert_eq!(db.evict(&w, i64::MAX), Err(DbError::EvictBeforeUpload(w.clone())));
        assert_eq!(db.state(&w), Some(UploadState::Retained));
        assert_eq!(db.table_len(&w), Some(1));
    }

    #[test]
    fn full_life_cycle() {
        let mut db = StreamDatabase::new(100);
        let w = WindowId::new("e", 0);
        db.store_table(&w, vec![tuple(1, "r", 0), tuple(2, "r", 5)]).unwrap();
        assert_eq!(db.mark_uploaded(&w, 10), Err(DbError::NotLeveraged(w.clone())));
        db.leverage(&w).unwrap();
        db.mark_uploaded(&w, 10).unwrap();
        assert_eq!(db.state(&w), Some(UploadState::Uploaded));
        assert!(db.evict_expired(109).is_empty());
        assert_eq!(db.evict_expired(110), vec![w.clone()]);
        assert_eq!(db.state(&w), Some(UploadState::Evicted));
        assert_eq!(db.resident_tuples(), 0);
        // no way back
        db.mark_uploaded(&w, 200).unwrap();
        assert_eq!(db.state(&w), Some(UploadState::Evicted));
        assert_eq!(db.store_table(&w, vec![]), Err(DbError::TableClosed(w.clone())));
    }

    #[test]
    fn unknown_window() {
        let mut db = StreamDatabase::default();
        let w = WindowId::new("nope", 0);
        assert_eq!(db.leverage(&w), Err(DbError::UnknownWindow(w.clone())));
        assert_eq!(db.evict(&w, 0), Err(DbError::UnknownWindow(w)));
    }

    #[test]
    fn window_id_display() {
        assert_eq!(WindowId::new("edge1", 1_700_000_100).to_string(), "edge1-1700000100");
    }
}
