use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{FeedError, Schedule};
use crate::model::{format_timestamp, Field, RawTuple, Timestamp, FIELD_COUNT};

/// Bounding box the synthetic buses drive in (Greater Moncton).
pub const BBOX_LAT: (f64, f64) = (46.05, 46.15);
pub const BBOX_LNG: (f64, f64) = (-64.90, -64.70);

/// Ground truth for one scheduled trip of a clean feed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub route_id_rta: String,
    pub trip_id_br: String,
    pub vehicle_id_vlr: String,
    pub trip_start: Timestamp,
    pub trip_finish: Timestamp,
    pub cadence_seconds: u32,
    pub tuple_count: u64,
}

impl ManifestEntry {
    /// Timestamps of every expected report, in order.
    pub fn ticks(&self) -> impl Iterator<Item = Timestamp> + '_ {
        let step = i64::from(self.cadence_seconds);
        (0..self.tuple_count as i64).map(move |k| self.trip_start + k * step)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Feed {
    pub tuples: Vec<RawTuple>,
    pub manifest: Vec<ManifestEntry>,
}

impl Feed {
    pub fn expected_tuples(&self) -> u64 {
        self.manifest.iter().map(|m| m.tuple_count).sum()
    }
}

fn position(route_idx: usize, route_total: usize, outbound: bool, frac: f64) -> (f64, f64) {
    let center = ((BBOX_LAT.0 + BBOX_LAT.1) / 2.0, (BBOX_LNG.0 + BBOX_LNG.1) / 2.0);
    let radius = ((BBOX_LAT.1 - BBOX_LAT.0) / 2.0 * 0.9, (BBOX_LNG.1 - BBOX_LNG.0) / 2.0 * 0.9);
    let angle = 2.0 * PI * route_idx as f64 / route_total.max(1) as f64;
    let end = (center.0 + radius.0 * angle.sin(), center.1 + radius.1 * angle.cos());
    let f = if outbound { frac } else { 1.0 - frac };
    (center.0 + (end.0 - center.0) * f, center.1 + (end.1 - center.1) * f)
}

/// One report per vehicle per cadence tick of each trip, merged into arrival
/// order (timestamp, then schedule order).
pub fn generate_clean_feed(schedule: &Schedule) -> Result<Feed, FeedError> {
    schedule.validate()?;
    let cadence = i64::from(schedule.cadence_seconds);
    let mut rows: Vec<(Timestamp, usize, RawTuple)> = Vec::new();
    let mut manifest = Vec::new();
    let mut ordinal = 0usize;

    for (ri, route) in schedule.routes.iter().enumerate() {
        let nickname: String = route.route_name.split_whitespace().filter_map(|w| w.chars().next()).collect();
        for (ti, trip) in route.trips.iter().enumerate() {
            let ticks = (trip.trip_finish - trip.trip_start) / cadence + 1;
            manifest.push(ManifestEntry {
                route_id_rta: route.route_id_rta.clone(),
                trip_id_br: trip.trip_id_br.clone(),
                vehicle_id_vlr: trip.vehicle_id_vlr.clone(),
                trip_start: trip.trip_start,
                trip_finish: trip.trip_finish,
                cadence_seconds: schedule.cadence_seconds,
                tuple_count: ticks as u64,
            });
            let span = (trip.trip_finish - trip.trip_start) as f64;
            for k in 0..ticks {
                let ts = trip.trip_start + k * cadence;
                let (lat, lng) = position(ri, schedule.routes.len(), ti % 2 == 0, (ts - trip.trip_start) as f64 / span);
                let mut fields: [String; FIELD_COUNT] = Default::default();
                let mut put = |f: Field, v: String| fields[f.index()] = v;
                put(Field::RouteIdVlr, (1000 + ri).to_string());
                put(Field::RouteName, route.route_name.clone());
                put(Field::RouteIdRta, route.route_id_rta.clone());
                put(Field::RouteNickname, nickname.clone());
                put(Field::TripIdBr, trip.trip_id_br.clone());
                put(Field::TransitAuthorityServiceTimeId, "wkd".into());
                put(Field::TripIdTta, format!("tta-{}", trip.trip_id_br));
                put(Field::TripStart, format_timestamp(trip.trip_start));
                put(Field::TripFinish, format_timestamp(trip.trip_finish));
                put(Field::VehicleIdYab, format!("yab-{}", trip.vehicle_id_vlr));
                put(Field::VehicleIdVlr, trip.vehicle_id_vlr.clone());
                put(Field::VehicleIdVlrTa, format!("Bus {}", trip.vehicle_id_vlr));
                put(Field::Bdescription, "Nova Bus LFS 40ft".into());
                put(Field::Lat, format!("{lat:.6}"));
                put(Field::Lng, format!("{lng:.6}"));
                put(Field::Timestamp, format_timestamp(ts));
                rows.push((ts, ordinal, RawTuple::from_fields(fields)));
                ordinal += 1;
            }
        }
    }

    rows.sort_by_key(|(ts, ord, _)| (*ts, *ord));
    let tuples = rows
        .into_iter()
        .enumerate()
        .map(|(i, (_, _, mut t))| {
            t.set(Field::VlrId, (i + 1).to_string());
            t
        })
        .collect();
    Ok(Feed { tuples, manifest })
}
