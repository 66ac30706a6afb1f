use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FeedError;
use crate::model::{serde_ts, Timestamp};

pub const DEFAULT_CADENCE_SECONDS: u32 = 5;

/// Scheduled trip counts of the 16 routes observed on the reference service day.
pub const REFERENCE_ROUTES: [(&str, u32); 16] = [
    ("50", 31),
    ("51", 65),
    ("52", 65),
    ("60", 31),
    ("61", 32),
    ("62", 31),
    ("63", 32),
    ("64", 32),
    ("65", 31),
    ("70", 13),
    ("71", 14),
    ("80", 13),
    ("81", 13),
    ("93", 22),
    ("94", 32),
    ("95", 21),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripSchedule {
    pub trip_id_br: String,
    #[serde(with = "serde_ts")]
    pub trip_start: Timestamp,
    #[serde(with = "serde_ts")]
    pub trip_finish: Timestamp,
    pub vehicle_id_vlr: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteSchedule {
    pub route_id_rta: String,
    #[serde(default)]
    pub route_name: String,
    pub trips: Vec<TripSchedule>,
}

impl RouteSchedule {
    pub fn trip_count(&self) -> usize {
        self.trips.len()
    }
}

/// Known service: every trip the cloud expects to see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(default = "default_cadence")]
    pub cadence_seconds: u32,
    #[serde(default)]
    pub routes: Vec<RouteSchedule>,
}

fn default_cadence() -> u32 {
    DEFAULT_CADENCE_SECONDS
}

impl Default for Schedule {
    fn default() -> Self {
        Self { cadence_seconds: DEFAULT_CADENCE_SECONDS, routes: Vec::new() }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), FeedError> {
        let invalid = |msg: String| Err(FeedError::InvalidSchedule(msg));
        if self.cadence_seconds == 0 {
            return invalid("cadence_seconds must be positive".into());
        }
        let mut routes = HashSet::new();
        for route in &self.routes {
            if route.route_id_rta.is_empty() {
                return invalid("empty route_id_rta".into());
            }
            if !routes.insert(route.route_id_rta.as_str()) {
                return invalid(format!("route {} listed twice", route.route_id_rta));
            }
            let mut trips = HashSet::new();
            for trip in &route.trips {
                if trip.trip_id_br.is_empty() || trip.vehicle_id_vlr.is_empty() {
                    return invalid(format!("route {}: empty trip or vehicle id", route.route_id_rta));
                }
                if !trips.insert(trip.trip_id_br.as_str()) {
                    return invalid(format!("route {}: trip {} listed twice", route.route_id_rta, trip.trip_id_br));
                }
                if trip.trip_start >= trip.trip_finish {
                    return invalid(format!(
                        "route {}: trip {} starts at or after its finish",
                        route.route_id_rta, trip.trip_id_br
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn trip_count(&self) -> usize {
        self.routes.iter().map(RouteSchedule::trip_count).sum()
    }

    pub fn route(&self, route_id_rta: &str) -> Option<&RouteSchedule> {
        self.routes.iter().find(|r| r.route_id_rta == route_id_rta)
    }

    /// Evenly spaced trips for each `(route_id, trip_count)` between `day_start + 6h`
    /// and `day_start + 22h`, each lasting `trip_seconds`.
    pub fn uniform(routes: &[(&str, u32)], day_start: Timestamp, trip_seconds: i64, cadence_seconds: u32) -> Self {
        let service_start = day_start + 6 * 3600;
        let service_span = 16 * 3600;
        let routes = routes
            .iter()
            .map(|&(route_id, count)| {
                let pattern = TripPattern {
                    count,
                    first_departure: service_start,
                    headway_seconds: (service_span / i64::from(count.max(1))).max(1),
                    duration_seconds: trip_seconds,
                    vehicles: None,
                };
                RouteSchedule {
                    route_id_rta: route_id.to_string(),
                    route_name: format!("Route {route_id}"),
                    trips: pattern.expand(route_id),
                }
            })
            .collect();
        Self { cadence_seconds, routes }
    }

    /// The 16-route reference service day with `trip_seconds` long trips.
    pub fn reference_day(day_start: Timestamp, trip_seconds: i64) -> Self {
        Self::uniform(&REFERENCE_ROUTES, day_start, trip_seconds, DEFAULT_CADENCE_SECONDS)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Compact description of a regular service: `count` trips every `headway_seconds`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripPattern {
    pub count: u32,
    #[serde(with = "serde_ts")]
    pub first_departure: Timestamp,
    pub headway_seconds: i64,
    pub duration_seconds: i64,
    /// Fleet size; defaults to the number of trips simultaneously on the road.
    #[serde(default)]
    pub vehicles: Option<u32>,
}

impl TripPattern {
    pub fn expand(&self, route_id: &str) -> Vec<TripSchedule> {
        let headway = self.headway_seconds.max(1);
        let fleet = self.vehicles.unwrap_or_else(|| (self.duration_seconds / headway + 1) as u32).max(1);
        (0..self.count)
            .map(|k| {
                let start = self.first_departure + i64::from(k) * headway;
                TripSchedule {
                    trip_id_br: format!("{route_id}-{:03}", k + 1),
                    trip_start: start,
                    trip_finish: start + self.duration_seconds,
                    vehicle_id_vlr: format!("{route_id}-v{}", k % fleet),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RouteSpec {
    route_id_rta: String,
    #[serde(default)]
    route_name: Option<String>,
    #[serde(default)]
    trips: Vec<TripSchedule>,
    #[serde(default)]
    generate: Option<TripPattern>,
}

/// TOML schedule: explicit `[[routes.trips]]` and/or a `generate` pattern per route.
#[derive(Debug, Clone, Deserialize)]
struct ScheduleFile {
    #[serde(default = "default_cadence")]
    cadence_seconds: u32,
    #[serde(default)]
    routes: Vec<RouteSpec>,
}

impl ScheduleFile {
    fn resolve(self) -> Schedule {
        let routes = self
            .routes
            .into_iter()
            .map(|spec| {
                let mut trips = spec.trips;
                if let Some(pattern) = &spec.generate {
                    trips.extend(pattern.expand(&spec.route_id_rta));
                }
                RouteSchedule {
                    route_name: spec.route_name.unwrap_or_else(|| format!("Route {}", spec.route_id_rta)),
                    route_id_rta: spec.route_id_rta,
                    trips,
                }
            })
            .collect();
        Schedule { cadence_seconds: self.cadence_seconds, routes }
    }
}

pub fn parse_schedule_toml(text: &str) -> Result<Schedule, FeedError> {
    let file: ScheduleFile = toml::from_str(text).map_err(|e| FeedError::InvalidSchedule(e.to_string()))?;
    let schedule = file.resolve();
    schedule.validate()?;
    Ok(schedule)
}

/// Loads a `.toml` schedule description or a resolved `.json` schedule.
pub fn load_schedule(path: &Path) -> Result<Schedule, FeedError> {
    let text = std::fs::read_to_string(path).map_err(|source| FeedError::Io { path: path.to_path_buf(), source })?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let schedule = if is_json {
        let s: Schedule =
            serde_json::from_str(&text).map_err(|e| FeedError::InvalidSchedule(format!("{}: {e}", path.display())))?;
        s.validate()?;
        s
    } else {
        parse_schedule_toml(&text)?
    };
    Ok(schedule)
}
