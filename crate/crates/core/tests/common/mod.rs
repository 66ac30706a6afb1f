//! Helpers shared by the integration tests. The ledger oracle only looks at
//! the clean feed and the defect ledger, never at fog code.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use fogline::config::{EdgeEntry, TopologyConfig};
use fogline::edge::EdgeConfig;
use fogline::feedgen::{DefectEntry, DefectKind, RouteSchedule, Schedule, TripPattern, REFERENCE_ROUTES};
use fogline::model::{parse_timestamp, CanonicalTuple, Field, RawTuple, Timestamp};
use fogline::pipeline::{split_by_route, Inputs};
use fogline::rng::SplitMix64;

/// Counts a corrupted run must report, derived from the ledger.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Expected {
    /// Keyed like the fog's drop counters, e.g. `missing_attribute_value(lat)`.
    pub drops: BTreeMap<String, u64>,
    pub duplicate_alarms: u64,
    pub duplicate_copies: u64,
    pub gap_alarms: u64,
    pub gap_missing: u64,
}

/// (route, trip, vehicle)
type TripScope<'a> = (&'a str, &'a str, &'a str);

/// Defects must not overlap (one ledger entry per clean tuple).
pub fn expected_from_ledger(clean: &[RawTuple], ledger: &[DefectEntry]) -> Expected {
    let mut e = Expected::default();
    let mut removed = HashSet::new();
    for d in ledger {
        let field = || d.field.clone().expect("field recorded");
        match d.defect {
            DefectKind::Drop => {
                removed.insert(d.index);
            }
            DefectKind::Duplicate => {
                *e.drops.entry("duplicate_tuple".into()).or_default() += 1;
                e.duplicate_alarms += 1;
                e.duplicate_copies += 1;
            }
            DefectKind::BlankField => {
                *e.drops.entry(format!("missing_attribute_value({})", field())).or_default() += 1;
                removed.insert(d.index);
            }
            DefectKind::WrongValue => {
                *e.drops.entry(format!("wrong_attribute_value({})", field())).or_default() += 1;
                removed.insert(d.index);
            }
        }
    }
    // ticks of each vehicle trip, in time order
    let mut trips: HashMap<TripScope, Vec<(Timestamp, usize)>> = HashMap::new();
    for (i, t) in clean.iter().enumerate() {
        let scope = (t.get(Field::RouteIdRta), t.get(Field::TripIdBr), t.get(Field::VehicleIdVlr));
        let ts = parse_timestamp(t.get(Field::Timestamp)).expect("clean timestamp");
        trips.entry(scope).or_default().push((ts, i));
    }
    for ticks in trips.values_mut() {
        ticks.sort();
        let mut run = 0u64;
        let mut seen_survivor = false;
        for (_, i) in ticks.iter() {
            if removed.contains(i) {
                run += 1;
                continue;
            }
            if seen_survivor && run > 0 {
                e.gap_alarms += 1;
                e.gap_missing += run;
            }
            seen_survivor = true;
            run = 0;
        }
    }
    e
}

/// A small random schedule: 1-5 routes, 1-4 trips each, 5-20 minute trips.
pub fn random_schedule(rng: &mut SplitMix64) -> Schedule {
    let routes = 1 + rng.below(5) as usize;
    let names: Vec<(String, u32)> = (0..routes).map(|r| (format!("{}", 10 + r * 7), 1 + rng.below(4) as u32)).collect();
    let refs: Vec<(&str, u32)> = names.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    let trip_seconds = 300 + 60 * rng.below(16) as i64;
    Schedule::uniform(&refs, 1_700_000_000, trip_seconds, 5)
}

pub fn reference_schedule(trip_seconds: i64) -> Schedule {
    Schedule::reference_day(1_492_214_400, trip_seconds)
}

/// About `n` tuples from the 16 reference routes running side by side, two
/// trips each, so the feed is as dense as a busy service hour.
pub fn dense_schedule(n: usize) -> Schedule {
    let trips = 2 * REFERENCE_ROUTES.len();
    let ticks = n.div_ceil(trips) as i64;
    let routes = REFERENCE_ROUTES
        .iter()
        .map(|(r, _)| RouteSchedule {
            route_id_rta: r.to_string(),
            route_name: format!("Route {r}"),
            trips: TripPattern {
                count: 2,
                first_departure: 1_492_236_000,
                headway_seconds: 600,
                duration_seconds: (ticks - 1) * 5,
                vehicles: None,
            }
            .expand(r),
        })
        .collect();
    Schedule { cadence_seconds: 5, routes }
}

pub fn topology(edges: &[&str], fogs: usize) -> TopologyConfig {
    TopologyConfig {
        fog_count: fogs,
        edges: edges
            .iter()
            .map(|id| EdgeEntry { id: id.to_string(), source: None, package_period_seconds: None })
            .collect(),
        ..Default::default()
    }
}

pub fn inputs_for(cfg: &TopologyConfig, schedule: Schedule, tuples: &[RawTuple]) -> Inputs {
    let lines: Vec<String> = tuples.iter().map(RawTuple::to_csv_line).collect();
    let parts = split_by_route(lines, cfg.edges.len());
    let edges: Vec<(EdgeConfig, Vec<String>)> = cfg.edge_configs().into_iter().zip(parts).collect();
    Inputs { schedule, edges }
}

/// Single pass: each tuple's (route, trip, timestamp) is >= its predecessor's.
pub fn sorted_single_pass(tuples: &[CanonicalTuple]) -> bool {
    tuples.windows(2).all(|w| {
        let a = (&w[0].key.route_id_rta, &w[0].key.trip_id_br, w[0].key.timestamp);
        let b = (&w[1].key.route_id_rta, &w[1].key.trip_id_br, w[1].key.timestamp);
        a <= b
    })
}
