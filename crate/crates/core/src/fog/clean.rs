//! Acquisition, ID assignment, cleaning and sorting: blocks one to three of
//! the fog execution model.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::model::{
    parse_raw_record, parse_timestamp, tuple_key, AlarmDetail, AlarmEvent, CanonicalTuple, DropReason, Field, KeyScope,
    MalformedRecord, RawTuple, StreamPackage, Timestamp, TupleKey,
};

pub const DEFAULT_SLACK_SECONDS: i64 = 120;

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Acquired {
    pub tuples: Vec<RawTuple>,
    /// The verbatim line and why it could not be parsed.
    pub malformed: Vec<(String, MalformedRecord)>,
}

pub fn acquire(pkg: &StreamPackage) -> Acquired {
    let mut out = Acquired::default();
    for (i, line) in pkg.records.iter().enumerate() {
        match parse_raw_record(line) {
            Ok(t) => out.tuples.push(t),
            Err(e) => out.malformed.push((line.clone(), e.at_line(i + 1))),
        }
    }
    out
}

/// The node's monotone ID sequence; the first ID handed out is 1.
#[derive(Debug, Clone, Default)]
pub struct IdCounter {
    last: u64,
}

impl IdCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last(&self) -> u64 {
        self.last
    }
}

pub fn assign_ids(tuples: Vec<RawTuple>, counter: &mut IdCounter) -> Vec<(u64, RawTuple)> {
    tuples
        .into_iter()
        .map(|t| {
            counter.last += 1;
            (counter.last, t)
        })
        .collect()
}

/// TupleKeys seen in the last `horizon` windows.
#[derive(Debug, Clone)]
pub struct DedupIndex {
    horizon: usize,
    /// (start, keys, saw any tuple)
    windows: VecDeque<(Timestamp, HashSet<TupleKey>, bool)>,
}

impl DedupIndex {
    pub fn new(horizon: usize) -> Self {
        Self { horizon: horizon.max(1), windows: VecDeque::new() }
    }

    /// Makes `start` the newest window, forgetting windows beyond the horizon.
    /// Windows that saw no tuples do not count towards the horizon, so a run
    /// of empty packages after an idle spell cannot flush the last real window.
    pub fn open_window(&mut self, start: Timestamp) {
        match self.windows.back_mut() {
            Some((s, _, _)) if *s == start => {}
            Some((s, _, false)) => *s = start,
            _ => self.windows.push_back((start, HashSet::new(), false)),
        }
        while self.windows.len() > self.horizon {
            self.windows.pop_front();
        }
    }

    pub fn contains(&self, key: &TupleKey) -> bool {
        self.windows.iter().any(|(_, keys, _)| keys.contains(key))
    }

    /// Records `key` in the newest window. Returns false if it was already known.
    pub fn insert(&mut self, key: TupleKey) -> bool {
        if self.windows.is_empty() {
            self.windows.push_back((Timestamp::MIN, HashSet::new(), false));
        }
        let known = self.contains(&key);
        let newest = self.windows.back_mut().expect("window");
        newest.2 = true;
        !known && newest.1.insert(key)
    }

    pub fn len(&self) -> usize {
        self.windows.iter().map(|(_, k, _)| k.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Last surviving timestamp per (route, trip, vehicle).
#[derive(Debug, Clone, Default)]
pub struct TripIndex {
    last: HashMap<KeyScope, Timestamp>,
}

impl TripIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_seen(&self, scope: &KeyScope) -> Option<Timestamp> {
        self.last.get(scope).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CleanConfig {
    pub cadence_seconds: i64,
    pub slack_seconds: i64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self { cadence_seconds: 5, slack_seconds: DEFAULT_SLACK_SECONDS }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CleanOutput {
    pub survivors: Vec<CanonicalTuple>,
    pub drops: Vec<(RawTuple, DropReason)>,
    pub alarms: Vec<AlarmEvent>,
}

pub fn scope_of(key: &TupleKey) -> KeyScope {
    KeyScope {
        route_id_rta: key.route_id_rta.clone(),
        trip_id_br: key.trip_id_br.clone(),
        vehicle_id_vlr: key.vehicle_id_vlr.clone(),
    }
}

fn coordinate(t: &RawTuple, field: Field, bound: f64) -> Result<f64, DropReason> {
    match t.get(field).trim().parse::<f64>() {
        Ok(v) if v.is_finite() && (-bound..=bound).contains(&v) => Ok(v),
        _ => Err(DropReason::wrong(field)),
    }
}

fn instant(t: &RawTuple, field: Field) -> Result<Timestamp, DropReason> {
    parse_timestamp(t.get(field)).ok_or_else(|| DropReason::wrong(field))
}

/// Missing and wrong-value rules. On success returns the projected tuple
/// (without its final `late` flag).
pub fn validate(fog_id: u64, t: &RawTuple, slack: i64) -> Result<CanonicalTuple, DropReason> {
    if let Some(f) = t.first_missing(&Field::REQUIRED) {
        return Err(DropReason::missing(f));
    }
    let lat = coordinate(t, Field::Lat, 90.0)?;
    let lng = coordinate(t, Field::Lng, 180.0)?;
    let trip_start = instant(t, Field::TripStart)?;
    let trip_finish = instant(t, Field::TripFinish)?;
    if trip_finish < trip_start {
        return Err(DropReason::wrong(Field::TripFinish));
    }
    let key = tuple_key(t)?;
    if key.timestamp < trip_start - slack || key.timestamp > trip_finish + slack {
        return Err(DropReason::wrong(Field::Timestamp));
    }
    Ok(CanonicalTuple {
        fog_id,
        key,
        route_name: t.get(Field::RouteName).to_string(),
        trip_start,
        trip_finish,
        lat,
        lng,
        late: false,
    })
}

/// Applies the rules in order: missing attribute, wrong value, duplicate,
/// projection, then the gap scan over the survivors.
pub fn clean(
    tuples: Vec<(u64, RawTuple)>,
    dedup: &mut DedupIndex,
    trips: &mut TripIndex,
    cfg: &CleanConfig,
    emitted_at: Timestamp,
) -> CleanOutput {
    let mut out = CleanOutput::default();
    let mut dup_counts: HashMap<TupleKey, u64> = HashMap::new();
    let mut dup_order: Vec<TupleKey> = Vec::new();

    for (fog_id, raw) in tuples {
        let canonical = match validate(fog_id, &raw, cfg.slack_seconds) {
            Ok(c) => c,
            Err(reason) => {
                out.drops.push((raw, reason));
                continue;
            }
        };
        if !dedup.insert(canonical.key.clone()) {
            let n = dup_counts.entry(canonical.key.clone()).or_insert(0);
            if *n == 0 {
                dup_order.push(canonical.key.clone());
            }
            *n += 1;
            out.drops.push((raw, DropReason::duplicate()));
            continue;
        }
        out.survivors.push(canonical);
    }

    for key in dup_order {
        let duplicate_count = dup_counts[&key];
        out.alarms.push(AlarmEvent {
            emitted_at,
            key_scope: scope_of(&key),
            detail: AlarmDetail::DuplicateTuples { key, duplicate_count },
        });
    }
    out.alarms.extend(gap_scan(&out.survivors, trips, cfg.cadence_seconds, emitted_at));
    out
}

/// A gap `g >= 2 * cadence` between consecutive surviving reports of one
/// vehicle on one trip raises `MissingTuples` with `floor(g / cadence) - 1`.
/// Reports at or before the last one seen for the trip are out of order and
/// do not take part.
pub fn gap_scan(
    survivors: &[CanonicalTuple],
    trips: &mut TripIndex,
    cadence: i64,
    emitted_at: Timestamp,
) -> Vec<AlarmEvent> {
    let cadence = cadence.max(1);
    let mut points: Vec<(KeyScope, Timestamp)> =
        survivors.iter().map(|t| (scope_of(&t.key), t.key.timestamp)).collect();
    points.sort();
    let mut alarms = Vec::new();
    for (scope, ts) in points {
        match trips.last.get_mut(&scope) {
            Some(last) if ts <= *last => {}
            Some(last) => {
                let g = ts - *last;
                if g >= 2 * cadence {
                    alarms.push(AlarmEvent {
                        emitted_at,
                        key_scope: scope,
                        detail: AlarmDetail::MissingTuples {
                            gap_from: *last,
                            gap_to: ts,
                            estimated_missing: (g / cadence - 1) as u64,
                        },
                    });
                }
                *last = ts;
            }
            None => {
                trips.last.insert(scope, ts);
            }
        }
    }
    alarms
}

/// Stable sort by (route_id_rta, trip_id_br, timestamp).
pub fn sort_window(tuples: &mut [CanonicalTuple]) {
    tuples.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

/// Single-pass check of the sort postcondition, including fog_id order on ties.
pub fn is_sorted(tuples: &[CanonicalTuple]) -> bool {
    tuples.windows(2).all(|p| match p[0].sort_key().cmp(&p[1].sort_key()) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Equal => p[0].fog_id < p[1].fog_id,
        std::cmp::Ordering::Greater => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AlarmKind, DropCode};
    use proptest::prelude::*;

    fn raw(vehicle: &str, trip: &str, ts: Timestamp) -> RawTuple {
        let mut t = RawTuple::from_fields(std::array::from_fn(|_| String::new()));
        t.set(Field::VlrId, "1");
        t.set(Field::RouteIdRta, "50");
        t.set(Field::RouteName, "Main");
        t.set(Field::TripIdBr, trip);
        t.set(Field::TripStart, "0");
        t.set(Field::TripFinish, "10000");
        t.set(Field::VehicleIdVlr, vehicle);
        t.set(Field::Lat, "46.1");
        t.set(Field::Lng, "-64.8");
        t.set(Field::Timestamp, ts.to_string());
        t
    }

    fn run(tuples: Vec<RawTuple>) -> CleanOutput {
        let mut ids = IdCounter::new();
        let mut dedup = DedupIndex::new(2);
        dedup.open_window(0);
        clean(assign_ids(tuples, &mut ids), &mut dedup, &mut TripIndex::new(), &CleanConfig::default(), 0)
    }

    #[test]
    fn acquire_counts_malformed() {
        let mut records: Vec<String> = (0..49).map(|i| raw("v", "t", i * 5).to_csv_line()).collect();
        records.insert(10, "too,short".into());
        let pkg = StreamPackage { edge_id: "e".into(), window_start: 0, window_end: 300, seq: 1, records };
        let a = acquire(&pkg);
        assert_eq!((a.tuples.len(), a.malformed.len()), (49, 1));
        assert_eq!(a.malformed[0].1.line, Some(11));
        let empty = StreamPackage { records: vec![], ..pkg };
        assert_eq!(acquire(&empty), Acquired::default());
    }

    #[test]
    fn ids_continue_across_packages() {
        let mut c = IdCounter::new();
        let first: Vec<u64> = assign_ids(vec![raw("v", "t", 0); 10], &mut c).into_iter().map(|p| p.0).collect();
        assert_eq!(first, (1..=10).collect::<Vec<_>>());
        let second: Vec<u64> = assign_ids(vec![raw("v", "t", 0); 5], &mut c).into_iter().map(|p| p.0).collect();
        assert_eq!(second, (11..=15).collect::<Vec<_>>());
        assign_ids(vec![], &mut c);
        assert_eq!(c.last(), 15);
    }

    #[test]
    fn clean_feed_passes() {
        let out = run((0..50).map(|i| raw("v", "t", i * 5)).collect());
        assert_eq!(out.survivors.len(), 50);
        assert!(out.drops.is_empty() && out.alarms.is_empty());
        assert_eq!(out.survivors[0].route_name, "Main");
    }

    #[test]
    fn one_duplicate_pair() {
        let mut input: Vec<RawTuple> = (0..10).map(|i| raw("v", "t", i * 5)).collect();
        let mut copy = input[4].clone();
        copy.set(Field::VlrId, "1-dup");
        input.insert(5, copy);
        let out = run(input);
        assert_eq!(out.drops.len(), 1);
        assert_eq!(out.drops[0].1, DropReason::duplicate());
        assert_eq!(out.alarms.len(), 1);
        assert!(matches!(out.alarms[0].detail, AlarmDetail::DuplicateTuples { duplicate_count: 1, .. }));
        // the first occurrence survives
        assert!(out.survivors.iter().any(|s| s.fog_id == 5));
        assert!(!out.survivors.iter().any(|s| s.fog_id == 6));
    }

    #[test]
    fn gap_of_twenty_seconds() {
        let out = run(vec![raw("v", "t", 100), raw("v", "t", 120)]);
        assert_eq!(out.alarms.len(), 1);
        assert_eq!(
            out.alarms[0].detail,
            AlarmDetail::MissingTuples { gap_from: 100, gap_to: 120, estimated_missing: 3 }
        );
    }

    #[test]
    fn gap_threshold_boundary() {
        assert!(run(vec![raw("v", "t", 100), raw("v", "t", 109)]).alarms.is_empty());
        let single = run(vec![raw("v", "t", 100), raw("v", "t", 110)]);
        assert!(matches!(single.alarms[0].detail, AlarmDetail::MissingTuples { estimated_missing: 1, .. }));
    }

    #[test]
    fn wrong_values() {
        let mut lat = raw("v", "t", 0);
        lat.set(Field::Lat, "91.0");
        let mut lng = raw("v", "t", 5);
        lng.set(Field::Lng, "-180.5");
        let mut early = raw("v", "t", -121);
        early.set(Field::VlrId, "x");
        let edge = raw("v", "t", -120);
        let mut garbage = raw("v", "t", 10);
        garbage.set(Field::Lat, "north");
        let out = run(vec![lat, lng, early, edge, garbage]);
        let reasons: Vec<String> = out.drops.iter().map(|d| d.1.to_string()).collect();
        assert_eq!(
            reasons,
            vec![
                "wrong_attribute_value(lat)",
                "wrong_attribute_value(lng)",
                "wrong_attribute_value(timestamp)",
                "wrong_attribute_value(lat)"
            ]
        );
        assert_eq!(out.survivors.len(), 1);
    }

    #[test]
    fn missing_checked_before_wrong() {
        let mut t = raw("v", "t", 0);
        t.set(Field::Lat, "999");
        t.set(Field::TripIdBr, "");
        let out = run(vec![t]);
        assert_eq!(out.drops[0].1, DropReason::missing(Field::TripIdBr));
        assert_eq!(out.drops[0].1.code, DropCode::MissingAttributeValue);
    }

    #[test]
    fn redundant_columns_do_not_matter() {
        let mut t = raw("v", "t", 0);
        for f in Field::REDUNDANT {
            t.set(f, "");
        }
        assert_eq!(run(vec![t]).survivors.len(), 1);
    }

    #[test]
    fn dedup_horizon_slides() {
        let mut d = DedupIndex::new(2);
        let k = |ts| TupleKey {
            vehicle_id_vlr: "v".into(),
            route_id_rta: "r".into(),
            trip_id_br: "t".into(),
            timestamp: ts,
        };
        d.open_window(0);
        assert!(d.insert(k(1)));
        d.open_window(300);
        assert!(!d.insert(k(1)));
        d.open_window(600);
        assert!(d.insert(k(1)), "two windows back is beyond the horizon");
    }

    #[test]
    fn empty_windows_do_not_age_the_index() {
        let mut d = DedupIndex::new(2);
        let k = |ts| TupleKey {
            vehicle_id_vlr: "v".into(),
            route_id_rta: "r".into(),
            trip_id_br: "t".into(),
            timestamp: ts,
        };
        d.open_window(0);
        assert!(d.insert(k(1)));
        for start in [300, 600, 900] {
            d.open_window(start);
        }
        assert!(!d.insert(k(1)), "idle windows between original and copy");
        d.open_window(1200);
        d.open_window(1500);
        assert!(d.insert(k(1)));
    }

    #[test]
    fn late_report_skips_gap_scan() {
        let mut trips = TripIndex::new();
        let mk = |ts| validate(1, &raw("v", "t", ts), 120).unwrap();
        assert!(gap_scan(&[mk(100), mk(105)], &mut trips, 5, 0).is_empty());
        assert!(gap_scan(&[mk(90)], &mut trips, 5, 0).is_empty());
        let a = gap_scan(&[mk(130)], &mut trips, 5, 0);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].kind(), AlarmKind::MissingTuples);
    }

    #[test]
    fn sort_is_stable_on_ties() {
        let mut ts: Vec<CanonicalTuple> = (0..100)
            .rev()
            .map(|i| validate(100 - i, &raw(&format!("v{}", i % 2), "t", (i / 2) as i64 * 5), 120).unwrap())
            .collect();
        sort_window(&mut ts);
        assert!(is_sorted(&ts));
    }

    fn arb_raw() -> impl Strategy<Value = RawTuple> {
        (
            prop_oneof!["", "v1", "v2"],
            prop_oneof!["", "t1", "t2"],
            prop_oneof![Just(String::new()), (-200i64..1200).prop_map(|t| t.to_string()), Just("x".to_string())],
            prop_oneof![Just(String::new()), (-100.0f64..100.0).prop_map(|v| v.to_string())],
        )
            .prop_map(|(v, trip, ts, lat)| {
                let mut t = raw("v", "t", 0);
                t.set(Field::VehicleIdVlr, v);
                t.set(Field::TripIdBr, trip);
                t.set(Field::Timestamp, ts);
                t.set(Field::Lat, lat);
                t.set(Field::TripFinish, "1000");
                t
            })
    }

    proptest! {
        #[test]
        fn conservation_dedup_and_idempotence(input in proptest::collection::vec(arb_raw(), 0..200)) {
            let n = input.len();
            let by_id: HashMap<u64, RawTuple> =
                input.iter().cloned().enumerate().map(|(i, t)| (i as u64 + 1, t)).collect();
            let out = run(input);
            prop_assert_eq!(out.survivors.len() + out.drops.len(), n);

            let keys: HashSet<&TupleKey> = out.survivors.iter().map(|s| &s.key).collect();
            prop_assert_eq!(keys.len(), out.survivors.len());
            for s in &out.survivors {
                prop_assert!((-90.0..=90.0).contains(&s.lat));
                prop_assert!(s.key.timestamp >= s.trip_start - 120 && s.key.timestamp <= s.trip_finish + 120);
            }

            let dup_drops = out.drops.iter().filter(|d| d.1.code == DropCode::DuplicateTuple).count() as u64;
            let dup_alarmed: u64 = out.alarms.iter().filter_map(|a| match &a.detail {
                AlarmDetail::DuplicateTuples { duplicate_count, .. } => Some(*duplicate_count),
                _ => None,
            }).sum();
            prop_assert_eq!(dup_drops, dup_alarmed);

            // a second pass finds nothing new: no drops, and only the same gaps again
            let again: Vec<RawTuple> = out.survivors.iter().map(|s| by_id[&s.fog_id].clone()).collect();
            let second = run(again);
            prop_assert!(second.drops.is_empty());
            let gaps: Vec<&AlarmEvent> = out.alarms.iter().filter(|a| a.kind() == AlarmKind::MissingTuples).collect();
            prop_assert_eq!(second.alarms.iter().collect::<Vec<_>>(), gaps);
            prop_assert_eq!(second.survivors.len(), out.survivors.len());
        }

        #[test]
        fn sort_matches_oracle(seeds in proptest::collection::vec((0u8..3, 0u8..3, 0i64..50), 0..200)) {
            let mut ts: Vec<CanonicalTuple> = seeds.iter().enumerate().map(|(i, (r, t, s))| {
                let mut raw = raw(&format!("v{}", i % 2), &format!("t{t}"), s * 5);
                raw.set(Field::RouteIdRta, format!("r{r}"));
                validate(i as u64 + 1, &raw, 120).unwrap()
            }).collect();
            let mut oracle = ts.clone();
            // insertion sort as an independent stable reference
            for i in 1..oracle.len() {
                let mut j = i;
                while j > 0 && oracle[j - 1].sort_key() > oracle[j].sort_key() {
                    oracle.swap(j - 1, j);
                    j -= 1;
                }
            }
            sort_window(&mut ts);
            prop_assert!(is_sorted(&ts));
            prop_assert_eq!(ts, oracle);
        }
    }
}
