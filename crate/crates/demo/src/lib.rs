//! Browser bindings: run a small topology, check one CSV record against the
//! fog rules, and frame a broker message.
//!
//! Every export takes and returns plain strings (JSON where structured) so
//! the page needs no generated TypeScript glue beyond wasm-bindgen's.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use fogline::broker::{decode_frame, encode_frame, Envelope, DEFAULT_MAX_FRAME};
use fogline::cloud::{render_table, Totals};
use fogline::config::{EdgeEntry, TopologyConfig};
use fogline::feedgen::{corrupt_feed, generate_clean_feed, CorruptionPlan, Schedule, REFERENCE_ROUTES};
use fogline::fog::clean::validate;
use fogline::fog::FogSnapshot;
use fogline::model::{parse_raw_record, AlarmEvent, CanonicalTuple, RawTuple, TripReportRow};
use fogline::pipeline::{run_inline, split_by_route, Inputs};

/// 2017-04-15 00:00 UTC
const DAY_START: i64 = 1_492_214_400;
const ALARM_PREVIEW: usize = 25;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub seed: u64,
    pub routes: usize,
    pub trips_per_route: u32,
    pub trip_minutes: u32,
    pub edges: usize,
    pub fogs: usize,
    pub package_period_seconds: u32,
    pub min_tuples_per_trip: u64,
    pub duplicate_rate: f64,
    pub drop_rate: f64,
    pub blank_field_rate: f64,
    pub wrong_value_rate: f64,
    pub shuffle_window: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            seed: 1,
            routes: 4,
            trips_per_route: 6,
            trip_minutes: 30,
            edges: 2,
            fogs: 1,
            package_period_seconds: 300,
            min_tuples_per_trip: 1,
            duplicate_rate: 0.02,
            drop_rate: 0.05,
            blank_field_rate: 0.02,
            wrong_value_rate: 0.02,
            shuffle_window: 20,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SimResult {
    pub records: usize,
    pub defects: usize,
    pub table: String,
    pub rows: Vec<TripReportRow>,
    pub totals: Totals,
    pub alarm_count: usize,
    pub alarms: Vec<AlarmEvent>,
    pub fogs: Vec<FogSnapshot>,
}

fn topology(p: &SimParams) -> Result<TopologyConfig, String> {
    let cfg = TopologyConfig {
        seed: p.seed,
        fog_count: p.fogs,
        package_period_seconds: p.package_period_seconds,
        min_tuples_per_trip: p.min_tuples_per_trip,
        edges: (1..=p.edges)
            .map(|i| EdgeEntry { id: format!("edge{i}"), source: None, package_period_seconds: None })
            .collect(),
        ..Default::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn simulate_json(params: &str) -> Result<String, String> {
    let p: SimParams = serde_json::from_str(params).map_err(|e| format!("parameters: {e}"))?;
    if p.routes == 0 || p.routes > REFERENCE_ROUTES.len() {
        return Err(format!("routes must be 1..={}", REFERENCE_ROUTES.len()));
    }
    if p.trips_per_route == 0 || p.trips_per_route > 40 || p.trip_minutes == 0 || p.trip_minutes > 240 {
        return Err("trips_per_route must be 1..=40 and trip_minutes 1..=240".into());
    }
    let cfg = topology(&p)?;
    let routes: Vec<(&str, u32)> = REFERENCE_ROUTES[..p.routes].iter().map(|(r, _)| (*r, p.trips_per_route)).collect();
    let schedule = Schedule::uniform(&routes, DAY_START, i64::from(p.trip_minutes) * 60, 5);
    let plan = CorruptionPlan {
        duplicate_rate: p.duplicate_rate,
        drop_rate: p.drop_rate,
        blank_field_rate: p.blank_field_rate,
        wrong_value_rate: p.wrong_value_rate,
        shuffle_window: p.shuffle_window,
        rng_seed: p.seed,
        overlap: false,
    };
    plan.validate().map_err(|e| e.to_string())?;
    let clean = generate_clean_feed(&schedule).map_err(|e| e.to_string())?.tuples;
    let feed = corrupt_feed(&clean, &plan).map_err(|e| e.to_string())?;

    let lines: Vec<String> = feed.tuples.iter().map(RawTuple::to_csv_line).collect();
    let parts = split_by_route(lines, cfg.edges.len());
    let inputs = Inputs { schedule, edges: cfg.edge_configs().into_iter().zip(parts).collect() };
    let out = run_inline(&cfg, &inputs, false).map_err(|e| e.to_string())?;
    let result = SimResult {
        records: feed.tuples.len(),
        defects: feed.ledger.len(),
        table: render_table(&out.rows),
        rows: out.rows,
        totals: out.totals,
        alarm_count: out.alarms.len(),
        alarms: out.alarms.into_iter().take(ALARM_PREVIEW).collect(),
        fogs: out.snapshots,
    };
    serde_json::to_string(&result).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum RecordVerdict {
    Accepted { tuple: CanonicalTuple },
    Dropped { reason: String },
    Malformed { error: String },
}

pub fn check_record_json(line: &str, slack_seconds: i64) -> String {
    let verdict = match parse_raw_record(line.trim_end_matches(['\r', '\n'])) {
        Err(e) => RecordVerdict::Malformed { error: e.to_string() },
        Ok(t) => match validate(0, &t, slack_seconds) {
            Ok(tuple) => RecordVerdict::Accepted { tuple },
            Err(r) => RecordVerdict::Dropped { reason: r.to_string() },
        },
    };
    serde_json::to_string(&verdict).expect("verdict serializes")
}

/// One clean record of the demo schedule, for pre-filling the checker.
pub fn sample_record() -> String {
    let schedule = Schedule::uniform(&REFERENCE_ROUTES[..1], DAY_START, 1800, 5);
    let feed = generate_clean_feed(&schedule).expect("reference schedule is valid");
    feed.tuples[feed.tuples.len() / 2].to_csv_line()
}

#[derive(Debug, Serialize)]
pub struct FrameView {
    pub hex: String,
    pub length: usize,
    pub decoded_topic: String,
    pub decoded_seq: u64,
    pub decoded_payload: String,
}

pub fn frame_json(topic: &str, seq: u64, payload: &str) -> Result<String, String> {
    fogline::broker::validate_topic(topic).map_err(|e| e.to_string())?;
    if topic.len() > usize::from(u16::MAX) {
        return Err("topic longer than 65535 bytes".into());
    }
    let bytes = encode_frame(&Envelope::new(topic, seq, payload.as_bytes()));
    let (env, used) =
        decode_frame(&bytes, DEFAULT_MAX_FRAME).map_err(|e| e.to_string())?.ok_or("frame did not decode")?;
    debug_assert_eq!(used, bytes.len());
    let view = FrameView {
        hex: bytes.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" "),
        length: bytes.len(),
        decoded_topic: env.topic,
        decoded_seq: env.seq,
        decoded_payload: String::from_utf8_lossy(&env.payload).into_owned(),
    };
    Ok(serde_json::to_string(&view).expect("frame view serializes"))
}

#[wasm_bindgen]
pub fn simulate(params: &str) -> Result<String, JsValue> {
    simulate_json(params).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = checkRecord)]
pub fn check_record(line: &str, slack_seconds: i32) -> String {
    check_record_json(line, i64::from(slack_seconds))
}

#[wasm_bindgen(js_name = sampleRecord)]
pub fn sample_record_js() -> String {
    sample_record()
}

#[wasm_bindgen(js_name = encodeFrame)]
pub fn encode_frame_js(topic: &str, seq: f64, payload: &str) -> Result<String, JsValue> {
    if !(seq >= 0.0 && seq.fract() == 0.0 && seq <= 9_007_199_254_740_991.0) {
        return Err(JsValue::from_str("seq must be a non-negative integer"));
    }
    frame_json(topic, seq as u64, payload).map_err(|e| JsValue::from_str(&e))
}
