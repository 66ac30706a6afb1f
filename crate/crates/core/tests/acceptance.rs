//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach the output.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use common::{
    dense_schedule, expected_from_ledger, inputs_for, random_schedule, reference_schedule, sorted_single_pass, topology,
};
use fogline::broker::{
    aggregate, decode_frame, decompose, encode_frame, Broker, BrokerConfig, Envelope, DEFAULT_MAX_FRAME,
};
use fogline::cloud::{render_trips_csv, Totals, TOTALS_REPORT, TRIPS_REPORT};
use fogline::config::BrokerMode;
use fogline::feedgen::{corrupt_feed, generate_clean_feed, CorruptionPlan};
use fogline::fog::Task;
use fogline::model::{AlarmDetail, TripReportRow};
use fogline::pipeline::{run_topology, RunOutcome, ALARMS_LOG, REPORT_DIR};
use fogline::rng::SplitMix64;

/// Criterion 1: wall-clock budget for a 10^6-tuple in-process run.
const MILLION_RUN_BUDGET: Duration = Duration::from_secs(60);
const MILLION: usize = 1_000_000;
/// Criterion 3.
const ORACLE_INSTANCES: u64 = 100;
/// Criterion 4.
const SCRAMBLED_FEED_TUPLES: usize = 10_000;
const MAX_SHUFFLE_WINDOW: usize = 500;
/// Criterion 5.
const RANDOM_FRAMES: usize = 10_000;
const FIFO_PRODUCERS: usize = 4;
const FIFO_MESSAGES: u64 = 1_000;
/// Criterion 7.
const TCP_FEED_TUPLES: usize = 100_000;

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Trip length giving at least `n` clean tuples on the 16-route reference day,
/// with 2% to spare for injected drops.
fn trip_seconds_for(n: usize) -> i64 {
    let trips = reference_schedule(600).trip_count() as i64;
    let ticks = ((n * 102 / 100) as u64).div_ceil(trips as u64) as i64;
    (ticks - 1).max(1) * 5
}

fn identity_holds(o: &RunOutcome) -> Result<(), String> {
    let t = &o.totals;
    check(t.received == t.deleted + t.arrived + t.quarantined, || {
        format!(
            "received {} != deleted {} + arrived {} + quarantined {}",
            t.received, t.deleted, t.arrived, t.quarantined
        )
    })?;
    let sent: u64 = o.edges.iter().map(|e| e.records).sum();
    check(sent == t.received, || format!("edges sent {sent}, fog received {}", t.received))
}

fn tables_sorted_and_unique(o: &RunOutcome) -> Result<(), String> {
    for b in o.store.batches() {
        check(sorted_single_pass(&b.tuples), || format!("{} chunk {} unsorted", b.window_id, b.chunk))?;
    }
    check(o.store.duplicates_ignored() == 0, || format!("{} duplicate keys left the fog", o.store.duplicates_ignored()))
}

fn criterion_1() -> Verdict {
    Totals::from_counts(65_097_658, 38_653_787, 26_443_871, 0).map_err(|e| e.to_string())?;
    check(Totals::from_counts(65_097_658, 38_653_787, 26_443_870, 0).is_err(), || {
        "identity check accepted an off-by-one total".into()
    })?;

    let plan = |seed| CorruptionPlan {
        duplicate_rate: 0.01,
        drop_rate: 0.01,
        blank_field_rate: 0.01,
        wrong_value_rate: 0.01,
        shuffle_window: 20,
        rng_seed: seed,
        overlap: false,
    };
    for n in [1_000, 10_000, 100_000] {
        let schedule = reference_schedule(trip_seconds_for(n));
        let feed = corrupt_feed(&generate_clean_feed(&schedule).unwrap().tuples, &plan(n as u64)).unwrap();
        let cfg = topology(&["edge1", "edge2"], 1);
        let out = run_topology(&cfg, &inputs_for(&cfg, schedule, &feed.tuples), false).map_err(|e| e.to_string())?;
        identity_holds(&out)?;
    }

    let schedule = reference_schedule(trip_seconds_for(MILLION));
    let clean = generate_clean_feed(&schedule).unwrap().tuples;
    let feed = corrupt_feed(&clean, &plan(1)).unwrap();
    let cfg = topology(&["edge1", "edge2", "edge3", "edge4"], 2);
    let inputs = inputs_for(&cfg, schedule, &feed.tuples);
    let started = Instant::now();
    let out = run_topology(&cfg, &inputs, false).map_err(|e| e.to_string())?;
    let took = started.elapsed();
    identity_holds(&out)?;
    check(inputs.record_count() >= MILLION, || format!("feed has only {} records", inputs.record_count()))?;
    check(took < MILLION_RUN_BUDGET, || format!("{} records took {took:.1?}", inputs.record_count()))?;
    let t = &out.totals;
    Ok(format!(
        "reference figures reconcile; {} records in {took:.1?}: received {} = deleted {} + arrived {} + quarantined {}",
        inputs.record_count(),
        t.received,
        t.deleted,
        t.arrived,
        t.quarantined
    ))
}

/// Reference rows: (route, scheduled, performed, percent).
const REFERENCE_ROWS: [(&str, u64, u64, &str); 16] = [
    ("50", 31, 2, "6.45"),
    ("51", 65, 6, "9.23"),
    ("52", 65, 5, "7.69"),
    ("60", 31, 2, "6.45"),
    ("61", 32, 19, "59.38"),
    ("62", 31, 19, "61.29"),
    ("63", 32, 3, "9.38"),
    ("64", 32, 19, "59.38"),
    ("65", 31, 19, "61.29"),
    ("70", 13, 1, "7.69"),
    ("71", 14, 2, "14.29"),
    ("80", 13, 1, "7.69"),
    ("81", 13, 1, "7.69"),
    ("93", 22, 1, "4.55"),
    ("94", 32, 3, "9.38"),
    ("95", 21, 1, "4.76"),
];

fn criterion_2() -> Verdict {
    let rows: Vec<TripReportRow> = REFERENCE_ROWS.iter().map(|(r, s, p, _)| TripReportRow::new(*r, *s, *p)).collect();
    for (row, (route, _, _, pct)) in rows.iter().zip(REFERENCE_ROWS) {
        check(row.percent() == pct, || format!("route {route}: {} != {pct}", row.percent()))?;
    }
    let csv = render_trips_csv(&rows);
    for (route, s, p, pct) in REFERENCE_ROWS {
        let line = format!("{route},{s},{p},{pct}");
        check(csv.lines().any(|l| l == line), || format!("trips.csv lacks {line}"))?;
    }
    let (s, p): (u64, u64) = REFERENCE_ROWS.iter().fold((0, 0), |a, r| (a.0 + r.1, a.1 + r.2));
    Ok(format!("16/16 rows match to 2 decimals; {p} of {s} trips"))
}

fn criterion_3() -> Verdict {
    let mut rng = SplitMix64::new(0x5eed);
    let (mut defects, mut gaps) = (0usize, 0u64);
    for i in 0..ORACLE_INSTANCES {
        let schedule = random_schedule(&mut rng);
        let rate = |rng: &mut SplitMix64| rng.below(6) as f64 / 100.0;
        let plan = CorruptionPlan {
            duplicate_rate: rate(&mut rng),
            drop_rate: rate(&mut rng),
            blank_field_rate: rate(&mut rng),
            wrong_value_rate: rate(&mut rng),
            shuffle_window: 0,
            rng_seed: rng.next_u64(),
            overlap: false,
        };
        let clean = generate_clean_feed(&schedule).unwrap().tuples;
        let feed = corrupt_feed(&clean, &plan).unwrap();
        let expected = expected_from_ledger(&clean, &feed.ledger);
        let cfg = topology(&["edge1"], 1);
        let out = run_topology(&cfg, &inputs_for(&cfg, schedule, &feed.tuples), false).map_err(|e| e.to_string())?;

        let mut drops: BTreeMap<String, u64> = BTreeMap::new();
        for s in &out.snapshots {
            for (k, v) in &s.task(Task::Processing).tuples_dropped {
                *drops.entry(k.clone()).or_default() += v;
            }
        }
        check(drops == expected.drops, || format!("instance {i}: drops {drops:?} != ledger {:?}", expected.drops))?;
        let (mut gap_alarms, mut gap_missing, mut dup_alarms, mut dup_copies) = (0, 0, 0, 0);
        for a in &out.alarms {
            match &a.detail {
                AlarmDetail::MissingTuples { estimated_missing, .. } => {
                    gap_alarms += 1;
                    gap_missing += estimated_missing;
                }
                AlarmDetail::DuplicateTuples { duplicate_count, .. } => {
                    dup_alarms += 1;
                    dup_copies += duplicate_count;
                }
            }
        }
        check(
            (gap_alarms, gap_missing, dup_alarms, dup_copies)
                == (expected.gap_alarms, expected.gap_missing, expected.duplicate_alarms, expected.duplicate_copies),
            || {
                format!(
                    "instance {i}: alarms (gaps {gap_alarms}, missing {gap_missing}, dups {dup_alarms}, copies {dup_copies}) != ledger {expected:?}"
                )
            },
        )?;
        identity_holds(&out)?;
        defects += feed.ledger.len();
        gaps += gap_missing;
    }
    Ok(format!(
        "{ORACLE_INSTANCES} instances, {defects} injected defects, {gaps} missing ticks estimated, all equal to the ledger"
    ))
}

fn criterion_4() -> Verdict {
    let schedule = dense_schedule(SCRAMBLED_FEED_TUPLES);
    let clean = generate_clean_feed(&schedule).unwrap().tuples;
    check(clean.len() >= SCRAMBLED_FEED_TUPLES, || format!("feed has only {} tuples", clean.len()))?;
    let mut checked = 0;
    for (k, window) in [0, 10, 100, 250, MAX_SHUFFLE_WINDOW].into_iter().enumerate() {
        let plan = CorruptionPlan {
            duplicate_rate: 0.05,
            shuffle_window: window,
            rng_seed: 40 + k as u64,
            ..Default::default()
        };
        let feed = corrupt_feed(&clean, &plan).unwrap();
        let cfg = topology(&["edge1"], 1);
        let out = run_topology(&cfg, &inputs_for(&cfg, schedule.clone(), &feed.tuples), false)
            .map_err(|e| format!("shuffle {window}: {e}"))?;
        tables_sorted_and_unique(&out).map_err(|e| format!("shuffle {window}: {e}"))?;
        identity_holds(&out)?;
        checked += out.store.batches().len();
    }
    Ok(format!(
        "{checked} tables from {}-tuple feeds, shuffle windows 0..={MAX_SHUFFLE_WINDOW}: sorted, no duplicate keys",
        clean.len()
    ))
}

fn random_envelope(rng: &mut SplitMix64) -> Envelope {
    let topic_len = 1 + rng.below(40) as usize;
    let topic: String = (0..topic_len).map(|_| (b'a' + rng.below(26) as u8) as char).collect();
    let payload: Vec<u8> = (0..rng.below(300)).map(|_| rng.below(256) as u8).collect();
    Envelope::new(topic, rng.next_u64(), payload)
}

fn criterion_5() -> Verdict {
    let reference = Envelope::new("t", 1, b"A".to_vec());
    let bytes: [u8; 16] = [0, 0, 0, 0x0C, 0, 1, 0x74, 0, 0, 0, 0, 0, 0, 0, 1, 0x41];
    check(encode_frame(&reference) == bytes, || "reference frame differs".into())?;
    check(decode_frame(&bytes, DEFAULT_MAX_FRAME).unwrap() == Some((reference, 16)), || {
        "reference frame does not decode".into()
    })?;

    let mut rng = SplitMix64::new(5);
    let envelopes: Vec<Envelope> = (0..RANDOM_FRAMES).map(|_| random_envelope(&mut rng)).collect();
    let mut stream = Vec::new();
    for e in &envelopes {
        let f = encode_frame(e);
        let (back, used) = decode_frame(&f, DEFAULT_MAX_FRAME).map_err(|e| e.to_string())?.ok_or("short frame")?;
        check(back == *e && used == f.len(), || format!("frame for seq {} did not round-trip", e.seq))?;
        check(encode_frame(&back) == f, || "re-encoding changed bytes".into())?;
        stream.extend(f);
    }
    let mut at = 0;
    for e in &envelopes {
        let (back, used) = decode_frame(&stream[at..], DEFAULT_MAX_FRAME).unwrap().unwrap();
        check(back == *e, || "concatenated stream decoded out of order".into())?;
        at += used;
    }

    let broker = Broker::new(BrokerConfig { high_water_mark: 64, ..Default::default() });
    let mut sub = broker.subscribe("sink", "fifo").map_err(|e| e.to_string())?;
    let producers: Vec<_> = (0..FIFO_PRODUCERS)
        .map(|p| {
            let mut prod = broker.producer(format!("p{p}"));
            thread::spawn(move || {
                for i in 0..FIFO_MESSAGES {
                    prod.publish("fifo", i.to_be_bytes().to_vec()).unwrap();
                }
            })
        })
        .collect();
    let mut next: BTreeMap<String, u64> = BTreeMap::new();
    for _ in 0..FIFO_PRODUCERS as u64 * FIFO_MESSAGES {
        let d = sub.recv().map_err(|e| e.to_string())?;
        let n = next.entry(d.producer.clone()).or_insert(0);
        let got = u64::from_be_bytes(d.envelope.payload[..8].try_into().unwrap());
        check(got == *n && d.envelope.seq == *n + 1, || {
            format!("{}: got #{got} (seq {}) expecting #{n}", d.producer, d.envelope.seq)
        })?;
        *n += 1;
    }
    for p in producers {
        p.join().map_err(|_| "producer panicked".to_string())?;
    }

    let msgs: Vec<Envelope> = (0..500u64)
        .map(|i| {
            let mut e = random_envelope(&mut rng);
            e.topic = "cloud/upload".into();
            e.seq = i + 1;
            e
        })
        .collect();
    for limit in [64, 1024, 16 * 1024, 1 << 20] {
        let mut back = Vec::new();
        for frame in aggregate(&msgs, limit).map_err(|e| e.to_string())? {
            back.extend(decompose(&frame).map_err(|e| e.to_string())?);
        }
        check(back == msgs, || format!("aggregate/decompose at {limit} bytes lost order or bytes"))?;
    }
    Ok(format!(
        "reference frame exact; {RANDOM_FRAMES} random frames round-trip; FIFO over {FIFO_PRODUCERS}x{FIFO_MESSAGES}; aggregation lossless"
    ))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fogline")
}

fn run_cli(config: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(bin())
        .args(["--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "run"])
        .env_remove("FOGLINE_FEED")
        .env_remove("FOGLINE_SCHEDULE")
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || {
        format!("run exited {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr))
    })
}

fn criterion_6() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let schedule = dir.path().join("schedule.toml");
    fs::write(
        &schedule,
        "cadence_seconds = 5\n\
         [[routes]]\nroute_id_rta = \"50\"\ngenerate = { first_departure = \"2017-04-15 06:00:00\", count = 8, headway_seconds = 1800, duration_seconds = 2400 }\n\
         [[routes]]\nroute_id_rta = \"61\"\ngenerate = { first_departure = \"2017-04-15 06:10:00\", count = 8, headway_seconds = 1800, duration_seconds = 2400 }\n\
         [[routes]]\nroute_id_rta = \"93\"\ngenerate = { first_departure = \"2017-04-15 06:20:00\", count = 6, headway_seconds = 2400, duration_seconds = 1800 }\n",
    )
    .map_err(|e| e.to_string())?;
    let config = dir.path().join("topology.toml");
    fs::write(
        &config,
        "seed = 2017\nfog_count = 1\n\
         [paths]\nfeed = \"absent/feed.csv\"\nschedule = \"schedule.toml\"\n\
         [[edges]]\nid = \"edge1\"\n[[edges]]\nid = \"edge2\"\n\
         [corruption]\nduplicate_rate = 0.02\ndrop_rate = 0.02\nblank_field_rate = 0.02\nwrong_value_rate = 0.02\nshuffle_window = 30\n",
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_cli(&config, &a)?;
    run_cli(&config, &b)?;
    for name in [TRIPS_REPORT, TOTALS_REPORT, ALARMS_LOG] {
        let read = |root: &Path| fs::read(root.join(REPORT_DIR).join(name)).map_err(|e| format!("{name}: {e}"));
        let (x, y) = (read(&a)?, read(&b)?);
        check(!x.is_empty() || name == ALARMS_LOG, || format!("{name} is empty"))?;
        check(x == y, || format!("{name} differs between runs"))?;
    }
    let alarms = fs::read_to_string(a.join(REPORT_DIR).join(ALARMS_LOG)).unwrap_or_default().lines().count();
    Ok(format!("trips.csv, totals.txt and alarms.jsonl ({alarms} alarms) byte-identical across two runs"))
}

fn criterion_7() -> Verdict {
    let schedule = reference_schedule(trip_seconds_for(TCP_FEED_TUPLES));
    let clean = generate_clean_feed(&schedule).unwrap().tuples;
    let plan = CorruptionPlan {
        duplicate_rate: 0.01,
        drop_rate: 0.01,
        blank_field_rate: 0.01,
        wrong_value_rate: 0.01,
        shuffle_window: 100,
        rng_seed: 7,
        overlap: false,
    };
    let feed = corrupt_feed(&clean, &plan).unwrap();
    let mut cfg = topology(&["edge1", "edge2"], 1);
    cfg.broker.mode = BrokerMode::Tcp;
    cfg.broker.address = "127.0.0.1:0".into();
    let inputs = inputs_for(&cfg, schedule.clone(), &feed.tuples);
    // about half of the edge packages have been published by then
    cfg.broker.disconnect_after_messages = Some(150);
    let started = Instant::now();
    let out = run_topology(&cfg, &inputs, false).map_err(|e| e.to_string())?;
    let took = started.elapsed();
    identity_holds(&out)?;
    tables_sorted_and_unique(&out)?;
    check(out.replays > 0, || "the forced disconnect caused no redelivery".into())?;

    let mut reference_cfg = topology(&["edge1", "edge2"], 1);
    reference_cfg.broker.mode = BrokerMode::InProcess;
    let reference = run_topology(&reference_cfg, &inputs, false).map_err(|e| e.to_string())?;
    check(render_trips_csv(&out.rows) == render_trips_csv(&reference.rows), || {
        "TCP report differs from the in-process report".into()
    })?;
    check(out.totals == reference.totals, || "TCP totals differ from in-process totals".into())?;
    Ok(format!(
        "{} records over loopback TCP in {took:.1?}; {} replays discarded after the forced disconnect; identity and order hold",
        inputs.record_count(),
        out.replays
    ))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 7] = [
        ("conservation identity", criterion_1),
        ("per-route percentages", criterion_2),
        ("ledger oracle equivalence", criterion_3),
        ("sort and dedup", criterion_4),
        ("broker protocol", criterion_5),
        ("determinism", criterion_6),
        ("end-to-end TCP", criterion_7),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let verdict = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
