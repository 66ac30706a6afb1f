mod common;

use common::{dense_schedule, inputs_for, topology};
use fogline::config::BrokerMode;
use fogline::feedgen::{corrupt_feed, generate_clean_feed, CorruptionPlan};
use fogline::pipeline::{run_inline, run_topology};

#[test]
fn disconnect_mid_run_keeps_reports_intact() {
    let schedule = dense_schedule(5_000);
    let plan = CorruptionPlan {
        duplicate_rate: 0.02,
        blank_field_rate: 0.02,
        shuffle_window: 50,
        rng_seed: 99,
        ..Default::default()
    };
    let feed = corrupt_feed(&generate_clean_feed(&schedule).unwrap().tuples, &plan).unwrap();
    let mut cfg = topology(&["edge1", "edge2"], 1);
    cfg.package_period_seconds = 60;
    cfg.broker.mode = BrokerMode::Tcp;
    cfg.broker.disconnect_after_messages = Some(20);
    let inputs = inputs_for(&cfg, schedule, &feed.tuples);
    let tcp = run_topology(&cfg, &inputs, false).unwrap();
    let inline = run_inline(&cfg, &inputs, false).unwrap();
    assert!(tcp.replays > 0);
    assert_eq!(tcp.rows, inline.rows);
    assert_eq!(tcp.totals, inline.totals);
    assert_eq!(tcp.alarms, inline.alarms);
    assert_eq!(tcp.store.duplicates_ignored(), 0);
}

#[test]
fn two_fogs_over_tcp() {
    let schedule = dense_schedule(2_000);
    let feed = generate_clean_feed(&schedule).unwrap().tuples;
    let mut cfg = topology(&["edge1", "edge2", "edge3"], 2);
    cfg.broker.mode = BrokerMode::Tcp;
    let inputs = inputs_for(&cfg, schedule, &feed);
    let out = run_topology(&cfg, &inputs, false).unwrap();
    assert_eq!(out.snapshots.len(), 2);
    assert_eq!(out.totals.arrived, feed.len() as u64);
    assert!(out.rows.iter().all(|r| r.percent() == "100.00"));
}
