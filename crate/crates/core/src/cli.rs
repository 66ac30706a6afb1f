//! Command line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, broker), 2 configuration
//! error, 3 pipeline invariant violated.

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand};

use crate::broker::{Broker, BrokerServer};
use crate::cloud::render_table;
use crate::config::{ConfigError, TopologyConfig};
use crate::feedgen::{
    corrupt_feed, generate_clean_feed, load_schedule, read_csv, write_csv, CorruptionPlan, FeedError, Schedule,
    FEED_FILE, LEDGER_FILE,
};
use crate::pipeline::{self, generate_into, PipelineError, REPORT_DIR};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

/// Start of the generated reference day, Monday 2025-01-06 00:00 UTC.
pub const REFERENCE_DAY_START: i64 = 1_736_121_600;
pub const REFERENCE_TRIP_SECONDS: i64 = 3600;

#[derive(Debug, Parser)]
#[command(name = "fogline", version, about = "Edge/fog/cloud pipeline for transit GPS telemetry")]
pub struct Cli {
    /// Topology config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "FOGLINE_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a clean feed (corrupted when the config has a [corruption] table).
    Generate {
        /// Schedule (.toml or .json); the 16-route reference day when absent.
        #[arg(long, env = "FOGLINE_SCHEDULE")]
        schedule: Option<PathBuf>,
        /// Corruption plan (TOML), instead of the config's [corruption] table.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Inject defects into an existing feed and write it with its ledger.
    Corrupt {
        #[arg(long, env = "FOGLINE_FEED")]
        feed: PathBuf,
        /// Corruption plan (TOML), instead of the config's [corruption] table.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Run the whole topology and write reports, alarms, metrics and the store.
    Run {
        #[arg(long, env = "FOGLINE_FEED")]
        feed: Option<PathBuf>,
        #[arg(long, env = "FOGLINE_SCHEDULE")]
        schedule: Option<PathBuf>,
    },
    /// Re-render the reports of an earlier run from its store.
    Report {
        #[arg(long)]
        min_tuples_per_trip: Option<u64>,
    },
    /// Serve a standalone TCP broker until killed.
    Broker {
        #[arg(long)]
        address: Option<String>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Usage(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<FeedError> for CliError {
    fn from(e: FeedError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(e) => e.exit_code(),
            CliError::Usage(_) => EXIT_CONFIG,
        }
    }
}

fn load_config(cli: &Cli) -> Result<TopologyConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => TopologyConfig::load(p)?,
        None => {
            let mut c = TopologyConfig::default();
            c.resolve_paths(Path::new("."));
            c
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_plan(path: Option<&Path>, cfg: &TopologyConfig) -> Result<Option<CorruptionPlan>, CliError> {
    let plan = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| FeedError::Io { path: p.to_path_buf(), source })?;
            let plan: CorruptionPlan =
                toml::from_str(&text).map_err(|e| FeedError::InvalidPlan(format!("{}: {e}", p.display())))?;
            Some(plan)
        }
        None => cfg.corruption.clone(),
    };
    // every random choice comes from the one configured seed
    let plan = plan.map(|p| CorruptionPlan { rng_seed: cfg.seed, ..p });
    if let Some(p) = &plan {
        p.validate()?;
    }
    Ok(plan)
}

fn cmd_generate(cfg: &TopologyConfig, schedule: Option<&Path>, plan: Option<&Path>) -> Result<(), CliError> {
    let schedule = match schedule.or(cfg.paths.schedule.as_deref()) {
        Some(p) => load_schedule(p)?,
        None => Schedule::reference_day(REFERENCE_DAY_START, REFERENCE_TRIP_SECONDS),
    };
    let plan = load_plan(plan, cfg)?;
    let dir = &cfg.paths.out_dir;
    let lines = generate_into(dir, &schedule, plan.as_ref())?;
    let clean = generate_clean_feed(&schedule)?.tuples.len();
    println!(
        "wrote {} records ({} clean, {} trips on {} routes) to {}",
        lines.len(),
        clean,
        schedule.trip_count(),
        schedule.routes.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_corrupt(cfg: &TopologyConfig, feed: &Path, plan: Option<&Path>) -> Result<(), CliError> {
    let plan = load_plan(plan, cfg)?
        .ok_or_else(|| CliError::Usage("corrupt needs --plan or a [corruption] table in the config".into()))?;
    let tuples = read_csv(feed)?;
    let out = corrupt_feed(&tuples, &plan)?;
    let dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(dir).map_err(|source| FeedError::Io { path: dir.clone(), source })?;
    write_csv(&out.tuples, &dir.join(FEED_FILE))?;
    let ledger = dir.join(LEDGER_FILE);
    crate::jsonl::write_file(&ledger, &out.ledger).map_err(|source| FeedError::Io { path: ledger.clone(), source })?;
    println!("wrote {} records with {} defects to {}", out.tuples.len(), out.ledger.len(), dir.display());
    Ok(())
}

fn cmd_run(mut cfg: TopologyConfig, feed: Option<PathBuf>, schedule: Option<PathBuf>) -> Result<(), CliError> {
    if let Some(f) = feed {
        cfg.paths.feed = f;
    }
    if schedule.is_some() {
        cfg.paths.schedule = schedule;
    }
    let outcome = pipeline::run_configured(&cfg)?;
    print!("{}", render_table(&outcome.rows));
    let t = &outcome.totals;
    println!(
        "received {} deleted {} quarantined {} arrived {} alarms {}",
        t.received, t.deleted, t.quarantined, t.arrived, t.alarms
    );
    println!("artifacts in {}", cfg.paths.out_dir.display());
    Ok(())
}

fn cmd_report(cfg: &TopologyConfig, min: Option<u64>) -> Result<(), CliError> {
    let min = min.unwrap_or(cfg.min_tuples_per_trip);
    if min == 0 {
        return Err(CliError::Usage("--min-tuples-per-trip must be positive".into()));
    }
    let (rows, totals) = pipeline::report_from_store(&cfg.paths.out_dir, min)?;
    pipeline::write_reports(&cfg.paths.out_dir.join(REPORT_DIR), &rows, &totals)?;
    print!("{}", render_table(&rows));
    Ok(())
}

fn cmd_broker(cfg: &TopologyConfig, address: Option<String>) -> Result<(), CliError> {
    let address = address.unwrap_or_else(|| cfg.broker.address.clone());
    let server = BrokerServer::bind(address.as_str(), Broker::new(cfg.broker_config()))
        .map_err(|source| PipelineError::Io { path: PathBuf::from(&address), source })?;
    println!("broker listening on {}", server.local_addr());
    loop {
        thread::sleep(Duration::from_secs(3600));
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate { schedule, plan } => cmd_generate(&cfg, schedule.as_deref(), plan.as_deref()),
        Command::Corrupt { feed, plan } => cmd_corrupt(&cfg, &feed, plan.as_deref()),
        Command::Run { feed, schedule } => cmd_run(cfg, feed, schedule),
        Command::Report { min_tuples_per_trip } => cmd_report(&cfg, min_tuples_per_trip),
        Command::Broker { address } => cmd_broker(&cfg, address),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into());
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .try_init();
}
