use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use chrono_tz::Tz;
use clap::{Args, Parser, Subcommand};
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;

use rtc_core::archive::{
    collect_timetable_once, poll_rt_once, run_rt_collector, run_timetable_collector, ArchiverConfig, HttpFetcher,
    SystemClock, TimetableOutcome,
};
use rtc_core::ingest::{export_daily_csv, ingest_day, positions_csv_path};
use rtc_core::metrics::{delay_table, read_grouped_values, summarize_groups, write_delays_csv, ArchiveSchedule};
use rtc_core::model::ServiceTime;
use rtc_core::pipeline::{range_exit_code, run_range, PipelineConfig, EXIT_FATAL_LOAD, EXIT_MISSING_ARCHIVE};
use rtc_core::replay::{generate, write_truth_csv, DelayModel, ReplayConfig, Sampling};
use rtc_core::writer::{read_bundle, validate_gtfs};

/// Rebuilds observed bus timetables from archived GTFS-Realtime vehicle positions.
#[derive(Parser)]
#[command(name = "rtc", version)]
struct Cli {
    /// Log filter for the JSON log on stderr (e.g. info, debug, rtc_core=trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect feeds into the archive.
    #[command(subcommand)]
    Archive(ArchiveCommand),
    /// Decode and deduplicate one day's snapshots into a positions CSV.
    Ingest {
        #[arg(long)]
        date: NaiveDate,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the corrected timetable and run report for a day or a range of days.
    Correct(CorrectArgs),
    /// Load a GTFS ZIP and report statistics and reference errors.
    ValidateGtfs { zip: PathBuf },
    /// Summary statistics per group from a `group_key,value_seconds` CSV.
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Stop-level delays at matched stops of a corrected bundle, as CSV.
    Delays {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic timetable and realtime archive with known delays.
    ReplayGen(ReplayArgs),
}

#[derive(Subcommand)]
enum ArchiveCommand {
    /// Poll the vehicle position feed at a fixed interval.
    Rt {
        #[arg(long)]
        config: PathBuf,
        /// Take a single snapshot and exit.
        #[arg(long)]
        once: bool,
    },
    /// Fetch the static timetable once per local day.
    Timetable {
        #[arg(long)]
        config: PathBuf,
        /// Replace today's file if it is already archived.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        once: bool,
    },
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    date: NaiveDate,
    /// Last day of a range starting at --date (inclusive).
    #[arg(long)]
    end_date: Option<NaiveDate>,
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300.0)]
    radius_m: f64,
    #[arg(long, default_value_t = 7)]
    window_before: u32,
    #[arg(long, default_value_t = 7)]
    window_after: u32,
    #[arg(long, default_value_t = 1)]
    min_matches: usize,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "Europe/London")]
    timezone: Tz,
}

#[derive(Args)]
struct ReplayArgs {
    /// Archive root to write into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "2025-07-08")]
    date: NaiveDate,
    #[arg(long, default_value = "Europe/London")]
    timezone: Tz,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    routes: usize,
    #[arg(long, default_value_t = 30)]
    stops_per_route: usize,
    #[arg(long, default_value_t = 100)]
    trips: usize,
    #[arg(long, default_value_t = 400.0)]
    stop_spacing_m: f64,
    #[arg(long, default_value_t = 60)]
    stop_gap_s: u32,
    #[arg(long, default_value = "06:00:00")]
    first_departure: ServiceTime,
    #[arg(long, default_value_t = 600)]
    headway_s: u32,
    /// Delay at stop_sequence s is base + per_stop·s seconds.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    delay_base: i64,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    delay_per_stop: i64,
    /// Sample every N seconds along the route instead of once at each stop.
    #[arg(long)]
    interval: Option<u32>,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 30)]
    snapshot_interval_s: u32,
    #[arg(long, default_value_t = 0.0)]
    window_only_share: f64,
    /// Repeat every record in the next snapshot.
    #[arg(long)]
    duplicate: bool,
    #[arg(long, default_value_t = 0.0)]
    corrupt_share: f64,
    /// Write the ground truth CSV here.
    #[arg(long)]
    truth: Option<PathBuf>,
}

fn init_logging(filter: &str) {
    let filter = EnvFilter::try_new(filter).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(io::stderr)
        .with_current_span(false)
        .init();
}

fn shutdown_flag() -> Result<Arc<AtomicBool>> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)).context("installing signal handler")?;
    Ok(flag)
}

fn archive(cmd: ArchiveCommand) -> Result<ExitCode> {
    let (path, once) = match &cmd {
        ArchiveCommand::Rt { config, once } | ArchiveCommand::Timetable { config, once, .. } => (config, *once),
    };
    let config = ArchiverConfig::load(path)?;
    config.validate()?;
    let fetcher = HttpFetcher::new(&config)?;
    let clock = SystemClock;
    let tz = config.tz()?;
    match cmd {
        ArchiveCommand::Rt { .. } if once => match poll_rt_once(&config, tz, &fetcher, &clock)? {
            Some(e) => println!("archived {} ({} bytes)", e.path.display(), e.byte_size),
            None => {
                println!("no snapshot archived");
                return Ok(ExitCode::FAILURE);
            }
        },
        ArchiveCommand::Rt { .. } => {
            let entries = run_rt_collector(&config, &fetcher, &clock, &*shutdown_flag()?)?;
            println!("archived {} snapshots", entries.len());
        }
        ArchiveCommand::Timetable { force, .. } if once => {
            let outcome = collect_timetable_once(&config, tz, &fetcher, &clock, force)?;
            println!("{}", describe_timetable(&outcome));
            if matches!(outcome, TimetableOutcome::FetchFailed | TimetableOutcome::Quarantined(_)) {
                return Ok(ExitCode::FAILURE);
            }
        }
        ArchiveCommand::Timetable { force, .. } => {
            let outcomes = run_timetable_collector(&config, &fetcher, &clock, &*shutdown_flag()?, force)?;
            for o in &outcomes {
                println!("{}", describe_timetable(o));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn describe_timetable(o: &TimetableOutcome) -> String {
    match o {
        TimetableOutcome::Archived(e) => format!("archived {} ({} bytes)", e.path.display(), e.byte_size),
        TimetableOutcome::AlreadyPresent(p) => format!("already archived: {}", p.display()),
        TimetableOutcome::Quarantined(p) => format!("not a ZIP, quarantined at {}", p.display()),
        TimetableOutcome::FetchFailed => "fetch failed".into(),
    }
}

fn ingest(date: NaiveDate, archive: &Path, out: &Path) -> Result<ExitCode> {
    let table = match ingest_day(archive, date) {
        Ok(t) => t,
        Err(e @ rtc_core::ingest::IngestError::MissingDay { .. }) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(EXIT_MISSING_ARCHIVE as u8));
        }
        Err(e) => return Err(e.into()),
    };
    let path = positions_csv_path(out, date);
    export_daily_csv(&table, &path)?;
    let s = &table.stats;
    println!(
        "{date}: {} snapshots ({} unreadable), {} records, {} after dedup -> {}",
        s.snapshots_read,
        s.parse_failures,
        s.raw_records,
        s.deduplicated_records,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn correct(args: CorrectArgs, log_level: String) -> Result<ExitCode> {
    let mut config = PipelineConfig::new(&args.archive, &args.out);
    config.radius_m = args.radius_m;
    config.window_before = args.window_before;
    config.window_after = args.window_after;
    config.min_matches = args.min_matches;
    config.timezone = args.timezone;
    config.log_level = log_level;
    if let Some(w) = args.workers {
        config.worker_count = w;
    }
    let end = args.end_date.unwrap_or(args.date);
    if end < args.date {
        bail!("--end-date {end} precedes --date {}", args.date);
    }
    if let Err(e) = config.validate() {
        eprintln!("{e}");
        return Ok(ExitCode::from(e.exit_code() as u8));
    }
    let statuses = run_range(&config, args.date, end);
    println!("{:<10}  {:>4}  {:>7}  {:>9}  {:>8}  detail", "date", "exit", "trips", "resolved", "matched");
    for s in &statuses {
        match &s.outcome {
            Ok(o) => {
                let r = &o.report;
                let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.1}%", v * 100.0));
                println!(
                    "{:<10}  {:>4}  {:>7}  {:>9}  {:>8}  {}",
                    s.date,
                    s.exit_code,
                    r.output.trips,
                    pct(r.ratios.resolution_rate),
                    pct(r.ratios.stop_match_rate),
                    o.bundle_path.display()
                );
            }
            Err(e) => println!("{:<10}  {:>4}  {:>7}  {:>9}  {:>8}  {e}", s.date, s.exit_code, "-", "-", "-"),
        }
    }
    Ok(ExitCode::from(range_exit_code(&statuses) as u8))
}

fn validate(zip: &Path) -> Result<ExitCode> {
    let bytes = std::fs::read(zip).with_context(|| format!("reading {}", zip.display()))?;
    let report = match validate_gtfs(&bytes) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}: {e}", zip.display());
            return Ok(ExitCode::from(EXIT_FATAL_LOAD as u8));
        }
    };
    println!(
        "{}: {} agencies, {} stops, {} routes, {} trips, {} stop times",
        zip.display(),
        report.agencies,
        report.stops,
        report.routes,
        report.trips,
        report.stop_times
    );
    if report.dropped_rows > 0 {
        println!("warning: {} rows unusable and dropped on load", report.dropped_rows);
    }
    for e in &report.foreign_key_errors {
        println!("error: {e}");
    }
    Ok(if report.is_valid() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn stats(input: &Path) -> Result<ExitCode> {
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let groups = read_grouped_values(io::BufReader::new(file))?;
    let summary = summarize_groups(&groups);
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &summary)?;
    writeln!(out)?;
    Ok(ExitCode::SUCCESS)
}

fn delays(bundle: &Path, archive: &Path, output: Option<PathBuf>) -> Result<ExitCode> {
    let read = read_bundle(bundle).with_context(|| format!("loading {}", bundle.display()))?;
    let table = delay_table(&read, &ArchiveSchedule::new(archive));
    if table.trips_skipped > 0 {
        warn!(skipped = table.trips_skipped, "trips without an archived schedule were skipped");
    }
    match output {
        Some(path) => write_delays_csv(&table.records, BufWriter::new(File::create(&path)?))?,
        None => write_delays_csv(&table.records, io::stdout().lock())?,
    }
    info!(records = table.records.len(), skipped = table.trips_skipped, "delays written");
    Ok(ExitCode::SUCCESS)
}

fn replay_gen(a: ReplayArgs) -> Result<ExitCode> {
    let cfg = ReplayConfig {
        seed: a.seed,
        service_date: a.date,
        timezone: a.timezone,
        routes: a.routes,
        stops_per_route: a.stops_per_route,
        trips: a.trips,
        stop_spacing_m: a.stop_spacing_m,
        stop_gap_s: a.stop_gap_s,
        first_departure: a.first_departure,
        headway_s: a.headway_s,
        delay: DelayModel { base_s: a.delay_base, per_stop_s: a.delay_per_stop },
        sampling: a.interval.map_or(Sampling::AtStops, |interval_s| Sampling::Periodic { interval_s }),
        dropout: a.dropout,
        snapshot_interval_s: a.snapshot_interval_s,
        window_only_share: a.window_only_share,
        duplicate_records: a.duplicate,
        corrupt_share: a.corrupt_share,
    };
    let out = generate(&cfg, &a.out)?;
    if let Some(path) = &a.truth {
        write_truth_csv(&out.truth, BufWriter::new(File::create(path)?))?;
    }
    println!(
        "wrote {} timetables, {} snapshots ({} corrupt), {} position records under {}",
        out.timetables.len(),
        out.snapshots,
        out.corrupt_snapshots,
        out.records,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Archive(cmd) => archive(cmd),
        Command::Ingest { date, archive, out } => ingest(date, &archive, &out),
        Command::Correct(args) => correct(args, cli.log_level),
        Command::ValidateGtfs { zip } => validate(&zip),
        Command::Stats { input } => stats(&input),
        Command::Delays { bundle, archive, output } => delays(&bundle, &archive, output),
        Command::ReplayGen(args) => replay_gen(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.log_level);
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
