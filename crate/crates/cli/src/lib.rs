//! Implementation of the `rehab` command line. Every command returns a
//! serializable report; `main` prints it and maps errors to exit codes.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rehab_core::analytics::{compute_posture_trace, compute_stats, export_csv, SessionStats};
use rehab_core::calibration::{estimate_grid_frame, CalibrationSample, GridFrame};
use rehab_core::config::ConfigOverrides;
use rehab_core::input::MovementScript;
use rehab_core::profile::SystemDefaults;
use rehab_core::recorder::{read_session, RecorderError, SessionLog};
use rehab_core::session::{simulate, verify_replay, ReplayCheck, SimulateError};
use rehab_core::skeleton::Vec3;
use rehab_core::{GameConfig, Grid, GridLayout, Location, Mechanic};
use serde::Serialize;
use serde_json::Value;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn recorder_err(path: &Path, e: RecorderError) -> CliError {
    match e {
        RecorderError::StorageFailure(io) => io_err(path, io),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    }
}

#[derive(Debug, Parser)]
#[command(name = "rehab", version, about = "Pillow-grid rehabilitation games: service, simulation and session tools")]
pub struct Cli {
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Run the REST and live service.
    Serve(ServeArgs),
    /// Play a headless game with a scripted player and record it.
    Simulate(SimulateArgs),
    /// Session statistics recomputed from the log body.
    Stats { session: PathBuf },
    /// Write the posture trace of a session as CSV.
    ExportCsv { session: PathBuf, out: PathBuf },
    /// Check a session's footer and replay it through a fresh engine.
    Verify { session: PathBuf },
    /// Monte Carlo accuracy of grid estimation and cell lookup.
    CalibTest(CalibTestArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
    /// `virtual`, `scripted:PATH`, `replay:PATH[@SPEED]` or `network:ADDR`.
    #[arg(long, default_value = "virtual")]
    pub source: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// A full game config, or `{"mechanic": ..., <overrides>}` merged onto
    /// the shipped defaults.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub script: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid frame JSON; defaults to a regular 0.5 m grid in front of the sensor.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value = "sim")]
    pub nickname: String,
    /// Header start time. Fixed by default so identical inputs give
    /// identical files.
    #[arg(long, default_value = "1970-01-01T00:00:00Z")]
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Args)]
pub struct CalibTestArgs {
    /// `random`, or `key=value` pairs from layout (3x3|1x3), pitch (m),
    /// rot (deg), x, z (m of the first calibration cell).
    #[arg(long, default_value = "random")]
    pub truth: TruthSpec,
    /// Per-axis Gaussian noise on each floor sample, metres.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 1000)]
    pub trials: u32,
    /// Distance within which an estimated centre counts as accurate.
    #[arg(long, default_value_t = 0.04)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 10)]
    pub queries_per_cell: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TruthSpec {
    /// Pitch 0.4-0.8 m, any rotation, origin within a few metres of the sensor.
    Random,
    Fixed { layout: GridLayout, pitch: f64, rot_deg: f64, x: f64, z: f64 },
}

impl FromStr for TruthSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "random" {
            return Ok(Self::Random);
        }
        let (mut layout, mut pitch, mut rot_deg, mut x, mut z) = (GridLayout::Grid3x3, 0.5, 0.0, 0.0, 2.0);
        for pair in s.split(',') {
            let (k, v) = pair.split_once('=').ok_or_else(|| format!("expected key=value, got `{pair}`"))?;
            let num = || v.parse::<f64>().map_err(|_| format!("`{k}` needs a number, got `{v}`"));
            match k {
                "layout" => {
                    layout = match v {
                        "3x3" => GridLayout::Grid3x3,
                        "1x3" => GridLayout::Line3,
                        _ => return Err(format!("unknown layout `{v}`")),
                    }
                }
                "pitch" => pitch = num()?,
                "rot" => rot_deg = num()?,
                "x" => x = num()?,
                "z" => z = num()?,
                _ => return Err(format!("unknown key `{k}`")),
            }
        }
        if !(pitch > 0.0) {
            return Err("pitch must be positive".into());
        }
        Ok(Self::Fixed { layout, pitch, rot_deg, x, z })
    }
}

/// Regular grid rotated by `theta` about the vertical axis; `origin` is the
/// centre of cell (0, 0).
pub fn rotated_grid(layout: GridLayout, origin: Vec3<f64>, pitch: f64, theta: f64) -> Grid {
    let col = Vec3::new(theta.cos(), 0.0, theta.sin()) * pitch;
    let mut row = Vec3::new(-theta.sin(), 0.0, theta.cos()) * pitch;
    if layout == GridLayout::Line3 && row.z < 0.0 {
        row = -row;
    }
    GridFrame::from_parts(layout, origin, row, col).expect("non-degenerate grid")
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibReport {
    pub trials: u32,
    pub noise_m: f64,
    pub tolerance_m: f64,
    /// Share of trials whose every estimated centre is within tolerance.
    pub all_centres_within_rate: f64,
    pub mean_centre_error_m: f64,
    pub max_centre_error_m: f64,
    pub locate_queries: u64,
    /// Query points within 30% of pitch of a centre, classified with a
    /// noise-free estimate.
    pub locate_noise_free_rate: f64,
    pub locate_noisy_rate: f64,
    pub estimation_failures: u32,
}

pub fn calib_test(args: &CalibTestArgs) -> Result<CalibReport, CliError> {
    if args.trials == 0 || !(args.noise >= 0.0) || !(args.tolerance > 0.0) {
        return Err(CliError::Validation("need trials > 0, noise >= 0 and tolerance > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (mut within, mut failures) = (0u32, 0u32);
    let (mut err_sum, mut err_n, mut err_max) = (0.0, 0u64, 0.0f64);
    let (mut queries, mut clean_hits, mut noisy_hits) = (0u64, 0u64, 0u64);
    for _ in 0..args.trials {
        let (layout, truth) = match &args.truth {
            TruthSpec::Random => {
                let pitch = rng.random_range(0.4..=0.8);
                let theta = rng.random_range(0.0..2.0 * PI);
                let origin = Vec3::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(1.5..3.5));
                (GridLayout::Grid3x3, rotated_grid(GridLayout::Grid3x3, origin, pitch, theta))
            }
            TruthSpec::Fixed { layout, pitch, rot_deg, x, z } => {
                (*layout, rotated_grid(*layout, Vec3::new(*x, 0.0, *z), *pitch, rot_deg.to_radians()))
            }
        };
        let pitch = truth.cell_pitch_m()[1];
        let cells = layout.calibration_cells();
        let clean = estimate_grid_frame(layout, &cells.map(|c| CalibrationSample::new(c, truth.cell_center(c), 0)));
        let noisy = estimate_grid_frame(
            layout,
            &cells.map(|c| {
                let n = Vec3::new(rng.sample::<f64, _>(StandardNormal), 0.0, rng.sample::<f64, _>(StandardNormal)) * args.noise;
                CalibrationSample::new(c, truth.cell_center(c) + n, 0)
            }),
        );
        let (Ok(clean), Ok(noisy)) = (clean, noisy) else {
            failures += 1;
            continue;
        };
        let mut all_ok = true;
        for cell in layout.cells() {
            let e = noisy.cell_center(cell).distance(truth.cell_center(cell));
            all_ok &= e <= args.tolerance;
            err_sum += e;
            err_n += 1;
            err_max = err_max.max(e);
            for _ in 0..args.queries_per_cell {
                let r = 0.3 * pitch * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..2.0 * PI);
                let q = truth.cell_center(cell) + Vec3::new(r * a.cos(), 0.0, r * a.sin());
                queries += 1;
                clean_hits += u64::from(clean.locate_cell(q) == Location::Cell(cell));
                noisy_hits += u64::from(noisy.locate_cell(q) == Location::Cell(cell));
            }
        }
        within += u32::from(all_ok);
    }
    let rate = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(CalibReport {
        trials: args.trials,
        noise_m: args.noise,
        tolerance_m: args.tolerance,
        all_centres_within_rate: rate(within.into(), args.trials.into()),
        mean_centre_error_m: if err_n == 0 { 0.0 } else { err_sum / err_n as f64 },
        max_centre_error_m: err_max,
        locate_queries: queries,
        locate_noise_free_rate: rate(clean_hits, queries),
        locate_noisy_rate: rate(noisy_hits, queries),
        estimation_failures: failures,
    })
}

/// Parses a simulation config: a full [`GameConfig`] or a mechanic plus
/// overrides on the shipped defaults.
pub fn parse_sim_config(text: &str) -> Result<GameConfig, CliError> {
    let bad = |e: &dyn std::fmt::Display| CliError::Validation(format!("config: {e}"));
    let mut value: Value = serde_json::from_str(text).map_err(|e| bad(&e))?;
    let config = match serde_json::from_value::<GameConfig>(value.clone()) {
        Ok(c) => c,
        Err(full_err) => {
            let obj = value.as_object_mut().ok_or_else(|| bad(&"expected a JSON object"))?;
            let Some(mechanic) = obj.remove("mechanic") else { return Err(bad(&full_err)) };
            let mechanic: Mechanic = serde_json::from_value(mechanic).map_err(|e| bad(&e))?;
            let overrides: ConfigOverrides = serde_json::from_value(value).map_err(|e| bad(&e))?;
            SystemDefaults::shipped().for_mechanic(mechanic).merged(&overrides).map_err(|e| bad(&e))?
        }
    };
    config.validate().map_err(|e| bad(&e))?;
    Ok(config)
}

pub fn default_grid(layout: GridLayout) -> Grid {
    rehab_service::station::demo_grid(layout)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn run_simulate(args: &SimulateArgs) -> Result<SessionStats, CliError> {
    let mut config = parse_sim_config(&read_text(&args.config)?)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let script = MovementScript::from_json(&read_text(&args.script)?).map_err(|e| CliError::Validation(format!("script: {e}")))?;
    let grid = match &args.grid {
        Some(p) => serde_json::from_str::<Grid>(&read_text(p)?).map_err(|e| CliError::Validation(format!("grid: {e}")))?,
        None => default_grid(config.layout),
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let out = std::fs::File::create(&args.out).map_err(|e| io_err(&args.out, e))?;
    let sim = simulate(config, grid, script, &args.nickname, args.started_at, std::io::BufWriter::new(out)).map_err(|e| match e {
        SimulateError::Recorder(RecorderError::StorageFailure(io)) => io_err(&args.out, io),
        other => CliError::Validation(other.to_string()),
    })?;
    Ok(sim.footer.summary)
}

fn load(path: &Path) -> Result<(SessionLog, rehab_core::recorder::ReadReport), CliError> {
    if !path.is_file() {
        return Err(io_err(path, "no such file"));
    }
    read_session(path).map_err(|e| recorder_err(path, e))
}

pub fn run_stats(path: &Path) -> Result<SessionStats, CliError> {
    Ok(compute_stats(&load(path)?.0))
}

#[derive(Debug, Serialize)]
pub struct ExportReport {
    pub rows: usize,
    pub skipped_frames: usize,
    pub out: PathBuf,
}

pub fn run_export(session: &Path, out: &Path) -> Result<ExportReport, CliError> {
    let trace = compute_posture_trace(&load(session)?.0);
    export_csv(&trace, out).map_err(|e| io_err(out, e))?;
    Ok(ExportReport { rows: trace.samples.len(), skipped_frames: trace.skipped, out: out.to_path_buf() })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct FieldMismatch {
    pub field: String,
    pub stored: Value,
    pub recomputed: Value,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub ok: bool,
    pub footer_present: bool,
    pub skipped_lines: Vec<usize>,
    pub stats_mismatches: Vec<FieldMismatch>,
    pub replay: ReplayCheck,
}

pub fn run_verify(path: &Path) -> Result<VerifyReport, CliError> {
    let (log, report) = load(path)?;
    let recomputed = compute_stats(&log);
    let mut stats_mismatches = Vec::new();
    if let Some(footer) = &log.footer {
        let stored = serde_json::to_value(&footer.summary).expect("stats serialize");
        let fresh = serde_json::to_value(&recomputed).expect("stats serialize");
        for (field, s) in stored.as_object().expect("stats are an object") {
            let r = fresh.get(field).cloned().unwrap_or(Value::Null);
            if *s != r {
                stats_mismatches.push(FieldMismatch { field: field.clone(), stored: s.clone(), recomputed: r });
            }
        }
    }
    let replay = verify_replay(&log).map_err(|e| CliError::Validation(format!("replay failed: {e}")))?;
    let ok = report.footer_present && report.skipped.is_empty() && stats_mismatches.is_empty() && replay.matches();
    Ok(VerifyReport {
        ok,
        footer_present: report.footer_present,
        skipped_lines: report.skipped.iter().map(|s| s.line).collect(),
        stats_mismatches,
        replay,
    })
}

/// What a command produced; `failed` commands still print their report.
pub struct Output {
    pub report: Value,
    pub failed: bool,
}

fn output(report: impl Serialize) -> Output {
    Output { report: serde_json::to_value(report).expect("reports serialize"), failed: false }
}

/// Runs every command except `serve`.
pub fn run(cmd: &CliCommand) -> Result<Output, CliError> {
    match cmd {
        CliCommand::Simulate(a) => run_simulate(a).map(output),
        CliCommand::Stats { session } => run_stats(session).map(output),
        CliCommand::ExportCsv { session, out } => run_export(session, out).map(output),
        CliCommand::Verify { session } => {
            let r = run_verify(session)?;
            let failed = !r.ok;
            Ok(Output { failed, ..output(r) })
        }
        CliCommand::CalibTest(a) => calib_test(a).map(output),
        CliCommand::Serve(_) => Err(CliError::Validation("serve is handled by the binary".into())),
    }
}

/// Flat `key: value` rendering for humans.
pub fn render_text(v: &Value) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            Value::Array(a) if a.iter().any(|x| x.is_object()) => {
                for (i, x) in a.iter().enumerate() {
                    walk(&format!("{prefix}[{i}]"), x, out);
                }
            }
            other => out.push_str(&format!("{prefix}: {}\n", match other {
                Value::String(s) => s.clone(),
                x => x.to_string(),
            })),
        }
    }
    let mut out = String::new();
    walk("", v, &mut out);
    out
}
