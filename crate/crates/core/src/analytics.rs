//! Session statistics, posture traces, weekly trends and CSV export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Location;
use crate::engine::{EndReason, EventKind};
use crate::recorder::{EngineCommand, LogRecord, Marker, SessionHeader, SessionLog};
use crate::calibration::player_floor_point;
use crate::skeleton::{posture_metrics, DEPTH_JOINTS};
use crate::{Cell, Grid, Posture};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionStats {
    pub duration_s: f64,
    pub frames: u64,
    /// Rounds or waves resolved.
    pub rounds_or_waves: u32,
    pub correct: u32,
    pub missed: u32,
    pub final_score: u32,
    pub hit_rate: f64,
    pub mean_shift_latency_s: Option<f64>,
    pub median_shift_latency_s: Option<f64>,
    pub latency_samples: u32,
    pub difficulty_eased_count: u32,
    pub end_reason: Option<EndReason>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Goal {
    Cell(Cell),
    Lane(u8),
}

#[derive(Debug, Clone, Copy)]
struct OpenTarget {
    shown_ms: u64,
    goal: Goal,
    reached: bool,
}

/// Incremental form of [`compute_stats`]; the recorder feeds it while
/// writing so the footer summary matches a later recomputation.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    grid: Grid,
    pending_grid: Option<Grid>,
    first_t: Option<u64>,
    last_t: u64,
    frames: u64,
    correct: u32,
    missed: u32,
    score: u32,
    eased: u32,
    end_reason: Option<EndReason>,
    open: Vec<OpenTarget>,
    player: Location,
    latencies_ms: Vec<u64>,
}

impl StatsAccumulator {
    pub fn new(header: &SessionHeader) -> Self {
        Self {
            grid: header.grid.clone(),
            pending_grid: None,
            first_t: None,
            last_t: 0,
            frames: 0,
            correct: 0,
            missed: 0,
            score: 0,
            eased: 0,
            end_reason: None,
            open: Vec::new(),
            player: Location::Outside,
            latencies_ms: Vec::new(),
        }
    }

    fn goal_met(&self, goal: Goal) -> bool {
        match (goal, self.player) {
            (Goal::Cell(c), Location::Cell(p)) => c == p,
            (Goal::Lane(l), Location::Cell(p)) => p.col == l,
            _ => false,
        }
    }

    fn open_target(&mut self, t: u64, goal: Goal) {
        self.open.push(OpenTarget { shown_ms: t, goal, reached: false });
    }

    pub fn push(&mut self, record: &LogRecord) {
        let t = record.t_ms();
        self.first_t.get_or_insert(t);
        self.last_t = t;
        match record {
            LogRecord::Frame(f) => {
                self.frames += 1;
                self.player = self.grid.locate_cell(player_floor_point(f));
                for i in 0..self.open.len() {
                    let o = self.open[i];
                    if !o.reached && self.goal_met(o.goal) {
                        self.open[i].reached = true;
                        self.latencies_ms.push(t - o.shown_ms);
                    }
                }
            }
            LogRecord::Marker { marker: Marker::Command(EngineCommand::Recalibrate { grid }), .. } => {
                self.pending_grid = Some(grid.clone());
            }
            LogRecord::Marker { .. } => {}
            LogRecord::Event(e) => match &e.kind {
                EventKind::TargetShown { cell, .. } => {
                    if let Some(g) = self.pending_grid.take() {
                        self.grid = g;
                    }
                    self.open_target(t, Goal::Cell(*cell));
                }
                EventKind::WaveSpawned { safe_lane, .. } => {
                    if self.open.is_empty() {
                        if let Some(g) = self.pending_grid.take() {
                            self.grid = g;
                        }
                    }
                    self.open_target(t, Goal::Lane(*safe_lane));
                }
                EventKind::Resolved { correct, .. } => {
                    if !self.open.is_empty() {
                        self.open.remove(0);
                    }
                    if *correct {
                        self.correct += 1;
                    } else {
                        self.missed += 1;
                    }
                }
                EventKind::ScoreChanged { new_score } => self.score = *new_score,
                EventKind::DifficultyEased { .. } => self.eased += 1,
                EventKind::GameEnded { reason } => self.end_reason = Some(*reason),
                EventKind::LifeLost { .. } | EventKind::FeedbackCue { .. } => {}
            },
        }
    }

    pub fn snapshot(&self) -> SessionStats {
        let resolved = self.correct + self.missed;
        let mut lat: Vec<f64> = self.latencies_ms.iter().map(|&ms| ms as f64 / 1000.0).collect();
        lat.sort_by(f64::total_cmp);
        let mean = (!lat.is_empty()).then(|| lat.iter().sum::<f64>() / lat.len() as f64);
        let median = (!lat.is_empty()).then(|| {
            let n = lat.len();
            if n % 2 == 1 { lat[n / 2] } else { (lat[n / 2 - 1] + lat[n / 2]) / 2.0 }
        });
        SessionStats {
            duration_s: self.first_t.map_or(0.0, |f| (self.last_t - f) as f64 / 1000.0),
            frames: self.frames,
            rounds_or_waves: resolved,
            correct: self.correct,
            missed: self.missed,
            final_score: self.score,
            hit_rate: if resolved == 0 { 0.0 } else { self.correct as f64 / resolved as f64 },
            mean_shift_latency_s: mean,
            median_shift_latency_s: median,
            latency_samples: lat.len() as u32,
            difficulty_eased_count: self.eased,
            end_reason: self.end_reason,
        }
    }
}

/// Shift latency is the time from a target (or wave) appearing to the first
/// frame inside it, counted only if reached before resolution.
pub fn compute_stats(log: &SessionLog) -> SessionStats {
    let mut acc = StatsAccumulator::new(&log.header);
    for r in &log.records {
        acc.push(r);
    }
    acc.snapshot()
}

pub const ANGLE_COLUMNS: [&str; 6] = ["shoulder_tilt_deg", "hip_tilt_deg", "knee_l_deg", "knee_r_deg", "ankle_l_deg", "ankle_r_deg"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PostureSample {
    pub t_ms: u64,
    pub metrics: Posture,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PostureTrace {
    pub samples: Vec<PostureSample>,
    /// Frames with no computable angle.
    pub skipped: usize,
    pub summaries: BTreeMap<String, MetricSummary>,
}

fn depth_column(j: crate::JointId) -> String {
    format!("depth_{}_m", j.name())
}

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["t_ms".to_string()];
    h.extend(ANGLE_COLUMNS.iter().map(|s| s.to_string()));
    h.extend(DEPTH_JOINTS.iter().map(|&j| depth_column(j)));
    h
}

fn metric_values(p: &Posture) -> Vec<(String, Option<f64>)> {
    let mut v: Vec<(String, Option<f64>)> = ANGLE_COLUMNS.iter().map(|s| s.to_string()).zip(p.angles()).collect();
    v.extend(DEPTH_JOINTS.iter().map(|&j| (depth_column(j), p.depth_offsets.get(&j).copied())));
    v
}

pub fn compute_posture_trace(log: &SessionLog) -> PostureTrace {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for f in log.frames() {
        let metrics = posture_metrics(f);
        if metrics.has_any_angle() {
            samples.push(PostureSample { t_ms: f.t_ms(), metrics });
        } else {
            skipped += 1;
        }
    }
    let mut summaries: BTreeMap<String, MetricSummary> = BTreeMap::new();
    for s in &samples {
        for (name, value) in metric_values(&s.metrics) {
            let Some(x) = value else { continue };
            let e = summaries.entry(name).or_insert(MetricSummary { count: 0, min: f64::INFINITY, max: f64::NEG_INFINITY, mean: 0.0 });
            e.count += 1;
            e.min = e.min.min(x);
            e.max = e.max.max(x);
            e.mean += (x - e.mean) / e.count as f64;
        }
    }
    PostureTrace { samples, skipped, summaries }
}

/// Writes the trace as CSV; missing metrics are empty fields.
pub fn write_trace_csv<W: Write>(trace: &PostureTrace, out: W) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header())?;
    for s in &trace.samples {
        let mut row = vec![s.t_ms.to_string()];
        row.extend(metric_values(&s.metrics).into_iter().map(|(_, v)| v.map_or_else(String::new, |x| format!("{x:.4}"))));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(trace: &PostureTrace, path: &Path) -> Result<(), AnalyticsError> {
    let file = std::fs::File::create(path)?;
    write_trace_csv(trace, std::io::BufWriter::new(file))
}

/// Stats as a one-row CSV.
pub fn write_stats_csv<W: Write>(stats: &SessionStats, out: W) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_writer(out);
    w.serialize(stats)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatedStats {
    pub started_at: DateTime<Utc>,
    pub stats: SessionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeekBucket {
    pub iso_year: i32,
    pub iso_week: u32,
    pub sessions: u32,
    pub total_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Trends {
    pub weeks: Vec<WeekBucket>,
    pub scores: Vec<u32>,
    pub hit_rates: Vec<f64>,
    /// Mean latency of the last session minus the first, over sessions that
    /// have latency samples.
    pub latency_delta_s: Option<f64>,
}

/// `sessions` must be sorted by start time.
pub fn profile_trends(sessions: &[DatedStats]) -> Trends {
    let mut weeks: Vec<WeekBucket> = Vec::new();
    for s in sessions {
        let w = s.started_at.iso_week();
        let minutes = s.stats.duration_s / 60.0;
        match weeks.iter_mut().find(|b| b.iso_year == w.year() && b.iso_week == w.week()) {
            Some(b) => {
                b.sessions += 1;
                b.total_minutes += minutes;
            }
            None => weeks.push(WeekBucket { iso_year: w.year(), iso_week: w.week(), sessions: 1, total_minutes: minutes }),
        }
    }
    let lat: Vec<f64> = sessions.iter().filter_map(|s| s.stats.mean_shift_latency_s).collect();
    Trends {
        weeks,
        scores: sessions.iter().map(|s| s.stats.final_score).collect(),
        hit_rates: sessions.iter().map(|s| s.stats.hit_rate).collect(),
        latency_delta_s: (lat.len() >= 2).then(|| lat[lat.len() - 1] - lat[0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::GridFrame;
    use crate::config::{GameConfig, Mechanic};
    use crate::engine::GameEvent;
    use crate::skeleton::{SkeletonFrame, Vec3};
    use crate::GridLayout;

    fn grid() -> Grid {
        GridFrame::regular(GridLayout::Grid3x3, Vec3::new(-0.5, 0.0, 2.0), 0.5).unwrap()
    }

    fn log_with(records: Vec<LogRecord>) -> SessionLog {
        let header = SessionHeader::new("f6", DateTime::from_timestamp(0, 0).unwrap(), GameConfig::default_for(Mechanic::GridDance), grid());
        SessionLog { header, records, footer: None }
    }

    fn ev(t: u64, kind: EventKind) -> LogRecord {
        LogRecord::Event(GameEvent { t_ms: t, kind })
    }

    fn standing_at(t: u64, p: Vec3<f64>) -> LogRecord {
        LogRecord::Frame(SkeletonFrame::from_fn(t, |_| p).unwrap())
    }

    #[test]
    fn counts_and_hit_rate() {
        let mut recs = Vec::new();
        let mut score = 0;
        for (i, hit) in [true, false, true, false, true].into_iter().enumerate() {
            let t = i as u64 * 1000;
            recs.push(ev(t, EventKind::Resolved { correct: hit, player_cell: None }));
            if hit {
                score += 1;
                recs.push(ev(t, EventKind::ScoreChanged { new_score: score }));
            }
        }
        let s = compute_stats(&log_with(recs));
        assert_eq!((s.rounds_or_waves, s.correct, s.missed, s.final_score), (5, 3, 2, 3));
        assert_eq!(s.hit_rate, 0.6);
        assert_eq!(s.duration_s, 4.0);
    }

    #[test]
    fn empty_log() {
        let s = compute_stats(&log_with(vec![]));
        assert_eq!(s.hit_rate, 0.0);
        assert_eq!(s.latency_samples, 0);
        assert_eq!(s.mean_shift_latency_s, None);
        assert_eq!(s.duration_s, 0.0);
    }

    #[test]
    fn shift_latency_first_entry() {
        let g = grid();
        let target = Cell::new(2, 2);
        let away = g.cell_center(Cell::new(0, 0));
        let on = g.cell_center(target);
        let recs = vec![
            standing_at(0, away),
            ev(0, EventKind::TargetShown { cell: target, screen_cell: target }),
            standing_at(1000, away),
            standing_at(2500, on),
            standing_at(3000, on),
            ev(3000, EventKind::Resolved { correct: true, player_cell: Some(target) }),
            // second round never reached
            ev(5000, EventKind::TargetShown { cell: Cell::new(0, 1), screen_cell: Cell::new(0, 1) }),
            standing_at(6000, on),
            ev(8000, EventKind::Resolved { correct: false, player_cell: Some(target) }),
            standing_at(8100, g.cell_center(Cell::new(0, 1))),
        ];
        let s = compute_stats(&log_with(recs));
        assert_eq!(s.latency_samples, 1);
        assert_eq!(s.mean_shift_latency_s, Some(2.5));
        assert_eq!(s.median_shift_latency_s, Some(2.5));
    }

    #[test]
    fn prefix_stats_never_exceed_final() {
        let mut recs = Vec::new();
        for i in 0..20u64 {
            recs.push(ev(i * 10, EventKind::Resolved { correct: i % 3 == 0, player_cell: None }));
        }
        let full = compute_stats(&log_with(recs.clone()));
        for n in 0..recs.len() {
            let p = compute_stats(&log_with(recs[..n].to_vec()));
            assert!(p.correct <= full.correct && p.missed <= full.missed && p.rounds_or_waves <= full.rounds_or_waves);
        }
    }

    #[test]
    fn upright_trace_and_skips() {
        let upright = |t| {
            LogRecord::Frame(
                SkeletonFrame::from_fn(t, |j| {
                    use crate::JointId::*;
                    let x = if matches!(j, HipL | KneeL | AnkleL | FootL | ShoulderL) { -0.1 } else { 0.1 };
                    let (y, z) = match j {
                        HipL | HipR => (0.9, 2.0),
                        KneeL | KneeR => (0.45, 2.0),
                        AnkleL | AnkleR => (0.08, 2.0),
                        FootL | FootR => (0.0, 1.9),
                        ShoulderL | ShoulderR => (1.4, 2.0),
                        _ => (1.0, 2.0),
                    };
                    Vec3::new(x, y, z)
                })
                .unwrap(),
            )
        };
        let degenerate = LogRecord::Frame(SkeletonFrame::from_fn(50, |_| Vec3::new(0.0, 0.0, 2.0)).unwrap());
        let log = log_with(vec![upright(0), upright(33), degenerate, upright(66)]);
        let trace = compute_posture_trace(&log);
        assert_eq!(trace.samples.len() + trace.skipped, 4);
        assert_eq!(trace.skipped, 1);
        let knee = trace.summaries["knee_l_deg"];
        assert!((knee.mean - 180.0).abs() < 1e-6);
        assert_eq!(trace.summaries["hip_tilt_deg"].mean, 0.0);
    }

    #[test]
    fn csv_shape_and_round_trip() {
        let empty = PostureTrace { samples: vec![], skipped: 0, summaries: BTreeMap::new() };
        let mut buf = Vec::new();
        write_trace_csv(&empty, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("t_ms,shoulder_tilt_deg,hip_tilt_deg,knee_l_deg,knee_r_deg,ankle_l_deg,ankle_r_deg,depth_shoulder_l_m"));

        let recs: Vec<LogRecord> = (0..7u64)
            .map(|k| LogRecord::Frame(SkeletonFrame::from_fn(k * 33, |j| Vec3::new(j.index() as f64 * 0.037, (j.index() as f64 * 0.7).sin() + 1.0, 2.0 + k as f64 * 0.01)).unwrap()))
            .collect();
        let trace = compute_posture_trace(&log_with(recs));
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), trace.samples.len());
        for (row, s) in rows.iter().zip(&trace.samples) {
            assert_eq!(row[0].parse::<u64>().unwrap(), s.t_ms);
            for (field, (_, v)) in row.iter().skip(1).zip(metric_values(&s.metrics)) {
                match v {
                    Some(x) => assert!((field.parse::<f64>().unwrap() - x).abs() <= 5e-5),
                    None => assert!(field.is_empty()),
                }
            }
        }
    }

    fn dated(day: &str, minutes: f64, latency: Option<f64>) -> DatedStats {
        DatedStats {
            started_at: DateTime::parse_from_rfc3339(&format!("{day}T10:00:00Z")).unwrap().with_timezone(&Utc),
            stats: SessionStats { duration_s: minutes * 60.0, mean_shift_latency_s: latency, ..Default::default() },
        }
    }

    #[test]
    fn trends_by_iso_week() {
        assert_eq!(profile_trends(&[]), Trends::default());
        // Mon-Wed of ISO week 42, then the next Monday
        let s = [dated("2026-10-12", 5.0, Some(5.0)), dated("2026-10-13", 5.0, Some(3.0)), dated("2026-10-14", 2.0, Some(2.0)), dated("2026-10-19", 1.0, None)];
        let t = profile_trends(&s);
        assert_eq!(t.weeks.len(), 2);
        assert_eq!((t.weeks[0].iso_week, t.weeks[0].sessions, t.weeks[0].total_minutes), (42, 3, 12.0));
        assert_eq!((t.weeks[1].iso_week, t.weeks[1].sessions), (43, 1));
        assert_eq!(t.latency_delta_s, Some(-3.0));
        // ISO week-year differs from the calendar year
        let t = profile_trends(&[dated("2027-01-01", 1.0, None)]);
        assert_eq!((t.weeks[0].iso_year, t.weeks[0].iso_week), (2026, 53));
    }
}
