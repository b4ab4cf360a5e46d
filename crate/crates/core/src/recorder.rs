//! Append-only session logs in line-delimited JSON.
//!
//! A log is one header line, a body of frame/event/marker records ordered by
//! `(t, kind)` with frames first on equal timestamps, and an optional footer.
//! Frames are written on a 0.1 mm lattice so a parsed log re-serializes to the
//! same bytes.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analytics::{SessionStats, StatsAccumulator};
use crate::config::GameConfig;
use crate::engine::{EndReason, EventKind, GameEvent, PauseReason};
use crate::skeleton::{posture_metrics, JointId, SkeletonFrame, Vec3, JOINT_COUNT};
use crate::{Cell, Frame, Grid, Posture, ViewMode};

pub const FORMAT_VERSION: u32 = 1;
pub const FLUSH_INTERVAL: Duration = Duration::from_secs(1);
pub const SESSION_SUFFIX: &str = ".session.jsonl";

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("record at t={t_ms} ms is older than the last written record")]
    OutOfOrderRecord { t_ms: u64 },
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("log has no header line")]
    MissingHeader,
    #[error("unsupported log format version {0}")]
    VersionUnsupported(u32),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub format_version: u32,
    pub nickname: String,
    pub started_at: DateTime<Utc>,
    pub seed: u64,
    pub config: GameConfig,
    pub grid: Grid,
    /// Reference to separately captured video, if any.
    pub video_ref: Option<String>,
}

impl SessionHeader {
    pub fn new(nickname: &str, started_at: DateTime<Utc>, config: GameConfig, grid: Grid) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            nickname: nickname.to_string(),
            started_at: truncate_to_seconds(started_at),
            seed: config.seed,
            config,
            grid,
            video_ref: None,
        }
    }
}

pub fn truncate_to_seconds(t: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp(t.timestamp(), 0).unwrap_or(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFooter {
    pub ended_at: DateTime<Utc>,
    pub end_reason: Option<EndReason>,
    pub summary: SessionStats,
}

/// Inputs that changed the course of a game; replay re-applies these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum EngineCommand {
    Pause,
    Resume,
    Abort,
    Recalibrate { grid: Grid },
    SetView { view: ViewMode },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Marker {
    Command(EngineCommand),
    AutoPause { reason: PauseReason },
    AutoResume,
    VirtualMove { cell: Cell },
    Warning { message: String },
}

impl Marker {
    pub fn command(&self) -> Option<&EngineCommand> {
        match self {
            Marker::Command(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    Frame(Frame),
    Event(GameEvent),
    Marker { t_ms: u64, marker: Marker },
}

impl LogRecord {
    pub fn t_ms(&self) -> u64 {
        match self {
            LogRecord::Frame(f) => f.t_ms(),
            LogRecord::Event(e) => e.t_ms,
            LogRecord::Marker { t_ms, .. } => *t_ms,
        }
    }

    /// Sort key: timestamp, then frames before everything else.
    pub fn order_key(&self) -> (u64, u8) {
        let rank = match self {
            LogRecord::Frame(_) => 0,
            _ => 1,
        };
        (self.t_ms(), rank)
    }

    pub fn as_frame(&self) -> Option<&Frame> {
        match self {
            LogRecord::Frame(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_event(&self) -> Option<&GameEvent> {
        match self {
            LogRecord::Event(e) => Some(e),
            _ => None,
        }
    }

    /// Canonical recorded form (frames quantized).
    pub fn canonical(self) -> Self {
        match self {
            LogRecord::Frame(f) => LogRecord::Frame(f.quantized()),
            other => other,
        }
    }

    pub fn to_line(&self) -> String {
        match self {
            LogRecord::Frame(f) => frame_to_line(f),
            LogRecord::Event(e) => {
                let body = serde_json::to_string(&e.kind).expect("event serializes");
                format!(r#"{{"t":{},"kind":"event","event":{}}}"#, e.t_ms, body)
            }
            LogRecord::Marker { t_ms, marker } => {
                let body = serde_json::to_string(marker).expect("marker serializes");
                format!(r#"{{"t":{},"kind":"marker","marker":{}}}"#, t_ms, body)
            }
        }
    }
}

/// Frame record line; also the wire format of the network frame source.
pub fn frame_to_line(frame: &Frame) -> String {
    let mut s = String::with_capacity(1100);
    let _ = write!(s, r#"{{"t":{},"kind":"frame","joints":{{"#, frame.t_ms());
    for (i, j) in JointId::ALL.iter().enumerate() {
        let p = frame.joint(*j);
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, r#""{}":[{:.4},{:.4},{:.4}]"#, j.name(), p.x, p.y, p.z);
    }
    s.push('}');
    if frame.confidences().iter().any(|&c| c != 1.0) {
        s.push_str(r#","conf":["#);
        for (i, c) in frame.confidences().iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{c:.2}");
        }
        s.push(']');
    }
    s.push('}');
    s
}

fn malformed(reason: impl Into<String>) -> RecorderError {
    RecorderError::Malformed { line: 0, reason: reason.into() }
}

fn frame_from_value(v: &Value) -> Result<Frame, RecorderError> {
    let t = v.get("t").and_then(Value::as_u64).ok_or_else(|| malformed("missing integer `t`"))?;
    let joints = v.get("joints").and_then(Value::as_object).ok_or_else(|| malformed("missing `joints` object"))?;
    if joints.len() != JOINT_COUNT {
        return Err(malformed(format!("expected {JOINT_COUNT} joints, found {}", joints.len())));
    }
    let mut pos = [Vec3::zero(); JOINT_COUNT];
    let mut seen = [false; JOINT_COUNT];
    for (name, xyz) in joints {
        let j: JointId = name.parse().map_err(|e: crate::skeleton::SkeletonError| malformed(e.to_string()))?;
        let arr = xyz.as_array().filter(|a| a.len() == 3).ok_or_else(|| malformed(format!("joint {name} is not [x,y,z]")))?;
        let c = |k: usize| arr[k].as_f64().ok_or_else(|| malformed(format!("joint {name} has a non-numeric coordinate")));
        pos[j.index()] = Vec3::new(c(0)?, c(1)?, c(2)?);
        seen[j.index()] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(malformed("duplicate joint names"));
    }
    let mut conf = [1.0; JOINT_COUNT];
    if let Some(cv) = v.get("conf") {
        let arr = cv.as_array().filter(|a| a.len() == JOINT_COUNT).ok_or_else(|| malformed("`conf` must hold 25 values"))?;
        for (slot, x) in conf.iter_mut().zip(arr) {
            *slot = x.as_f64().ok_or_else(|| malformed("non-numeric confidence"))?;
        }
    }
    SkeletonFrame::new(t, pos, conf).map_err(|e| malformed(e.to_string()))
}

/// Parses a single frame record line.
pub fn parse_frame_line(line: &str) -> Result<Frame, RecorderError> {
    let v: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    if v.get("kind").and_then(Value::as_str) != Some("frame") {
        return Err(malformed("not a frame record"));
    }
    frame_from_value(&v)
}

enum Line {
    Header(Box<SessionHeader>),
    Record(LogRecord),
    Footer(Box<SessionFooter>),
}

fn parse_line(line: &str) -> Result<Line, RecorderError> {
    let v: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let kind = v.get("kind").and_then(Value::as_str).ok_or_else(|| malformed("missing `kind`"))?;
    let t = || v.get("t").and_then(Value::as_u64).ok_or_else(|| malformed("missing integer `t`"));
    let field = |name: &str| v.get(name).cloned().ok_or_else(|| malformed(format!("missing `{name}`")));
    Ok(match kind {
        "header" => {
            let mut body = v.clone();
            body.as_object_mut().map(|o| o.remove("kind"));
            Line::Header(Box::new(serde_json::from_value(body).map_err(|e| malformed(e.to_string()))?))
        }
        "footer" => {
            let mut body = v.clone();
            body.as_object_mut().map(|o| o.remove("kind"));
            Line::Footer(Box::new(serde_json::from_value(body).map_err(|e| malformed(e.to_string()))?))
        }
        "frame" => Line::Record(LogRecord::Frame(frame_from_value(&v)?)),
        "event" => {
            let kind: EventKind = serde_json::from_value(field("event")?).map_err(|e| malformed(e.to_string()))?;
            Line::Record(LogRecord::Event(GameEvent { t_ms: t()?, kind }))
        }
        "marker" => {
            let marker: Marker = serde_json::from_value(field("marker")?).map_err(|e| malformed(e.to_string()))?;
            Line::Record(LogRecord::Marker { t_ms: t()?, marker })
        }
        other => return Err(malformed(format!("unknown record kind `{other}`"))),
    })
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    kind: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

pub fn header_to_line(h: &SessionHeader) -> String {
    serde_json::to_string(&Tagged { kind: "header", body: h }).expect("header serializes")
}

pub fn footer_to_line(f: &SessionFooter) -> String {
    serde_json::to_string(&Tagged { kind: "footer", body: f }).expect("footer serializes")
}

/// Writes one session. I/O failures disable recording without interrupting
/// the caller's session.
pub struct SessionWriter<W: Write> {
    out: Option<W>,
    header: SessionHeader,
    last_key: Option<(u64, u8)>,
    stats: StatsAccumulator,
    last_flush: Instant,
}

impl SessionWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: SessionHeader) -> Result<Self, RecorderError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = File::create(path)?;
        Self::new(BufWriter::new(file), header)
    }
}

impl<W: Write> SessionWriter<W> {
    pub fn new(mut out: W, header: SessionHeader) -> Result<Self, RecorderError> {
        writeln!(out, "{}", header_to_line(&header))?;
        out.flush()?;
        let stats = StatsAccumulator::new(&header);
        Ok(Self { out: Some(out), header, last_key: None, stats, last_flush: Instant::now() })
    }

    pub fn header(&self) -> &SessionHeader {
        &self.header
    }

    pub fn is_recording(&self) -> bool {
        self.out.is_some()
    }

    pub fn stats(&self) -> SessionStats {
        self.stats.snapshot()
    }

    pub fn last_t_ms(&self) -> Option<u64> {
        self.last_key.map(|(t, _)| t)
    }

    pub fn append(&mut self, record: LogRecord) -> Result<(), RecorderError> {
        let record = record.canonical();
        let key = record.order_key();
        if self.last_key.is_some_and(|last| key < last) {
            return Err(RecorderError::OutOfOrderRecord { t_ms: record.t_ms() });
        }
        self.last_key = Some(key);
        self.stats.push(&record);
        let Some(out) = self.out.as_mut() else { return Ok(()) };
        let line = record.to_line();
        let res = writeln!(out, "{line}").and_then(|_| {
            if self.last_flush.elapsed() >= FLUSH_INTERVAL {
                self.last_flush = Instant::now();
                out.flush()
            } else {
                Ok(())
            }
        });
        if let Err(e) = res {
            self.out = None;
            return Err(RecorderError::StorageFailure(e));
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), RecorderError> {
        if let Some(out) = self.out.as_mut() {
            if let Err(e) = out.flush() {
                self.out = None;
                return Err(e.into());
            }
        }
        Ok(())
    }

    /// Writes the footer and returns it with the underlying writer.
    pub fn finish(mut self, ended_at: DateTime<Utc>) -> Result<(SessionFooter, Option<W>), RecorderError> {
        let summary = self.stats.snapshot();
        let footer = SessionFooter {
            ended_at: truncate_to_seconds(ended_at),
            end_reason: summary.end_reason,
            summary,
        };
        if let Some(out) = self.out.as_mut() {
            writeln!(out, "{}", footer_to_line(&footer))?;
            out.flush()?;
        }
        Ok((footer, self.out.take()))
    }
}

/// A parsed session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: SessionHeader,
    pub records: Vec<LogRecord>,
    pub footer: Option<SessionFooter>,
}

impl SessionLog {
    pub fn to_text(&self) -> String {
        let mut s = header_to_line(&self.header);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        if let Some(f) = &self.footer {
            s.push_str(&footer_to_line(f));
            s.push('\n');
        }
        s
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.records.iter().filter_map(LogRecord::as_frame)
    }

    pub fn events(&self) -> impl Iterator<Item = &GameEvent> {
        self.records.iter().filter_map(LogRecord::as_event)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReadReport {
    pub skipped: Vec<SkippedLine>,
    pub footer_present: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadMode {
    /// Skip malformed or out-of-order lines and report them.
    Tolerant,
    /// Fail on the first bad line.
    Strict,
}

pub fn parse_session(text: &str, mode: ReadMode) -> Result<(SessionLog, ReadReport), RecorderError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header = match lines.next().map(|(_, l)| parse_line(l)) {
        Some(Ok(Line::Header(h))) => *h,
        _ => return Err(RecorderError::MissingHeader),
    };
    if header.format_version != FORMAT_VERSION {
        return Err(RecorderError::VersionUnsupported(header.format_version));
    }
    let mut report = ReadReport::default();
    let mut records: Vec<LogRecord> = Vec::new();
    let mut footer = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let outcome = match parse_line(line) {
            Ok(Line::Record(r)) if footer.is_some() => Err("record after footer".to_string()).map(|_: ()| r),
            Ok(Line::Record(r)) => match records.last() {
                Some(prev) if r.order_key() < prev.order_key() => Err(format!("out-of-order record at t={}", r.t_ms())),
                _ => Ok(r),
            },
            Ok(Line::Footer(f)) if footer.is_none() => {
                footer = Some(*f);
                continue;
            }
            Ok(Line::Footer(_)) => Err("duplicate footer".to_string()),
            Ok(Line::Header(_)) => Err("duplicate header".to_string()),
            Err(RecorderError::Malformed { reason, .. }) => Err(reason),
            Err(e) => Err(e.to_string()),
        };
        match outcome {
            Ok(r) => records.push(r),
            Err(reason) if mode == ReadMode::Tolerant => report.skipped.push(SkippedLine { line: line_no, reason }),
            Err(reason) => return Err(RecorderError::Malformed { line: line_no, reason }),
        }
    }
    report.footer_present = footer.is_some();
    Ok((SessionLog { header, records, footer }, report))
}

/// Reads a session file in tolerant mode.
pub fn read_session(path: &Path) -> Result<(SessionLog, ReadReport), RecorderError> {
    let text = fs::read_to_string(path)?;
    parse_session(&text, ReadMode::Tolerant)
}

/// Reads only the header line of a session file.
pub fn read_header(path: &Path) -> Result<SessionHeader, RecorderError> {
    use std::io::BufRead;
    let mut first = String::new();
    io::BufReader::new(File::open(path)?).read_line(&mut first)?;
    match parse_line(first.trim_end()) {
        Ok(Line::Header(h)) if h.format_version == FORMAT_VERSION => Ok(*h),
        Ok(Line::Header(h)) => Err(RecorderError::VersionUnsupported(h.format_version)),
        _ => Err(RecorderError::MissingHeader),
    }
}

pub struct ReplayItem<'a> {
    pub record: &'a LogRecord,
    /// Posture of frame records, computed on the fly.
    pub metrics: Option<Posture>,
}

/// Records with `from_ms <= t <= to_ms`, frames annotated with posture metrics.
pub fn replay_iterate(log: &SessionLog, from_ms: u64, to_ms: u64) -> impl Iterator<Item = ReplayItem<'_>> {
    log.records
        .iter()
        .skip_while(move |r| r.t_ms() < from_ms)
        .take_while(move |r| r.t_ms() <= to_ms)
        .map(|record| ReplayItem { metrics: record.as_frame().map(posture_metrics), record })
}

/// `20261016T093000Z.session.jsonl`
pub fn session_file_name(started_at: DateTime<Utc>) -> String {
    format!("{}{}", started_at.format("%Y%m%dT%H%M%SZ"), SESSION_SUFFIX)
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::GridFrame;
    use crate::config::Mechanic;
    use crate::GridLayout;

    fn header() -> SessionHeader {
        let grid = GridFrame::regular(GridLayout::Grid3x3, Vec3::new(-0.5, 0.0, 2.0), 0.5).unwrap();
        SessionHeader::new("f6", DateTime::from_timestamp(1_780_000_000, 0).unwrap(), GameConfig::default_for(Mechanic::GridDance), grid)
    }

    fn frame(t: u64) -> Frame {
        SkeletonFrame::from_fn(t, |j| Vec3::new(j.index() as f64 * 0.01 - 0.123_456, 0.5, 2.0 + t as f64 * 1e-5)).unwrap()
    }

    fn event(t: u64) -> LogRecord {
        LogRecord::Event(GameEvent { t_ms: t, kind: EventKind::ScoreChanged { new_score: 1 } })
    }

    #[test]
    fn frame_sorts_before_event_at_same_time() {
        let mut w = SessionWriter::new(Vec::new(), header()).unwrap();
        w.append(LogRecord::Frame(frame(33))).unwrap();
        w.append(event(33)).unwrap();
        assert!(matches!(w.append(LogRecord::Frame(frame(33))), Err(RecorderError::OutOfOrderRecord { t_ms: 33 })));
        assert!(matches!(w.append(event(10)), Err(RecorderError::OutOfOrderRecord { .. })));
        w.append(event(33)).unwrap();
    }

    #[test]
    fn write_read_round_trip_is_byte_exact() {
        let mut w = SessionWriter::new(Vec::new(), header()).unwrap();
        for k in 0..1800u64 {
            let t = k * 1000 / 30;
            w.append(LogRecord::Frame(frame(t))).unwrap();
            if k % 300 == 0 {
                w.append(LogRecord::Event(GameEvent { t_ms: t, kind: EventKind::DifficultyEased { new_time_s: 12.5 } })).unwrap();
                w.append(LogRecord::Marker { t_ms: t, marker: Marker::Command(EngineCommand::Pause) }).unwrap();
            }
        }
        let (_, out) = w.finish(DateTime::from_timestamp(1_780_000_060, 0).unwrap()).unwrap();
        let text = String::from_utf8(out.unwrap()).unwrap();
        let (log, report) = parse_session(&text, ReadMode::Strict).unwrap();
        assert!(report.skipped.is_empty());
        assert!(report.footer_present);
        assert_eq!(log.frames().count(), 1800);
        assert_eq!(log.to_text(), text);
        assert_eq!(log.footer.as_ref().unwrap().summary.frames, 1800);
    }

    #[test]
    fn frame_line_round_trip_with_confidence() {
        let mut conf = [1.0; JOINT_COUNT];
        conf[4] = 0.25;
        let f = SkeletonFrame::new(7, *frame(7).joints(), conf).unwrap().quantized();
        let line = frame_to_line(&f);
        assert!(line.starts_with(r#"{"t":7,"kind":"frame","joints":{"spine_base":["#));
        let back = parse_frame_line(&line).unwrap();
        assert_eq!(back, f);
        assert_eq!(frame_to_line(&back), line);
    }

    #[test]
    fn malformed_frames_rejected() {
        let line = frame_to_line(&frame(0).quantized());
        assert!(parse_frame_line(&line.replace("\"head\"", "\"hed\"")).is_err());
        assert!(parse_frame_line(&line[..line.len() - 3]).is_err());
        assert!(parse_frame_line(r#"{"t":1,"kind":"event","event":{}}"#).is_err());
    }

    #[test]
    fn footerless_log_is_readable() {
        let mut w = SessionWriter::new(Vec::new(), header()).unwrap();
        for t in 0..10 {
            w.append(LogRecord::Frame(frame(t * 33))).unwrap();
        }
        w.flush().unwrap();
        let text = String::from_utf8(w.out.take().unwrap()).unwrap();
        let (log, report) = parse_session(&text, ReadMode::Tolerant).unwrap();
        assert_eq!(log.records.len(), 10);
        assert!(log.footer.is_none());
        assert!(!report.footer_present);
        // a crash mid-line leaves a truncated tail
        let cut = &text[..text.len() - 40];
        let (log, report) = parse_session(cut, ReadMode::Tolerant).unwrap();
        assert_eq!(log.records.len(), 9);
        assert_eq!(report.skipped.len(), 1);
        assert!(parse_session(cut, ReadMode::Strict).is_err());
    }

    #[test]
    fn header_errors() {
        assert!(matches!(parse_session("", ReadMode::Tolerant), Err(RecorderError::MissingHeader)));
        let body = event(0).to_line();
        assert!(matches!(parse_session(&body, ReadMode::Tolerant), Err(RecorderError::MissingHeader)));
        let mut h = header();
        h.format_version = 9;
        assert!(matches!(parse_session(&header_to_line(&h), ReadMode::Tolerant), Err(RecorderError::VersionUnsupported(9))));
    }

    #[test]
    fn one_corrupt_line_in_a_thousand() {
        let mut w = SessionWriter::new(Vec::new(), header()).unwrap();
        for t in 0..1000u64 {
            w.append(event(t)).unwrap();
        }
        let (_, out) = w.finish(Utc::now()).unwrap();
        let text = String::from_utf8(out.unwrap()).unwrap();
        let corrupted: Vec<String> = text
            .lines()
            .enumerate()
            .map(|(i, l)| if i == 500 { l.replace("score_changed", "scor\u{0}e") } else { l.to_string() })
            .collect();
        let (log, report) = parse_session(&corrupted.join("\n"), ReadMode::Tolerant).unwrap();
        assert_eq!(log.records.len(), 999);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].line, 501);
    }

    #[test]
    fn replay_window() {
        let mut log = SessionLog { header: header(), records: Vec::new(), footer: None };
        for t in 0..30u64 {
            log.records.push(LogRecord::Frame(frame(t * 33).quantized()));
            log.records.push(event(t * 33));
        }
        assert_eq!(replay_iterate(&log, 0, u64::MAX).count(), log.records.len());
        let first: Vec<_> = replay_iterate(&log, 0, 0).collect();
        assert_eq!(first.len(), 2);
        assert!(first[0].metrics.is_some() && first[1].metrics.is_none());
        assert_eq!(replay_iterate(&log, 5000, 6000).count(), 0);
    }

    #[test]
    fn storage_failure_disables_recording() {
        struct Broken {
            budget: usize,
        }
        impl Write for Broken {
            fn write(&mut self, b: &[u8]) -> io::Result<usize> {
                if b.len() > self.budget {
                    return Err(io::Error::other("disk full"));
                }
                self.budget -= b.len();
                Ok(b.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let budget = header_to_line(&header()).len() + 1;
        let mut w = SessionWriter::new(Broken { budget }, header()).unwrap();
        assert!(matches!(w.append(event(1)), Err(RecorderError::StorageFailure(_))));
        assert!(!w.is_recording());
        w.append(event(2)).unwrap();
        assert_eq!(w.stats().end_reason, None);
    }

    #[test]
    fn file_name_is_compact_iso() {
        let t = DateTime::parse_from_rfc3339("2026-10-16T09:30:05Z").unwrap().with_timezone(&Utc);
        assert_eq!(session_file_name(t), "20261016T093005Z.session.jsonl");
        assert_eq!(format_timestamp(t), "2026-10-16T09:30:05Z");
    }
}
