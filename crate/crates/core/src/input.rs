//! Skeleton frame sources: scripted synthetic player, replayed logs, a TCP
//! bridge for a live sensor, and a virtual player steered by the UI.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{tick_to_ms, GameSnapshot};
use crate::recorder::{parse_frame_line, read_session, LogRecord, RecorderError, SessionLog};
use crate::skeleton::{SkeletonFrame, Vec3};
use crate::{Cell, Frame, Grid, GridLayout, JointId, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("end of stream")]
    EndOfStream,
    /// No frame is available yet (live sources).
    #[error("no frame available")]
    WouldBlock,
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("cell {0} is not on the grid")]
    InvalidCell(Cell),
    #[error("source is not virtual")]
    NotVirtual,
    #[error("invalid source: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SourceStats {
    pub frames: u64,
    pub malformed: u64,
    pub dropped: u64,
}

pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Result<Frame, SourceError>;

    fn stats(&self) -> SourceStats;

    /// Lets reactive sources follow the game.
    fn observe(&mut self, _now_ms: u64, _snapshot: &GameSnapshot) {}

    /// Called after recalibration.
    fn set_grid(&mut self, _grid: &Grid) {}

    fn virtual_move(&mut self, _cell: Cell) -> Result<(), SourceError> {
        Err(SourceError::NotVirtual)
    }

    fn kind(&self) -> &'static str;
}

/// Baseline joint offsets in metres, e.g. a lowered knee.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostureProfile {
    #[serde(default)]
    pub offsets: BTreeMap<JointId, [f64; 3]>,
}

// Child-scale upright body, relative to the floor point; the player faces
// the sensor (towards -z). Hand positions are for arms down.
fn body_offset(j: JointId, hands_up: bool) -> [f64; 3] {
    use JointId::*;
    let side = |l: bool| if l { -1.0 } else { 1.0 };
    match j {
        SpineBase => [0.0, 0.90, 0.0],
        SpineMid => [0.0, 1.12, 0.0],
        SpineShoulder => [0.0, 1.40, 0.0],
        Neck => [0.0, 1.46, 0.0],
        Head => [0.0, 1.58, 0.0],
        ShoulderL | ShoulderR => [side(j == ShoulderL) * 0.17, 1.40, 0.0],
        HipL | HipR => [side(j == HipL) * 0.08, 0.90, 0.0],
        KneeL | KneeR => [side(j == KneeL) * 0.08, 0.45, 0.0],
        AnkleL | AnkleR => [side(j == AnkleL) * 0.08, 0.08, 0.0],
        FootL | FootR => [side(j == FootL) * 0.08, 0.02, -0.10],
        _ => {
            let left = matches!(j, ElbowL | WristL | HandL | HandTipL | ThumbL);
            let (down, up) = match j {
                ElbowL | ElbowR => (1.15, 1.62),
                WristL | WristR => (0.92, 1.80),
                HandL | HandR => (0.85, 1.87),
                HandTipL | HandTipR => (0.78, 1.94),
                _ => (0.86, 1.86),
            };
            [side(left) * 0.20, if hands_up { up } else { down }, 0.0]
        }
    }
}

/// Upright synthetic skeleton standing on `floor`.
pub fn synthetic_skeleton(t_ms: u64, floor: Point, posture: &PostureProfile, hands_up: bool) -> Frame {
    SkeletonFrame::from_fn(t_ms, |j| {
        let [x, y, z] = body_offset(j, hands_up);
        let [dx, dy, dz] = posture.offsets.get(&j).copied().unwrap_or([0.0; 3]);
        Vec3::new(floor.x + x + dx, y + dy, floor.z + z + dz)
    })
    .expect("synthetic skeleton is finite")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    pub time_s: f64,
    pub cell: Cell,
    #[serde(default)]
    pub transit_time_s: f64,
    #[serde(default)]
    pub noise_std_m: f64,
}

/// A player that walks to each new target after a reaction delay, missing
/// on purpose with probability `miss_prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Autopilot {
    pub reaction_s: f64,
    pub transit_s: f64,
    #[serde(default)]
    pub miss_prob: f64,
    #[serde(default)]
    pub noise_std_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovementScript {
    /// The first step is the starting position.
    pub steps: Vec<ScriptStep>,
    #[serde(default)]
    pub posture: PostureProfile,
    /// Source ends after this time; unbounded if absent.
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Intervals `[start_s, end_s)` with both hands raised.
    #[serde(default)]
    pub hand_raises: Vec<[f64; 2]>,
    /// When set, steps after the first are ignored.
    #[serde(default)]
    pub autopilot: Option<Autopilot>,
}

impl MovementScript {
    pub fn standing(cell: Cell) -> Self {
        Self {
            steps: vec![ScriptStep { time_s: 0.0, cell, transit_time_s: 0.0, noise_std_m: 0.0 }],
            posture: PostureProfile::default(),
            duration_s: None,
            hand_raises: Vec::new(),
            autopilot: None,
        }
    }

    pub fn validate(&self, layout: GridLayout) -> Result<(), SourceError> {
        let bad = |m: &str| Err(SourceError::Invalid(m.to_string()));
        if self.steps.is_empty() {
            return bad("script needs at least one step");
        }
        for w in self.steps.windows(2) {
            if !(w[1].time_s > w[0].time_s) {
                return bad("step times must be strictly increasing");
            }
        }
        for s in &self.steps {
            if !layout.contains(s.cell) {
                return Err(SourceError::InvalidCell(s.cell));
            }
            if !(s.noise_std_m >= 0.0 && s.transit_time_s >= 0.0 && s.time_s.is_finite()) {
                return bad("noise and transit time must be non-negative");
            }
        }
        if let Some(a) = &self.autopilot {
            if !(a.reaction_s >= 0.0 && a.transit_s >= 0.0 && a.noise_std_m >= 0.0 && (0.0..=1.0).contains(&a.miss_prob)) {
                return bad("invalid autopilot parameters");
            }
        }
        if self.duration_s.is_some_and(|d| !(d >= 0.0)) {
            return bad("duration must be non-negative");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SourceError> {
        serde_json::from_str(text).map_err(|e| SourceError::Invalid(e.to_string()))
    }
}

fn ms(s: f64) -> u64 {
    (s * 1000.0).round().max(0.0) as u64
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start_ms: u64,
    from: Point,
    to: Point,
    transit_ms: u64,
    noise_std_m: f64,
}

impl Segment {
    fn position(&self, t_ms: u64) -> Point {
        if self.transit_ms == 0 || t_ms >= self.start_ms + self.transit_ms {
            return self.to;
        }
        let a = t_ms.saturating_sub(self.start_ms) as f64 / self.transit_ms as f64;
        self.from + (self.to - self.from) * a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Goal {
    Cell(Cell),
    Lane(u8),
}

/// Synthetic player following a [`MovementScript`]. Deterministic given the
/// script, the grid and the seed.
pub struct ScriptedSource {
    script: MovementScript,
    grid: Grid,
    segments: Vec<Segment>,
    noise_rng: ChaCha8Rng,
    choice_rng: ChaCha8Rng,
    k: u64,
    last_goal: Option<Goal>,
    emitted: u64,
}

impl ScriptedSource {
    pub fn new(script: MovementScript, grid: Grid, seed: u64) -> Result<Self, SourceError> {
        script.validate(grid.layout())?;
        let mut src = Self {
            segments: Vec::new(),
            noise_rng: ChaCha8Rng::seed_from_u64(seed),
            choice_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C401CE),
            k: 0,
            last_goal: None,
            emitted: 0,
            grid,
            script,
        };
        let steps = if src.script.autopilot.is_some() { &src.script.steps[..1] } else { &src.script.steps[..] };
        let steps = steps.to_vec();
        for (i, s) in steps.iter().enumerate() {
            let to = src.grid.cell_center(s.cell);
            let (start_ms, transit_ms) = if i == 0 { (0, 0) } else { (ms(s.time_s), ms(s.transit_time_s)) };
            src.push_segment(start_ms, to, transit_ms, s.noise_std_m);
        }
        Ok(src)
    }

    fn push_segment(&mut self, start_ms: u64, to: Point, transit_ms: u64, noise_std_m: f64) {
        let from = self.position(start_ms);
        self.segments.push(Segment { start_ms, from, to, transit_ms, noise_std_m });
    }

    fn active(&self, t_ms: u64) -> Option<&Segment> {
        self.segments.iter().rev().find(|s| s.start_ms <= t_ms).or(self.segments.first())
    }

    /// Noise-free floor point at `t_ms`.
    pub fn position(&self, t_ms: u64) -> Point {
        self.active(t_ms).map_or_else(Vec3::zero, |s| s.position(t_ms))
    }

    fn hands_up(&self, t_ms: u64) -> bool {
        self.script.hand_raises.iter().any(|[a, b]| ms(*a) <= t_ms && t_ms < ms(*b))
    }
}

impl FrameSource for ScriptedSource {
    fn next_frame(&mut self) -> Result<Frame, SourceError> {
        let t = tick_to_ms(self.k);
        if self.script.duration_s.is_some_and(|d| t > ms(d)) {
            return Err(SourceError::EndOfStream);
        }
        self.k += 1;
        let sigma = self.active(t).map_or(0.0, |s| s.noise_std_m);
        let nx: f64 = self.noise_rng.sample(StandardNormal);
        let nz: f64 = self.noise_rng.sample(StandardNormal);
        let floor = self.position(t) + Vec3::new(nx * sigma, 0.0, nz * sigma);
        self.emitted += 1;
        Ok(synthetic_skeleton(t, floor, &self.script.posture, self.hands_up(t)))
    }

    fn stats(&self) -> SourceStats {
        SourceStats { frames: self.emitted, ..Default::default() }
    }

    fn observe(&mut self, now_ms: u64, snapshot: &GameSnapshot) {
        let Some(pilot) = self.script.autopilot.clone() else { return };
        let goal = match (snapshot.target, snapshot.waves.first()) {
            (Some(c), _) => Goal::Cell(c),
            (None, Some(w)) => Goal::Lane(w.safe_lane),
            (None, None) => return,
        };
        if self.last_goal == Some(goal) {
            return;
        }
        self.last_goal = Some(goal);
        let cell = match goal {
            Goal::Cell(c) => c,
            Goal::Lane(l) => Cell::lane(l),
        };
        let miss = self.choice_rng.random::<f64>() < pilot.miss_prob;
        let dest = if miss {
            let others: Vec<Cell> = self.grid.layout().cells().into_iter().filter(|&c| c != cell).collect();
            others[self.choice_rng.random_range(0..others.len())]
        } else {
            cell
        };
        let to = self.grid.cell_center(dest);
        self.push_segment(now_ms + ms(pilot.reaction_s), to, ms(pilot.transit_s), pilot.noise_std_m);
    }

    fn set_grid(&mut self, grid: &Grid) {
        self.grid = grid.clone();
    }

    fn kind(&self) -> &'static str {
        "scripted"
    }
}

/// Plays back the frames of a recorded session.
pub struct ReplayFileSource {
    frames: VecDeque<Frame>,
    speed_factor: f64,
    stats: SourceStats,
}

impl ReplayFileSource {
    pub fn from_log(log: &SessionLog, speed_factor: f64) -> Result<Self, SourceError> {
        if !(speed_factor > 0.0 && speed_factor.is_finite()) {
            return Err(SourceError::Invalid("speed_factor must be > 0".into()));
        }
        let frames = log.records.iter().filter_map(LogRecord::as_frame).cloned().collect();
        Ok(Self { frames, speed_factor, stats: SourceStats::default() })
    }

    /// Opens a log in tolerant mode; skipped lines count as malformed frames.
    pub fn open(path: &Path, speed_factor: f64) -> Result<Self, SourceError> {
        let (log, report) = read_session(path).map_err(|e| match e {
            RecorderError::StorageFailure(io) => SourceError::Io(io.to_string()),
            other => SourceError::MalformedFrame(other.to_string()),
        })?;
        let mut src = Self::from_log(&log, speed_factor)?;
        src.stats.malformed = report.skipped.len() as u64;
        Ok(src)
    }

    pub fn remaining(&self) -> usize {
        self.frames.len()
    }
}

impl FrameSource for ReplayFileSource {
    fn next_frame(&mut self) -> Result<Frame, SourceError> {
        let f = self.frames.pop_front().ok_or(SourceError::EndOfStream)?;
        self.stats.frames += 1;
        if self.speed_factor == 1.0 {
            return Ok(f);
        }
        let t = (f.t_ms() as f64 / self.speed_factor).round() as u64;
        Ok(f.with_t_ms(t))
    }

    fn stats(&self) -> SourceStats {
        self.stats
    }

    fn kind(&self) -> &'static str {
        "replay"
    }
}

pub const NETWORK_QUEUE_CAPACITY: usize = 90;

struct NetShared {
    queue: Mutex<VecDeque<Frame>>,
    frames: AtomicU64,
    malformed: AtomicU64,
    dropped: AtomicU64,
    closed: AtomicBool,
}

/// Accepts TCP connections and reads newline-delimited frame records. The
/// queue is bounded; on overflow the oldest frame is dropped.
pub struct NetworkSource {
    shared: Arc<NetShared>,
    addr: SocketAddr,
}

impl NetworkSource {
    pub fn bind(addr: &str) -> Result<Self, SourceError> {
        let listener = TcpListener::bind(addr).map_err(|e| SourceError::Io(e.to_string()))?;
        let local = listener.local_addr().map_err(|e| SourceError::Io(e.to_string()))?;
        listener.set_nonblocking(true).map_err(|e| SourceError::Io(e.to_string()))?;
        let shared = Arc::new(NetShared {
            queue: Mutex::new(VecDeque::with_capacity(NETWORK_QUEUE_CAPACITY)),
            frames: AtomicU64::new(0),
            malformed: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        });
        let acc = Arc::clone(&shared);
        thread::spawn(move || {
            while !acc.closed.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let conn = Arc::clone(&acc);
                        let _ = stream.set_nonblocking(false);
                        thread::spawn(move || read_frames(stream, &conn));
                    }
                    Err(_) => thread::sleep(Duration::from_millis(10)),
                }
            }
        });
        Ok(Self { shared, addr: local })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

fn read_frames(stream: std::net::TcpStream, shared: &NetShared) {
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if shared.closed.load(Ordering::Relaxed) {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        match parse_frame_line(&line) {
            Ok(frame) => {
                let mut q = shared.queue.lock().expect("queue lock");
                if q.len() >= NETWORK_QUEUE_CAPACITY {
                    q.pop_front();
                    shared.dropped.fetch_add(1, Ordering::Relaxed);
                }
                q.push_back(frame);
            }
            Err(_) => {
                shared.malformed.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

impl Drop for NetworkSource {
    fn drop(&mut self) {
        self.shared.closed.store(true, Ordering::Relaxed);
    }
}

impl FrameSource for NetworkSource {
    fn next_frame(&mut self) -> Result<Frame, SourceError> {
        let f = self.shared.queue.lock().expect("queue lock").pop_front().ok_or(SourceError::WouldBlock)?;
        self.shared.frames.fetch_add(1, Ordering::Relaxed);
        Ok(f)
    }

    fn stats(&self) -> SourceStats {
        SourceStats {
            frames: self.shared.frames.load(Ordering::Relaxed),
            malformed: self.shared.malformed.load(Ordering::Relaxed),
            dropped: self.shared.dropped.load(Ordering::Relaxed),
        }
    }

    fn kind(&self) -> &'static str {
        "network"
    }
}

/// Synthetic player standing on whichever cell the UI last selected.
pub struct VirtualSource {
    grid: Grid,
    cell: Cell,
    k: u64,
    posture: PostureProfile,
}

impl VirtualSource {
    /// Starts on the centre cell (or middle lane).
    pub fn new(grid: Grid) -> Self {
        let cell = match grid.layout() {
            GridLayout::Grid3x3 => Cell::new(1, 1),
            GridLayout::Line3 => Cell::lane(1),
        };
        Self { grid, cell, k: 0, posture: PostureProfile::default() }
    }

    pub fn cell(&self) -> Cell {
        self.cell
    }
}

impl FrameSource for VirtualSource {
    fn next_frame(&mut self) -> Result<Frame, SourceError> {
        let t = tick_to_ms(self.k);
        self.k += 1;
        Ok(synthetic_skeleton(t, self.grid.cell_center(self.cell), &self.posture, false))
    }

    fn stats(&self) -> SourceStats {
        SourceStats { frames: self.k, ..Default::default() }
    }

    /// Returns to the starting cell if the layout changed under the player.
    fn set_grid(&mut self, grid: &Grid) {
        if !grid.layout().contains(self.cell) {
            self.cell = VirtualSource::new(grid.clone()).cell;
        }
        self.grid = grid.clone();
    }

    fn virtual_move(&mut self, cell: Cell) -> Result<(), SourceError> {
        if !self.grid.layout().contains(cell) {
            return Err(SourceError::InvalidCell(cell));
        }
        self.cell = cell;
        Ok(())
    }

    fn kind(&self) -> &'static str {
        "virtual"
    }
}

/// Textual source selector: `scripted:PATH`, `replay:PATH[@SPEED]`,
/// `network:ADDR` or `virtual`.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceDescriptor {
    Scripted { script: PathBuf },
    ReplayFile { path: PathBuf, speed_factor: f64 },
    Network { listen: String },
    Virtual,
}

impl FromStr for SourceDescriptor {
    type Err = SourceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || SourceError::Invalid(format!("unrecognised source descriptor `{s}`"));
        if s == "virtual" {
            return Ok(Self::Virtual);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(invalid)?;
        if rest.is_empty() {
            return Err(invalid());
        }
        match kind {
            "scripted" => Ok(Self::Scripted { script: rest.into() }),
            "network" => Ok(Self::Network { listen: rest.to_string() }),
            "replay" => {
                let (path, speed_factor) = match rest.rsplit_once('@') {
                    Some((p, sp)) => (p, sp.parse::<f64>().map_err(|_| invalid())?),
                    None => (rest, 1.0),
                };
                if !(speed_factor > 0.0 && speed_factor.is_finite()) {
                    return Err(SourceError::Invalid("speed_factor must be > 0".into()));
                }
                Ok(Self::ReplayFile { path: path.into(), speed_factor })
            }
            _ => Err(invalid()),
        }
    }
}

impl SourceDescriptor {
    pub fn open(&self, grid: &Grid, seed: u64) -> Result<Box<dyn FrameSource>, SourceError> {
        Ok(match self {
            Self::Scripted { script } => {
                let text = std::fs::read_to_string(script).map_err(|e| SourceError::Io(e.to_string()))?;
                Box::new(ScriptedSource::new(MovementScript::from_json(&text)?, grid.clone(), seed)?)
            }
            Self::ReplayFile { path, speed_factor } => Box::new(ReplayFileSource::open(path, *speed_factor)?),
            Self::Network { listen } => Box::new(NetworkSource::bind(listen)?),
            Self::Virtual => Box::new(VirtualSource::new(grid.clone())),
        })
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Self::Virtual)
    }
}
