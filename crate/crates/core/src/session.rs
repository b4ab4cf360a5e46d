//! Drives one recorded game: per tick it logs the input frame, applies
//! queued commands, advances the engine and logs the resulting events.
//!
//! Replaying a log re-runs the same loop from the recorded frames and
//! command markers; the events it produces must match the logged ones.

use std::io::Write;

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;

use crate::engine::{tick_to_ms, EngineError, Game, GameEvent, GameSnapshot, PauseReason, Phase, TickInput};
use crate::input::{FrameSource, MovementScript, ScriptedSource, SourceError};
use crate::recorder::{EngineCommand, LogRecord, Marker, RecorderError, SessionFooter, SessionHeader, SessionLog, SessionWriter};
use crate::{Frame, GameConfig, Grid};

/// Upper bound on a headless run (six hours of ticks).
pub const MAX_SIMULATED_TICKS: u64 = 6 * 3600 * 30;

#[derive(Debug, Default)]
pub struct StepOutput {
    pub t_ms: u64,
    pub events: Vec<GameEvent>,
    /// Markers written this tick (accepted commands and automatic ones).
    pub markers: Vec<Marker>,
    /// One entry per submitted marker.
    pub command_results: Vec<Result<(), EngineError>>,
    pub storage_error: Option<String>,
}

pub struct SessionDriver<W: Write> {
    game: Game,
    writer: Option<SessionWriter<W>>,
    k: u64,
    storage_error: Option<String>,
}

impl<W: Write> SessionDriver<W> {
    /// Creates the game and starts it at session time 0.
    pub fn start(config: GameConfig, grid: Grid, writer: Option<SessionWriter<W>>) -> Result<Self, EngineError> {
        let mut game = Game::new(config, grid)?;
        game.start()?;
        Ok(Self { game, writer, k: 0, storage_error: None })
    }

    pub fn game(&self) -> &Game {
        &self.game
    }

    pub fn snapshot(&self) -> GameSnapshot {
        self.game.snapshot()
    }

    /// Session time of the next tick.
    pub fn now_ms(&self) -> u64 {
        tick_to_ms(self.k)
    }

    pub fn is_finished(&self) -> bool {
        self.game.is_finished()
    }

    pub fn is_recording(&self) -> bool {
        self.writer.as_ref().is_some_and(SessionWriter::is_recording)
    }

    pub fn storage_error(&self) -> Option<&str> {
        self.storage_error.as_deref()
    }

    fn log(&mut self, record: LogRecord, out: &mut StepOutput) {
        let Some(w) = self.writer.as_mut() else { return };
        match w.append(record) {
            Ok(()) => {}
            Err(RecorderError::StorageFailure(e)) => {
                let msg = format!("recording disabled: {e}");
                self.storage_error = Some(msg.clone());
                out.storage_error = Some(msg);
            }
            Err(e) => panic!("driver produced an unordered record: {e}"),
        }
    }

    fn apply(&mut self, cmd: &EngineCommand, now: u64) -> Result<Option<GameEvent>, EngineError> {
        match cmd {
            EngineCommand::Pause => self.game.pause().map(|_| None),
            EngineCommand::Resume => self.game.resume().map(|_| None),
            EngineCommand::Abort => self.game.abort(now).map(Some),
            EngineCommand::Recalibrate { grid } => self.game.replace_grid(grid.clone()).map(|_| None),
            EngineCommand::SetView { view } => self.game.set_view(*view).map(|_| None),
        }
    }

    /// Runs one 30 Hz tick. Rejected commands are reported and not logged.
    pub fn step(&mut self, frame: Option<Frame>, markers: Vec<Marker>) -> StepOutput {
        let now = self.now_ms();
        let mut out = StepOutput { t_ms: now, ..Default::default() };
        let frame = frame.map(|f| f.with_t_ms(now).quantized());
        if let Some(f) = &frame {
            self.log(LogRecord::Frame(f.clone()), &mut out);
        }
        for marker in markers {
            let res = match marker.command().cloned() {
                Some(_) if self.game.is_finished() => Err(EngineError::InvalidPhase(self.game.phase())),
                Some(cmd) => self.apply(&cmd, now),
                None => Ok(None),
            };
            match res {
                Ok(ev) => {
                    self.log(LogRecord::Marker { t_ms: now, marker: marker.clone() }, &mut out);
                    out.markers.push(marker);
                    if let Some(ev) = ev {
                        self.log(LogRecord::Event(ev.clone()), &mut out);
                        out.events.push(ev);
                    }
                    out.command_results.push(Ok(()));
                }
                Err(e) => out.command_results.push(Err(e)),
            }
        }

        let before = self.game.phase();
        if matches!(before, Phase::Running | Phase::Paused(PauseReason::SensorGap)) {
            let input = frame.as_ref().map_or(TickInput::Nothing, TickInput::Frame);
            match self.game.tick(now, input) {
                Ok(events) => {
                    if before == Phase::Paused(PauseReason::SensorGap) && self.game.phase() != before {
                        self.push_marker(now, Marker::AutoResume, &mut out);
                    }
                    for ev in events {
                        self.log(LogRecord::Event(ev.clone()), &mut out);
                        out.events.push(ev);
                    }
                }
                Err(EngineError::SensorGap) => {
                    self.push_marker(now, Marker::AutoPause { reason: PauseReason::SensorGap }, &mut out);
                }
                Err(e) => unreachable!("tick in phase {before:?} failed: {e}"),
            }
        }
        self.k += 1;
        out
    }

    fn push_marker(&mut self, now: u64, marker: Marker, out: &mut StepOutput) {
        self.log(LogRecord::Marker { t_ms: now, marker: marker.clone() }, out);
        out.markers.push(marker);
    }

    /// Writes the footer. `ended_at` defaults to the header start plus the
    /// session duration.
    pub fn finish(self, ended_at: Option<DateTime<Utc>>) -> Result<Option<(SessionFooter, Option<W>)>, RecorderError> {
        let elapsed = tick_to_ms(self.k.saturating_sub(1));
        match self.writer {
            Some(w) => {
                let end = ended_at.unwrap_or_else(|| w.header().started_at + Duration::milliseconds(elapsed as i64));
                w.finish(end).map(Some)
            }
            None => Ok(None),
        }
    }
}

/// Re-runs a logged session through a fresh engine and returns the events
/// it produces.
pub fn replay_events(log: &SessionLog) -> Result<Vec<GameEvent>, EngineError> {
    let mut driver: SessionDriver<std::io::Sink> = SessionDriver::start(log.header.config.clone(), log.header.grid.clone(), None)?;
    let Some(last_t) = log.records.last().map(LogRecord::t_ms) else { return Ok(Vec::new()) };
    let mut records = log.records.iter().peekable();
    let mut events = Vec::new();
    while driver.now_ms() <= last_t {
        let now = driver.now_ms();
        let mut frame = None;
        let mut commands = Vec::new();
        while let Some(r) = records.next_if(|r| r.t_ms() <= now) {
            match r {
                LogRecord::Frame(f) if f.t_ms() == now => frame = Some(f.clone()),
                LogRecord::Marker { marker: m @ Marker::Command(_), .. } => commands.push(m.clone()),
                _ => {}
            }
        }
        events.extend(driver.step(frame, commands).events);
    }
    Ok(events)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayCheck {
    pub logged_events: usize,
    pub replayed_events: usize,
    /// Index of the first differing event, if any.
    pub first_mismatch: Option<usize>,
}

impl ReplayCheck {
    pub fn matches(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Compares the serialized event lines of a log with a replay.
pub fn verify_replay(log: &SessionLog) -> Result<ReplayCheck, EngineError> {
    let logged: Vec<String> = log.events().map(|e| LogRecord::Event(e.clone()).to_line()).collect();
    let replayed: Vec<String> = replay_events(log)?.into_iter().map(|e| LogRecord::Event(e).to_line()).collect();
    let first_mismatch = (0..logged.len().max(replayed.len())).find(|&i| logged.get(i) != replayed.get(i));
    Ok(ReplayCheck { logged_events: logged.len(), replayed_events: replayed.len(), first_mismatch })
}

#[derive(Debug, thiserror::Error)]
pub enum SimulateError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
}

pub struct Simulation<W: Write> {
    pub footer: SessionFooter,
    pub out: Option<W>,
    pub ticks: u64,
}

/// Headless game driven by a scripted player. The run ends when the game
/// ends or the script runs out.
pub fn simulate<W: Write>(
    config: GameConfig,
    grid: Grid,
    script: MovementScript,
    nickname: &str,
    started_at: DateTime<Utc>,
    out: W,
) -> Result<Simulation<W>, SimulateError> {
    let mut source = ScriptedSource::new(script, grid.clone(), config.seed)?;
    let header = SessionHeader::new(nickname, started_at, config.clone(), grid.clone());
    let writer = SessionWriter::new(out, header)?;
    let mut driver = SessionDriver::start(config, grid, Some(writer))?;
    let mut ticks = 0;
    while !driver.is_finished() && ticks < MAX_SIMULATED_TICKS {
        source.observe(driver.now_ms(), &driver.snapshot());
        let frame = match source.next_frame() {
            Ok(f) => Some(f),
            Err(SourceError::EndOfStream) => break,
            Err(SourceError::WouldBlock) => None,
            Err(e) => return Err(e.into()),
        };
        driver.step(frame, Vec::new());
        ticks += 1;
    }
    let (footer, out) = driver.finish(None)?.expect("writer present");
    Ok(Simulation { footer, out, ticks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::compute_stats;
    use crate::calibration::GridFrame;
    use crate::engine::{EndReason, EventKind};
    use crate::input::{Autopilot, PostureProfile, VirtualSource};
    use crate::recorder::{parse_session, ReadMode};
    use crate::skeleton::Vec3;
    use crate::{Cell, GridLayout, Mechanic, ViewMode};

    fn grid(layout: GridLayout) -> Grid {
        GridFrame::regular(layout, Vec3::new(-0.5, 0.0, 2.0), 0.5).unwrap()
    }

    fn autopilot(miss_prob: f64) -> MovementScript {
        MovementScript {
            autopilot: Some(Autopilot { reaction_s: 0.8, transit_s: 1.2, miss_prob, noise_std_m: 0.01 }),
            ..MovementScript::standing(Cell::new(1, 1))
        }
    }

    fn t0() -> DateTime<Utc> {
        DateTime::from_timestamp(1_790_000_000, 0).unwrap()
    }

    fn run(config: GameConfig, script: MovementScript) -> String {
        let layout = config.layout;
        let sim = simulate(config, grid(layout), script, "f6", t0(), Vec::new()).unwrap();
        String::from_utf8(sim.out.unwrap()).unwrap()
    }

    #[test]
    fn all_hit_session_scores_length() {
        let cfg = GameConfig { length: 4, seed: 11, ..GameConfig::default_for(Mechanic::GridDance) };
        let text = run(cfg, autopilot(0.0));
        let (log, _) = parse_session(&text, ReadMode::Strict).unwrap();
        let footer = log.footer.clone().unwrap();
        assert_eq!(footer.summary.final_score, 4);
        assert_eq!(footer.end_reason, Some(EndReason::Completed));
        assert_eq!(footer.summary, compute_stats(&log));
        assert_eq!(footer.summary.latency_samples, 4);
    }

    #[test]
    fn simulation_is_byte_identical_and_replays() {
        for mechanic in Mechanic::ALL {
            let cfg = GameConfig { length: 6, seed: 3, shift_time_s: 4.0, approach_time_s: 4.0, ..GameConfig::default_for(mechanic) };
            let script = MovementScript {
                autopilot: Some(Autopilot { reaction_s: 0.5, transit_s: 1.0, miss_prob: 0.4, noise_std_m: 0.03 }),
                ..MovementScript::standing(match mechanic {
                    Mechanic::GridDance => Cell::new(0, 1),
                    Mechanic::Runner => Cell::lane(1),
                })
            };
            let a = run(cfg.clone(), script.clone());
            let b = run(cfg, script);
            assert_eq!(a, b);
            let (log, _) = parse_session(&a, ReadMode::Strict).unwrap();
            let check = verify_replay(&log).unwrap();
            assert!(check.matches(), "{mechanic:?}: {check:?}");
            assert!(check.logged_events > 6);
        }
    }

    #[test]
    fn commands_are_logged_and_replayed() {
        let g = grid(GridLayout::Grid3x3);
        let cfg = GameConfig { length: 3, shift_time_s: 3.0, ..GameConfig::default_for(Mechanic::GridDance) };
        let header = SessionHeader::new("f6", t0(), cfg.clone(), g.clone());
        let writer = SessionWriter::new(Vec::new(), header).unwrap();
        let mut driver = SessionDriver::start(cfg, g.clone(), Some(writer)).unwrap();
        let mut src = VirtualSource::new(g.clone());
        let shifted = GridFrame::regular(GridLayout::Grid3x3, Vec3::new(-0.45, 0.0, 2.0), 0.5).unwrap();
        for k in 0..2000u64 {
            if driver.is_finished() {
                break;
            }
            let mut cmds = Vec::new();
            match k {
                20 => cmds.push(Marker::Command(EngineCommand::Pause)),
                21 => cmds.push(Marker::Command(EngineCommand::Pause)),
                50 => cmds.push(Marker::Command(EngineCommand::Resume)),
                60 => cmds.push(Marker::Command(EngineCommand::Recalibrate { grid: shifted.clone() })),
                65 => cmds.push(Marker::Command(EngineCommand::SetView { view: ViewMode::Mirrored })),
                70 => {
                    src.virtual_move(Cell::new(0, 0)).unwrap();
                    cmds.push(Marker::VirtualMove { cell: Cell::new(0, 0) });
                }
                _ => {}
            }
            // the sensor drops out for two seconds
            let frame = if (100..160).contains(&k) { None } else { Some(src.next_frame().unwrap()) };
            let out = driver.step(frame, cmds);
            if k == 21 {
                assert!(out.command_results[0].is_err());
                assert!(out.markers.is_empty());
            }
        }
        let (footer, out) = driver.finish(None).unwrap().unwrap();
        assert_eq!(footer.end_reason, Some(EndReason::Completed));
        let text = String::from_utf8(out.unwrap()).unwrap();
        let (log, _) = parse_session(&text, ReadMode::Strict).unwrap();
        let markers: Vec<&Marker> = log.records.iter().filter_map(|r| match r { LogRecord::Marker { marker, .. } => Some(marker), _ => None }).collect();
        assert_eq!(markers.iter().filter(|m| matches!(m, Marker::Command(EngineCommand::Pause))).count(), 1);
        assert!(markers.iter().any(|m| matches!(m, Marker::AutoPause { .. })));
        assert!(markers.iter().any(|m| matches!(m, Marker::AutoResume)));
        let shown: Vec<(u64, Cell, Cell)> = log
            .events()
            .filter_map(|e| match e.kind {
                EventKind::TargetShown { cell, screen_cell } => Some((e.t_ms, cell, screen_cell)),
                _ => None,
            })
            .collect();
        let switch = tick_to_ms(65);
        assert!(shown.iter().any(|s| s.0 > switch));
        for (t, cell, screen) in shown {
            let view = if t > switch { ViewMode::Mirrored } else { ViewMode::ThirdPerson };
            assert_eq!(screen, crate::engine::screen_cell(cell, view));
        }
        assert!(verify_replay(&log).unwrap().matches());
        assert_eq!(log.footer.as_ref().unwrap().summary, compute_stats(&log));
    }

    #[test]
    fn abort_ends_the_session() {
        let g = grid(GridLayout::Line3);
        let cfg = GameConfig::default_for(Mechanic::Runner);
        let mut driver: SessionDriver<Vec<u8>> = SessionDriver::start(cfg, g.clone(), None).unwrap();
        let f = crate::input::synthetic_skeleton(0, g.cell_center(Cell::lane(1)), &PostureProfile::default(), false);
        driver.step(Some(f.clone()), vec![]);
        let out = driver.step(Some(f.clone()), vec![Marker::Command(EngineCommand::Abort)]);
        assert_eq!(out.events.last().unwrap().kind, EventKind::GameEnded { reason: EndReason::TherapistAbort });
        assert!(driver.is_finished());
        let out = driver.step(Some(f), vec![Marker::Command(EngineCommand::Abort)]);
        assert!(out.command_results[0].is_err());
    }

    #[test]
    fn tampered_log_fails_verification() {
        let cfg = GameConfig { length: 3, seed: 5, ..GameConfig::default_for(Mechanic::GridDance) };
        let text = run(cfg, autopilot(0.0));
        let (mut log, _) = parse_session(&text, ReadMode::Strict).unwrap();
        log.header.seed = 6;
        log.header.config.seed = 6;
        assert!(!verify_replay(&log).unwrap().matches());
    }
}
