//! Tick-driven game state machines for the runner and grid mechanics.
//!
//! The engine runs at a fixed 30 Hz. Timing is counted in game ticks, which
//! advance only while the game is running; the session clock (`now_ms`) is
//! used only to stamp events and to detect sensor gaps.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{player_floor_point, Cell, GridLayout, Location};
use crate::config::{AdaptivePolicy, ConfigError, GameConfig, Mechanic, ViewMode};
use crate::levelgen::{next_grid_target, next_wave, LevelGenError, Prng, Wave};
use crate::{Frame, Grid};

pub const TICK_HZ: u64 = 30;
/// Pause between a grid resolution and the next target.
pub const INTER_ROUND_PAUSE_S: f64 = 2.0;
/// Frameless time after which the game pauses itself.
pub const SENSOR_GAP_MS: u64 = 1000;

/// Session time of the `k`-th tick.
pub fn tick_to_ms(tick: u64) -> u64 {
    tick * 1000 / TICK_HZ
}

pub fn seconds_to_ticks(s: f64) -> u64 {
    ((s * TICK_HZ as f64).round() as u64).max(1)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("grid layout {grid:?} does not match configured layout {config:?}")]
    LayoutMismatch { config: GridLayout, grid: GridLayout },
    #[error("operation not valid in phase {0:?}")]
    InvalidPhase(Phase),
    #[error("no skeleton frame for more than {SENSOR_GAP_MS} ms; game paused")]
    SensorGap,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    LevelGen(#[from] LevelGenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PauseReason {
    Therapist,
    SensorGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Completed,
    LivesExhausted,
    AdaptiveStop,
    TherapistAbort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", content = "reason", rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Running,
    Paused(PauseReason),
    Finished(EndReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    TargetShown { cell: Cell, screen_cell: Cell },
    WaveSpawned { safe_lane: u8, screen_lane: u8, blocked: [u8; 2] },
    /// `player_cell` is `None` when the player stood outside the grid.
    Resolved { correct: bool, player_cell: Option<Cell> },
    ScoreChanged { new_score: u32 },
    DifficultyEased { new_time_s: f64 },
    LifeLost { lives_remaining: u32 },
    GameEnded { reason: EndReason },
    FeedbackCue { positive: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameEvent {
    pub t_ms: u64,
    pub kind: EventKind,
}

/// Presentation mapping of a physical cell. Mirroring flips columns only.
pub fn screen_cell(cell: Cell, view: ViewMode) -> Cell {
    match view {
        ViewMode::ThirdPerson => cell,
        ViewMode::Mirrored => Cell::new(cell.row, 2 - cell.col.min(2)),
    }
}

/// Consecutive-miss bookkeeping behind the adaptive difficulty controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveState {
    pub consecutive_misses: u32,
    pub initial_time_s: f64,
    pub effective_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdaptiveOutcome {
    pub eased_to_s: Option<f64>,
    pub stop: bool,
}

impl AdaptiveState {
    pub fn new(initial_time_s: f64) -> Self {
        Self { consecutive_misses: 0, initial_time_s, effective_time_s: initial_time_s }
    }

    /// Called after every resolution.
    pub fn update(&mut self, policy: &AdaptivePolicy, correct: bool) -> AdaptiveOutcome {
        if correct {
            self.consecutive_misses = 0;
            return AdaptiveOutcome::default();
        }
        self.consecutive_misses += 1;
        let mut out = AdaptiveOutcome::default();
        if self.consecutive_misses == policy.ease_after_misses {
            let cap = self.initial_time_s * policy.ease_cap_factor;
            let eased = (self.effective_time_s * policy.ease_factor).min(cap);
            if eased > self.effective_time_s {
                self.effective_time_s = eased;
                out.eased_to_s = Some(eased);
            }
        }
        if self.consecutive_misses >= policy.stop_after_misses {
            out.stop = true;
        }
        out
    }
}

/// One tick's worth of player input.
#[derive(Debug, Clone, Copy)]
pub enum TickInput<'a> {
    Frame(&'a Frame),
    /// Player placed directly on a cell (demo mode without a skeleton).
    Virtual(Cell),
    /// No input arrived this tick.
    Nothing,
}

#[derive(Debug, Clone, PartialEq)]
enum RoundPhase {
    Interlude { next_start_tick: u64 },
    Countdown { target: Cell, shown_tick: u64, resolve_tick: u64 },
}

#[derive(Debug, Clone, PartialEq)]
struct ActiveWave {
    wave: Wave,
    resolve_tick: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum ModeState {
    Grid { previous_target: Option<Cell>, round: RoundPhase },
    Runner { active: VecDeque<ActiveWave>, spawned: u32, next_spawn_tick: u64, previous_safe_lane: Option<u8> },
}

/// Presentation snapshot for the live view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSnapshot {
    pub phase: Phase,
    pub tick: u64,
    pub score: u32,
    pub countdown_remaining_s: Option<f64>,
    pub target: Option<Cell>,
    pub screen_target: Option<Cell>,
    pub waves: Vec<WaveSnapshot>,
    pub lives_remaining: Option<u32>,
    pub effective_time_s: f64,
    pub view: ViewMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveSnapshot {
    pub safe_lane: u8,
    pub screen_lane: u8,
    pub remaining_s: f64,
}

/// A single game from start to end.
#[derive(Debug, Clone)]
pub struct Game {
    config: GameConfig,
    grid: Grid,
    pending_grid: Option<Grid>,
    phase: Phase,
    tick: u64,
    score: u32,
    lives_remaining: Option<u32>,
    adaptive: AdaptiveState,
    rng: Prng,
    player: Location,
    last_input_ms: Option<u64>,
    presented: u32,
    resolved: u32,
    mode: ModeState,
}

impl Game {
    /// Validates the configuration against the calibrated grid. The game
    /// starts `Idle`.
    pub fn new(config: GameConfig, grid: Grid) -> Result<Self, EngineError> {
        if grid.layout() != config.layout {
            return Err(EngineError::LayoutMismatch { config: config.layout, grid: grid.layout() });
        }
        config.validate()?;
        let mode = match config.mechanic {
            Mechanic::GridDance => ModeState::Grid {
                previous_target: None,
                round: RoundPhase::Interlude { next_start_tick: 0 },
            },
            Mechanic::Runner => ModeState::Runner {
                active: VecDeque::new(),
                spawned: 0,
                next_spawn_tick: 0,
                previous_safe_lane: None,
            },
        };
        Ok(Self {
            adaptive: AdaptiveState::new(config.timed_window_s()),
            rng: Prng::new(config.seed),
            lives_remaining: config.lives,
            config,
            grid,
            pending_grid: None,
            phase: Phase::Idle,
            tick: 0,
            score: 0,
            player: Location::Outside,
            last_input_ms: None,
            presented: 0,
            resolved: 0,
            mode,
        })
    }

    pub fn start(&mut self) -> Result<(), EngineError> {
        match self.phase {
            Phase::Idle => {
                self.phase = Phase::Running;
                Ok(())
            }
            p => Err(EngineError::InvalidPhase(p)),
        }
    }

    pub fn pause(&mut self) -> Result<(), EngineError> {
        match self.phase {
            Phase::Running => {
                self.phase = Phase::Paused(PauseReason::Therapist);
                Ok(())
            }
            p => Err(EngineError::InvalidPhase(p)),
        }
    }

    pub fn resume(&mut self) -> Result<(), EngineError> {
        match self.phase {
            Phase::Paused(_) => {
                self.phase = Phase::Running;
                // the gap clock restarts so a resume is not immediately re-paused
                self.last_input_ms = None;
                Ok(())
            }
            p => Err(EngineError::InvalidPhase(p)),
        }
    }

    pub fn abort(&mut self, now_ms: u64) -> Result<GameEvent, EngineError> {
        match self.phase {
            Phase::Running | Phase::Paused(_) => {
                self.phase = Phase::Finished(EndReason::TherapistAbort);
                Ok(GameEvent { t_ms: now_ms, kind: EventKind::GameEnded { reason: EndReason::TherapistAbort } })
            }
            p => Err(EngineError::InvalidPhase(p)),
        }
    }

    /// Queues a recalibrated grid; it takes effect at the next round boundary.
    pub fn replace_grid(&mut self, grid: Grid) -> Result<(), EngineError> {
        if grid.layout() != self.config.layout {
            return Err(EngineError::LayoutMismatch { config: self.config.layout, grid: grid.layout() });
        }
        self.pending_grid = Some(grid);
        Ok(())
    }

    /// Switches presentation. Screen cells of later events follow the new view.
    pub fn set_view(&mut self, view: ViewMode) -> Result<(), EngineError> {
        if self.is_finished() {
            return Err(EngineError::InvalidPhase(self.phase));
        }
        self.config.view = view;
        Ok(())
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn score(&self) -> u32 {
        self.score
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn lives_remaining(&self) -> Option<u32> {
        self.lives_remaining
    }

    pub fn consecutive_misses(&self) -> u32 {
        self.adaptive.consecutive_misses
    }

    pub fn effective_time_s(&self) -> f64 {
        self.adaptive.effective_time_s
    }

    pub fn presented(&self) -> u32 {
        self.presented
    }

    pub fn resolved(&self) -> u32 {
        self.resolved
    }

    pub fn player_location(&self) -> Location {
        self.player
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, Phase::Finished(_))
    }

    /// Advances one 30 Hz tick.
    ///
    /// A game paused by a sensor gap accepts ticks and resumes on the next
    /// input; the transition into that pause is reported as
    /// [`EngineError::SensorGap`].
    pub fn tick(&mut self, now_ms: u64, input: TickInput<'_>) -> Result<Vec<GameEvent>, EngineError> {
        let has_input = !matches!(input, TickInput::Nothing);
        match self.phase {
            Phase::Running => {}
            Phase::Paused(PauseReason::SensorGap) if has_input => self.phase = Phase::Running,
            Phase::Paused(PauseReason::SensorGap) => return Ok(Vec::new()),
            p => return Err(EngineError::InvalidPhase(p)),
        }

        match input {
            TickInput::Frame(frame) => {
                self.player = self.grid.locate_cell(player_floor_point(frame));
                self.last_input_ms = Some(now_ms);
            }
            TickInput::Virtual(cell) => {
                self.player = if self.grid.layout().contains(cell) { Location::Cell(cell) } else { Location::Outside };
                self.last_input_ms = Some(now_ms);
            }
            TickInput::Nothing => {
                let since = *self.last_input_ms.get_or_insert(now_ms);
                if now_ms.saturating_sub(since) > SENSOR_GAP_MS {
                    self.phase = Phase::Paused(PauseReason::SensorGap);
                    return Err(EngineError::SensorGap);
                }
            }
        }

        let mut events = Vec::new();
        match self.config.mechanic {
            Mechanic::GridDance => self.step_grid(now_ms, &mut events)?,
            Mechanic::Runner => self.step_runner(now_ms, &mut events),
        }
        self.tick += 1;
        Ok(events)
    }

    fn step_grid(&mut self, now_ms: u64, events: &mut Vec<GameEvent>) -> Result<(), EngineError> {
        let g = self.tick;
        let ModeState::Grid { previous_target, round } = &mut self.mode else { unreachable!() };
        if let RoundPhase::Interlude { next_start_tick } = *round {
            if g >= next_start_tick {
                if let Some(grid) = self.pending_grid.take() {
                    self.grid = grid;
                }
                let target = next_grid_target(&mut self.rng, &self.config.constraints, self.config.layout, *previous_target)?;
                *previous_target = Some(target);
                let countdown = seconds_to_ticks(self.adaptive.effective_time_s);
                *round = RoundPhase::Countdown { target, shown_tick: g, resolve_tick: g + countdown };
                self.presented += 1;
                events.push(GameEvent {
                    t_ms: now_ms,
                    kind: EventKind::TargetShown { cell: target, screen_cell: screen_cell(target, self.config.view) },
                });
            }
        }
        if let RoundPhase::Countdown { target, resolve_tick, .. } = *round {
            if g >= resolve_tick {
                *round = RoundPhase::Interlude { next_start_tick: g + seconds_to_ticks(INTER_ROUND_PAUSE_S) };
                let player = self.player;
                self.resolve(now_ms, player == Location::Cell(target), player.cell(), events);
            }
        }
        Ok(())
    }

    fn step_runner(&mut self, now_ms: u64, events: &mut Vec<GameEvent>) {
        let g = self.tick;
        loop {
            let ModeState::Runner { active, .. } = &mut self.mode else { unreachable!() };
            let due = match active.front() {
                Some(w) if w.resolve_tick <= g => active.pop_front().expect("front exists"),
                _ => break,
            };
            let lane = self.player.cell().map(|c| c.col);
            self.resolve(now_ms, lane == Some(due.wave.safe_lane), self.player.cell(), events);
            if self.is_finished() {
                return;
            }
        }
        let length = self.config.length;
        let interval = seconds_to_ticks(self.config.spawn_interval_s);
        let approach = seconds_to_ticks(self.adaptive.effective_time_s);
        let ModeState::Runner { active, spawned, next_spawn_tick, previous_safe_lane } = &mut self.mode else {
            unreachable!()
        };
        if active.is_empty() {
            if let Some(grid) = self.pending_grid.take() {
                self.grid = grid;
            }
        }
        if *spawned < length && g >= *next_spawn_tick {
            let wave = next_wave(&mut self.rng, &self.config.constraints, *previous_safe_lane, g);
            *previous_safe_lane = Some(wave.safe_lane);
            *spawned += 1;
            *next_spawn_tick = g + interval;
            active.push_back(ActiveWave { wave, resolve_tick: g + approach });
            self.presented += 1;
            events.push(GameEvent {
                t_ms: now_ms,
                kind: EventKind::WaveSpawned {
                    safe_lane: wave.safe_lane,
                    screen_lane: screen_cell(Cell::lane(wave.safe_lane), self.config.view).col,
                    blocked: wave.blocked,
                },
            });
        }
    }

    fn resolve(&mut self, now_ms: u64, correct: bool, player_cell: Option<Cell>, events: &mut Vec<GameEvent>) {
        let ev = |kind| GameEvent { t_ms: now_ms, kind };
        self.resolved += 1;
        events.push(ev(EventKind::Resolved { correct, player_cell }));
        if correct {
            self.score += 1;
            events.push(ev(EventKind::ScoreChanged { new_score: self.score }));
        }
        events.push(ev(EventKind::FeedbackCue { positive: correct }));
        if !correct {
            if let Some(lives) = self.lives_remaining.as_mut() {
                *lives = lives.saturating_sub(1);
                events.push(ev(EventKind::LifeLost { lives_remaining: *lives }));
            }
        }
        let outcome = self.adaptive.update(&self.config.adaptive, correct);
        if let Some(new_time_s) = outcome.eased_to_s {
            events.push(ev(EventKind::DifficultyEased { new_time_s }));
        }
        let end = if outcome.stop {
            Some(EndReason::AdaptiveStop)
        } else if self.lives_remaining == Some(0) {
            Some(EndReason::LivesExhausted)
        } else if self.resolved >= self.config.length {
            Some(EndReason::Completed)
        } else {
            None
        };
        if let Some(reason) = end {
            self.phase = Phase::Finished(reason);
            events.push(ev(EventKind::GameEnded { reason }));
        }
    }

    pub fn snapshot(&self) -> GameSnapshot {
        let view = self.config.view;
        let (target, countdown_remaining_s, waves) = match &self.mode {
            ModeState::Grid { round: RoundPhase::Countdown { target, resolve_tick, .. }, .. } => {
                let remaining = resolve_tick.saturating_sub(self.tick) as f64 / TICK_HZ as f64;
                (Some(*target), Some(remaining), Vec::new())
            }
            ModeState::Grid { .. } => (None, None, Vec::new()),
            ModeState::Runner { active, .. } => {
                let waves = active
                    .iter()
                    .map(|w| WaveSnapshot {
                        safe_lane: w.wave.safe_lane,
                        screen_lane: screen_cell(Cell::lane(w.wave.safe_lane), view).col,
                        remaining_s: w.resolve_tick.saturating_sub(self.tick) as f64 / TICK_HZ as f64,
                    })
                    .collect::<Vec<_>>();
                let next = waves.first().map(|w| w.remaining_s);
                (None, next, waves)
            }
        };
        GameSnapshot {
            phase: self.phase,
            tick: self.tick,
            score: self.score,
            countdown_remaining_s,
            target,
            screen_target: target.map(|t| screen_cell(t, view)),
            waves,
            lives_remaining: self.lives_remaining,
            effective_time_s: self.adaptive.effective_time_s,
            view,
        }
    }
}
