//! The game station: one source, one optional calibration wizard and at most
//! one live game. All mutation happens here, one command or tick at a time.

use std::fs::File;
use std::io::BufWriter;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use rehab_core::calibration::{CalibrationProgress, CalibrationWizard, GridFrame, HandRaiseConfig};
use rehab_core::engine::{tick_to_ms, EngineError, Phase};
use rehab_core::input::{FrameSource, SourceDescriptor, SourceError};
use rehab_core::levelgen::Prng;
use rehab_core::profile::{ProfileError, ProfileStore};
use rehab_core::recorder::{frame_to_line, EngineCommand, Marker, SessionHeader, SessionWriter};
use rehab_core::session::SessionDriver;
use rehab_core::skeleton::Vec3;
use rehab_core::{Frame, Grid, GridLayout, Mechanic, ViewMode};

use crate::hub::{Audience, Hub};
use crate::protocol::{
    AckPayload, ClientCommand, Command, ErrorCode, ErrorPayload, EventPayload, LiveBody, StatePayload, StationPhase,
    FRAME_EVERY_TICKS, STATE_EVERY_TICKS,
};

/// Grid used when no calibration was run and the source is synthetic.
pub fn demo_grid(layout: GridLayout) -> Grid {
    let origin = match layout {
        GridLayout::Grid3x3 => Vec3::new(-0.5, 0.0, 1.5),
        GridLayout::Line3 => Vec3::new(-0.5, 0.0, 2.0),
    };
    GridFrame::regular(layout, origin, 0.5).expect("valid demo grid")
}

pub struct StationOptions {
    pub source: SourceDescriptor,
    pub hand_raise: HandRaiseConfig,
    /// Fixed wall clock for tests; `None` uses the system clock.
    pub clock: Option<DateTime<Utc>>,
}

impl StationOptions {
    pub fn new(source: SourceDescriptor) -> Self {
        Self { source, hand_raise: HandRaiseConfig::default(), clock: None }
    }
}

struct PatientSession {
    nickname: String,
    mechanic: Mechanic,
    grid: Option<Grid>,
    view: ViewMode,
}

struct LiveGame {
    driver: SessionDriver<BufWriter<File>>,
    session_id: String,
    events_sent: u64,
    warned_storage: bool,
}

struct PendingCommand {
    client: String,
    seq: u64,
    name: &'static str,
}

type Reply = Result<Option<&'static str>, ErrorPayload>;

pub struct Station {
    store: Arc<Mutex<ProfileStore>>,
    hub: Arc<Hub>,
    source: Box<dyn FrameSource>,
    source_is_synthetic: bool,
    source_ended: bool,
    hand_raise: HandRaiseConfig,
    clock: Option<DateTime<Utc>>,
    k: u64,
    session: Option<PatientSession>,
    wizard: Option<CalibrationWizard<f64>>,
    game: Option<LiveGame>,
    last_session_id: Option<String>,
    /// Markers for the next tick, with the command each one answers.
    pending: Vec<(Marker, Option<PendingCommand>)>,
    seeds: Prng,
}

fn err(code: ErrorCode, message: impl Into<String>) -> ErrorPayload {
    ErrorPayload::new(code, message, None)
}

fn profile_error(e: ProfileError) -> ErrorPayload {
    let code = match e {
        ProfileError::NotFound(_) | ProfileError::SessionNotFound(_) => ErrorCode::NotFound,
        ProfileError::InvalidNickname(_) | ProfileError::InvalidMergedConfig(_) => ErrorCode::Validation,
        ProfileError::DuplicateNickname(_) => ErrorCode::Conflict,
        _ => ErrorCode::Storage,
    };
    err(code, e.to_string())
}

impl Station {
    pub fn new(store: Arc<Mutex<ProfileStore>>, hub: Arc<Hub>, options: StationOptions) -> Result<Self, SourceError> {
        let source = options.source.open(&demo_grid(GridLayout::Grid3x3), 0)?;
        let source_is_synthetic = matches!(options.source, SourceDescriptor::Virtual | SourceDescriptor::Scripted { .. });
        let seed_base = options.clock.unwrap_or_else(Utc::now).timestamp_nanos_opt().unwrap_or_default() as u64;
        Ok(Self {
            store,
            hub,
            source,
            source_is_synthetic,
            source_ended: false,
            hand_raise: options.hand_raise,
            clock: options.clock,
            k: 0,
            session: None,
            wizard: None,
            game: None,
            last_session_id: None,
            pending: Vec::new(),
            seeds: Prng::new(seed_base),
        })
    }

    pub fn now_ms(&self) -> u64 {
        tick_to_ms(self.k)
    }

    fn wall_now(&self) -> DateTime<Utc> {
        match self.clock {
            Some(t) => t + Duration::milliseconds(self.now_ms() as i64),
            None => Utc::now(),
        }
    }

    fn game_running(&self) -> bool {
        self.game.as_ref().is_some_and(|g| !g.driver.is_finished())
    }

    pub fn state(&self) -> StatePayload {
        let station = if self.game_running() {
            StationPhase::Playing
        } else if self.wizard.is_some() {
            StationPhase::Calibrating
        } else if self.session.is_some() {
            StationPhase::Ready
        } else {
            StationPhase::Idle
        };
        StatePayload {
            station,
            nickname: self.session.as_ref().map(|s| s.nickname.clone()),
            mechanic: self.session.as_ref().map(|s| s.mechanic),
            calibrated: self.session.as_ref().is_some_and(|s| s.grid.is_some()),
            view: self.session.as_ref().map_or(ViewMode::ThirdPerson, |s| s.view),
            source: self.source.kind().to_string(),
            session_id: self.game.as_ref().map(|g| g.session_id.clone()).or_else(|| self.last_session_id.clone()),
            recording: self.game.as_ref().is_some_and(|g| g.driver.is_recording()),
            game: self.game.as_ref().map(|g| g.driver.snapshot()),
        }
    }

    fn publish_state(&self) {
        self.hub.publish(LiveBody::State(Box::new(self.state())), Audience::All);
    }

    fn reply(&self, client: &str, seq: u64, result: Reply) {
        let body = match result {
            Ok(Some(name)) => LiveBody::Ack(AckPayload { command_seq: seq, command: name.to_string() }),
            Ok(None) => return,
            Err(mut e) => {
                e.command_seq = Some(seq);
                LiveBody::Error(e)
            }
        };
        self.hub.publish(body, Audience::Client(client.to_string()));
    }

    /// Applies a client command. Game commands are acknowledged after the
    /// tick that applies them.
    pub fn handle(&mut self, client: &str, cmd: ClientCommand) {
        let result = self.dispatch(client, cmd.seq, cmd.command.clone());
        self.reply(client, cmd.seq, result);
        self.publish_state();
    }

    fn dispatch(&mut self, client: &str, seq: u64, command: Command) -> Reply {
        let name = command.name();
        match command {
            Command::StartSession { nickname, mechanic } => {
                if self.game_running() {
                    return Err(err(ErrorCode::Conflict, "a game is running"));
                }
                let store = self.store.lock().unwrap();
                let profile = store.load(&nickname).map_err(profile_error)?;
                let config = store.effective_config(&profile, mechanic).map_err(profile_error)?;
                drop(store);
                self.source.set_grid(&demo_grid(mechanic.layout()));
                self.session = Some(PatientSession { nickname, mechanic, grid: None, view: config.view });
                self.wizard = None;
                self.game = None;
                Ok(Some(name))
            }
            Command::BeginCalibration => {
                let s = self.session.as_ref().ok_or_else(|| err(ErrorCode::InvalidPhase, "no session open"))?;
                if self.wizard.is_some() {
                    return Err(err(ErrorCode::InvalidPhase, "calibration already in progress"));
                }
                let wizard = CalibrationWizard::new(s.mechanic.layout(), self.hand_raise);
                self.hub.publish(LiveBody::Calib(wizard.current_prompt()), Audience::All);
                self.wizard = Some(wizard);
                Ok(Some(name))
            }
            Command::ConfirmPosition => {
                let w = self.wizard.as_mut().ok_or_else(|| err(ErrorCode::InvalidPhase, "no calibration in progress"))?;
                let progress = w.confirm().map_err(|e| err(ErrorCode::InvalidPhase, e.to_string()))?;
                self.hub.publish(LiveBody::Calib(progress), Audience::All);
                Ok(Some(name))
            }
            Command::AddSampleAck => {
                let w = self.wizard.as_mut().ok_or_else(|| err(ErrorCode::InvalidPhase, "no calibration in progress"))?;
                let progress = w.acknowledge().map_err(|e| err(ErrorCode::InvalidPhase, e.to_string()))?;
                if let CalibrationProgress::Completed { grid } = &progress {
                    self.apply_grid(grid.clone());
                }
                self.hub.publish(LiveBody::Calib(progress), Audience::All);
                Ok(Some(name))
            }
            Command::StartGame { seed } => self.start_game(seed).map(|_| Some(name)),
            Command::Pause | Command::Resume | Command::Abort => {
                if self.game.is_none() {
                    return Err(err(ErrorCode::InvalidPhase, "no game"));
                }
                let cmd = match command {
                    Command::Pause => EngineCommand::Pause,
                    Command::Resume => EngineCommand::Resume,
                    _ => EngineCommand::Abort,
                };
                self.pending.push((Marker::Command(cmd), Some(PendingCommand { client: client.to_string(), seq, name })));
                Ok(None)
            }
            Command::SetView { view } => {
                let s = self.session.as_mut().ok_or_else(|| err(ErrorCode::InvalidPhase, "no session open"))?;
                s.view = view;
                if self.game_running() {
                    let marker = Marker::Command(EngineCommand::SetView { view });
                    self.pending.push((marker, Some(PendingCommand { client: client.to_string(), seq, name })));
                    return Ok(None);
                }
                Ok(Some(name))
            }
            Command::VirtualMove { cell } => {
                self.source.virtual_move(cell).map_err(|e| match e {
                    SourceError::NotVirtual => err(ErrorCode::NotVirtual, "the active source is not virtual"),
                    other => err(ErrorCode::Validation, other.to_string()),
                })?;
                if self.game_running() {
                    self.pending.push((Marker::VirtualMove { cell }, None));
                }
                Ok(Some(name))
            }
        }
    }

    fn apply_grid(&mut self, grid: Grid) {
        self.wizard = None;
        self.source.set_grid(&grid);
        if self.game_running() {
            self.pending.push((Marker::Command(EngineCommand::Recalibrate { grid: grid.clone() }), None));
        }
        if let Some(s) = self.session.as_mut() {
            s.grid = Some(grid);
        }
    }

    fn start_game(&mut self, seed: Option<u64>) -> Result<(), ErrorPayload> {
        if self.game_running() {
            return Err(err(ErrorCode::Conflict, "a game is already running"));
        }
        if self.wizard.is_some() {
            return Err(err(ErrorCode::InvalidPhase, "calibration in progress"));
        }
        let s = self.session.as_ref().ok_or_else(|| err(ErrorCode::InvalidPhase, "no session open"))?;
        let grid = match (&s.grid, self.source_is_synthetic) {
            (Some(g), _) => g.clone(),
            (None, true) => demo_grid(s.mechanic.layout()),
            (None, false) => return Err(err(ErrorCode::InvalidPhase, "calibrate the grid first")),
        };
        let store = self.store.lock().unwrap();
        let profile = store.load(&s.nickname).map_err(profile_error)?;
        let mut config = store.effective_config(&profile, s.mechanic).map_err(profile_error)?;
        config.view = s.view;
        config.seed = seed.unwrap_or_else(|| self.seeds.next_u64());

        // one log per second of start time
        let mut started_at = self.wall_now();
        let (session_id, path) = loop {
            let (id, path) = store.new_session_path(&s.nickname, started_at).map_err(profile_error)?;
            if !path.exists() {
                break (id, path);
            }
            started_at += Duration::seconds(1);
        };
        drop(store);

        let header = SessionHeader::new(&s.nickname, started_at, config.clone(), grid.clone());
        let writer = match SessionWriter::create(&path, header) {
            Ok(w) => Some(w),
            Err(e) => {
                self.hub.publish(LiveBody::Error(err(ErrorCode::Storage, format!("not recording: {e}"))), Audience::All);
                None
            }
        };
        let driver = SessionDriver::start(config, grid, writer).map_err(|e| err(ErrorCode::Validation, e.to_string()))?;
        self.game = Some(LiveGame { driver, session_id, events_sent: 0, warned_storage: false });
        self.pending.clear();
        Ok(())
    }

    fn next_frame(&mut self) -> Option<Frame> {
        match self.source.next_frame() {
            Ok(f) => Some(f),
            Err(SourceError::WouldBlock) => None,
            Err(SourceError::EndOfStream) => {
                if !self.source_ended {
                    self.source_ended = true;
                    self.hub.publish(LiveBody::Error(err(ErrorCode::Source, "input source ended")), Audience::All);
                }
                None
            }
            Err(e) => {
                self.hub.publish(LiveBody::Error(err(ErrorCode::Source, e.to_string())), Audience::All);
                None
            }
        }
    }

    /// One 30 Hz station tick.
    pub fn tick(&mut self) {
        self.hub.set_now(self.now_ms());
        if let Some(g) = &self.game {
            self.source.observe(g.driver.now_ms(), &g.driver.snapshot());
        }
        let frame = self.next_frame();

        if let (Some(w), Some(f)) = (self.wizard.as_mut(), frame.as_ref()) {
            if let Some(progress) = w.feed_frame(f) {
                self.hub.publish(LiveBody::Calib(progress), Audience::All);
            }
        }

        let mut state_changed = false;
        if self.game_running() {
            let pending = std::mem::take(&mut self.pending);
            let game = self.game.as_mut().expect("running game");
            let phase_before = game.driver.game().phase();
            let (markers, waiting): (Vec<Marker>, Vec<Option<PendingCommand>>) = pending.into_iter().unzip();
            let out = game.driver.step(frame.clone(), markers);
            state_changed = !waiting.is_empty() || game.driver.game().phase() != phase_before;
            for (p, result) in waiting.into_iter().zip(&out.command_results) {
                if let Some(p) = p {
                    let reply = result.as_ref().map(|_| Some(p.name)).map_err(engine_error);
                    self.reply(&p.client, p.seq, reply);
                }
            }
            let game = self.game.as_mut().expect("running game");
            for event in out.events {
                let payload = EventPayload { session_id: Some(game.session_id.clone()), index: game.events_sent, event };
                game.events_sent += 1;
                self.hub.publish(LiveBody::Event(payload), Audience::All);
            }
            if let Some(msg) = out.storage_error {
                if !game.warned_storage {
                    game.warned_storage = true;
                    self.hub.publish(LiveBody::Error(err(ErrorCode::Storage, msg)), Audience::All);
                }
            }
            if game.driver.is_finished() {
                self.finish_game();
            }
        } else {
            for (_, p) in std::mem::take(&mut self.pending) {
                if let Some(p) = p {
                    self.reply(&p.client, p.seq, Err(err(ErrorCode::InvalidPhase, "game already finished")));
                }
            }
        }

        if self.k.is_multiple_of(FRAME_EVERY_TICKS) {
            if let Some(f) = frame {
                let line = frame_to_line(&f.with_t_ms(self.now_ms()).quantized());
                let value = serde_json::from_str(&line).expect("frame lines are JSON");
                self.hub.publish(LiveBody::Frame(value), Audience::All);
            }
        }
        if state_changed || self.k.is_multiple_of(STATE_EVERY_TICKS) {
            self.publish_state();
        }
        self.k += 1;
    }

    fn finish_game(&mut self) {
        let Some(game) = self.game.take() else { return };
        self.last_session_id = Some(game.session_id.clone());
        if let Err(e) = game.driver.finish(None) {
            self.hub.publish(LiveBody::Error(err(ErrorCode::Storage, format!("footer not written: {e}"))), Audience::All);
        }
    }

    /// Closes a running game's log without an end event (service shutdown).
    pub fn shutdown(&mut self) {
        self.finish_game();
    }
}

fn engine_error(e: &EngineError) -> ErrorPayload {
    match e {
        EngineError::InvalidPhase(p) => err(ErrorCode::InvalidPhase, format!("not allowed while {}", phase_name(*p))),
        other => err(ErrorCode::Validation, other.to_string()),
    }
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Idle => "idle",
        Phase::Running => "running",
        Phase::Paused(_) => "paused",
        Phase::Finished(_) => "finished",
    }
}
