//! Envelopes exchanged over the live channel.
//!
//! Server messages are `{type, seq, t_ms, payload}`. `seq` is assigned by the
//! station and is strictly increasing; `t_ms` is station time. Clients send
//! `{type, seq, ...fields}` and get an `ack` or an `error` echoing that `seq`.
//!
//! Command phase table:
//!
//! | command             | accepted when                                         |
//! |---------------------|-------------------------------------------------------|
//! | `start_session`     | no game running                                       |
//! | `begin_calibration` | session open, no calibration in progress              |
//! | `confirm_position`  | calibration waiting for the patient                   |
//! | `add_sample_ack`    | calibration holding a captured sample                 |
//! | `start_game`        | session open, grid available, no game running (409)   |
//! | `pause`             | game running                                          |
//! | `resume`            | game paused by the therapist                          |
//! | `abort`             | game not finished                                     |
//! | `set_view`          | session open                                          |
//! | `virtual_move`      | source is `virtual`                                   |

use rehab_core::calibration::CalibrationProgress;
use rehab_core::engine::{GameEvent, GameSnapshot};
use rehab_core::{Cell, Mechanic, ViewMode};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// State messages go out every third tick (10 Hz).
pub const STATE_EVERY_TICKS: u64 = 3;
/// Frame messages go out every second tick (15 Hz).
pub const FRAME_EVERY_TICKS: u64 = 2;
/// How long, in station time, messages stay available for a resuming client.
pub const RESUME_WINDOW_MS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveMessage {
    pub seq: u64,
    pub t_ms: u64,
    #[serde(flatten)]
    pub body: LiveBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum LiveBody {
    State(Box<StatePayload>),
    /// A downsampled frame in the session-log line format.
    Frame(serde_json::Value),
    Event(EventPayload),
    Calib(CalibrationProgress<f64>),
    Error(ErrorPayload),
    Ack(AckPayload),
    /// Messages `from_seq..=to_seq` fell out of the resume buffer.
    Gap { from_seq: u64, to_seq: u64 },
}

impl LiveBody {
    pub fn kind(&self) -> &'static str {
        match self {
            LiveBody::State(_) => "state",
            LiveBody::Frame(_) => "frame",
            LiveBody::Event(_) => "event",
            LiveBody::Calib(_) => "calib",
            LiveBody::Error(_) => "error",
            LiveBody::Ack(_) => "ack",
            LiveBody::Gap { .. } => "gap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationPhase {
    Idle,
    /// A patient session is open and no game is running.
    Ready,
    Calibrating,
    Playing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    pub station: StationPhase,
    pub nickname: Option<String>,
    pub mechanic: Option<Mechanic>,
    pub calibrated: bool,
    pub view: ViewMode,
    pub source: String,
    /// Id of the running or most recent game's session log.
    pub session_id: Option<String>,
    pub recording: bool,
    pub game: Option<GameSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPayload {
    pub session_id: Option<String>,
    /// Position of the event within its game, from 0.
    pub index: u64,
    #[serde(flatten)]
    pub event: GameEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidPhase,
    Conflict,
    NotVirtual,
    NotFound,
    Validation,
    BadCommand,
    Storage,
    Source,
}

impl ErrorCode {
    /// HTTP status with the same meaning.
    pub fn status(self) -> u16 {
        match self {
            ErrorCode::InvalidPhase | ErrorCode::Conflict => 409,
            ErrorCode::NotFound => 404,
            ErrorCode::Validation | ErrorCode::NotVirtual => 422,
            ErrorCode::BadCommand => 400,
            ErrorCode::Storage | ErrorCode::Source => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub status: u16,
    pub message: String,
    pub command_seq: Option<u64>,
}

impl ErrorPayload {
    pub fn new(code: ErrorCode, message: impl Into<String>, command_seq: Option<u64>) -> Self {
        Self { code, status: code.status(), message: message.into(), command_seq }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckPayload {
    pub command_seq: u64,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientCommand {
    pub seq: u64,
    #[serde(flatten)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    StartSession { nickname: String, mechanic: Mechanic },
    /// Without a seed the station draws one.
    StartGame {
        #[serde(default)]
        seed: Option<u64>,
    },
    Pause,
    Resume,
    Abort,
    ConfirmPosition,
    SetView { view: ViewMode },
    VirtualMove { cell: Cell },
    BeginCalibration,
    AddSampleAck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::StartSession { .. } => "start_session",
            Command::StartGame { .. } => "start_game",
            Command::Pause => "pause",
            Command::Resume => "resume",
            Command::Abort => "abort",
            Command::ConfirmPosition => "confirm_position",
            Command::SetView { .. } => "set_view",
            Command::VirtualMove { .. } => "virtual_move",
            Command::BeginCalibration => "begin_calibration",
            Command::AddSampleAck => "add_sample_ack",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rehab_core::engine::EventKind;
    use serde_json::json;

    #[test]
    fn envelope_shape() {
        let m = LiveMessage {
            seq: 7,
            t_ms: 100,
            body: LiveBody::Event(EventPayload {
                session_id: Some("f6.20260101T000000Z".into()),
                index: 0,
                event: GameEvent { t_ms: 33, kind: EventKind::ScoreChanged { new_score: 1 } },
            }),
        };
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["type"], "event");
        assert_eq!(v["seq"], 7);
        assert_eq!(v["t_ms"], 100);
        assert_eq!(v["payload"]["index"], 0);
        assert_eq!(v["payload"]["t_ms"], 33);
        let back: LiveMessage = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn commands_parse() {
        let c: ClientCommand = serde_json::from_value(json!({"type": "virtual_move", "seq": 3, "cell": [0, 2]})).unwrap();
        assert_eq!(c, ClientCommand { seq: 3, command: Command::VirtualMove { cell: Cell::new(0, 2) } });
        let c: ClientCommand = serde_json::from_value(json!({"type": "start_game", "seq": 4})).unwrap();
        assert_eq!(c.command, Command::StartGame { seed: None });
        let c: ClientCommand =
            serde_json::from_value(json!({"type": "start_session", "seq": 1, "nickname": "f6", "mechanic": "grid_dance"})).unwrap();
        assert_eq!(c.command.name(), "start_session");
        assert!(serde_json::from_value::<ClientCommand>(json!({"type": "dance", "seq": 1})).is_err());
    }

    #[test]
    fn gap_and_error_shapes() {
        let g = serde_json::to_value(LiveMessage { seq: 9, t_ms: 0, body: LiveBody::Gap { from_seq: 2, to_seq: 8 } }).unwrap();
        assert_eq!(g["payload"], json!({"from_seq": 2, "to_seq": 8}));
        let e = ErrorPayload::new(ErrorCode::Conflict, "a game is already running", Some(5));
        assert_eq!(e.status, 409);
        assert_eq!(ErrorCode::NotFound.status(), 404);
    }
}
