//! REST routes and the `/live` WebSocket.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use rehab_core::analytics::{compute_posture_trace, compute_stats, profile_trends, write_trace_csv, SessionStats, Trends};
use rehab_core::config::ConfigOverrides;
use rehab_core::profile::{PatientProfile, ProfileError, ProfileStore, SessionEntry, SystemDefaults};
use rehab_core::recorder::{read_session, replay_iterate, RecorderError, SessionLog, FORMAT_VERSION};
use rehab_core::{GameConfig, Mechanic};
use serde::{Deserialize, Serialize};

use crate::hub::{Audience, Hub};
use crate::protocol::{ClientCommand, ErrorCode, ErrorPayload, LiveBody, PROTOCOL_VERSION};
use crate::runner::Request;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Mutex<ProfileStore>>,
    pub hub: Arc<Hub>,
    pub commands: Sender<Request>,
    next_client: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(store: Arc<Mutex<ProfileStore>>, hub: Arc<Hub>, commands: Sender<Request>) -> Self {
        Self { store, hub, commands, next_client: Arc::new(AtomicU64::new(1)) }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/profiles", get(list_profiles).post(create_profile))
        .route("/profiles/{nick}", get(get_profile))
        .route("/profiles/{nick}/config", put(put_config))
        .route("/profiles/{nick}/sessions", get(list_sessions))
        .route("/profiles/{nick}/trends", get(trends))
        .route("/sessions/{id}/stats", get(session_stats))
        .route("/sessions/{id}/trace.csv", get(session_trace))
        .route("/sessions/{id}/replay", get(session_replay))
        .route("/defaults", get(defaults))
        .route("/live", get(live))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    code: ErrorCode,
    message: String,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: ErrorCode,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.code.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { code: self.code, message: &self.message })).into_response()
    }
}

impl From<ProfileError> for ApiError {
    fn from(e: ProfileError) -> Self {
        let code = match &e {
            ProfileError::DuplicateNickname(_) => ErrorCode::Conflict,
            ProfileError::InvalidNickname(_) | ProfileError::InvalidMergedConfig(_) => ErrorCode::Validation,
            ProfileError::NotFound(_) | ProfileError::SessionNotFound(_) => ErrorCode::NotFound,
            _ => ErrorCode::Storage,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<RecorderError> for ApiError {
    fn from(e: RecorderError) -> Self {
        let code = match &e {
            RecorderError::StorageFailure(_) => ErrorCode::Storage,
            _ => ErrorCode::Validation,
        };
        Self { code, message: e.to_string() }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs store work off the async executor; the store lock serializes writers.
async fn with_store<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&ProfileStore) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(&store.lock().unwrap()))
        .await
        .map_err(|e| ApiError { code: ErrorCode::Storage, message: e.to_string() })?
}

#[derive(Deserialize)]
struct NewProfile {
    nickname: String,
    #[serde(default)]
    notes: Option<String>,
}

async fn create_profile(State(s): State<AppState>, Json(body): Json<NewProfile>) -> ApiResult<(StatusCode, Json<PatientProfile>)> {
    let profile = with_store(&s, move |store| {
        let p = store.create_profile(&body.nickname)?;
        Ok(match body.notes {
            Some(n) => store.set_notes(&p.nickname, &n)?,
            None => p,
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(profile)))
}

async fn list_profiles(State(s): State<AppState>) -> ApiResult<Json<Vec<PatientProfile>>> {
    Ok(Json(with_store(&s, |store| Ok(store.list_profiles()?)).await?))
}

#[derive(Serialize)]
struct ProfileView {
    #[serde(flatten)]
    profile: PatientProfile,
    /// System defaults merged with the profile's overrides.
    effective: BTreeMap<Mechanic, GameConfig>,
}

async fn get_profile(State(s): State<AppState>, Path(nick): Path<String>) -> ApiResult<Json<ProfileView>> {
    let view = with_store(&s, move |store| {
        let profile = store.load(&nick)?;
        let effective = Mechanic::ALL
            .into_iter()
            .map(|m| Ok((m, store.effective_config(&profile, m)?)))
            .collect::<Result<_, ProfileError>>()?;
        Ok(ProfileView { profile, effective })
    })
    .await?;
    Ok(Json(view))
}

#[derive(Deserialize)]
struct ConfigUpdate {
    mechanic: Mechanic,
    overrides: ConfigOverrides,
}

#[derive(Serialize)]
struct ConfigView {
    mechanic: Mechanic,
    effective: GameConfig,
}

async fn put_config(State(s): State<AppState>, Path(nick): Path<String>, Json(body): Json<ConfigUpdate>) -> ApiResult<Json<ConfigView>> {
    let mechanic = body.mechanic;
    let effective = with_store(&s, move |store| Ok(store.set_overrides(&nick, mechanic, body.overrides)?)).await?;
    Ok(Json(ConfigView { mechanic, effective }))
}

async fn list_sessions(State(s): State<AppState>, Path(nick): Path<String>) -> ApiResult<Json<Vec<SessionEntry>>> {
    Ok(Json(with_store(&s, move |store| Ok(store.list_sessions(&nick)?)).await?))
}

async fn trends(State(s): State<AppState>, Path(nick): Path<String>) -> ApiResult<Json<Trends>> {
    let dated = with_store(&s, move |store| Ok(store.dated_stats(&nick)?)).await?;
    Ok(Json(profile_trends(&dated)))
}

async fn load_session(s: &AppState, id: String) -> ApiResult<SessionLog> {
    with_store(s, move |store| {
        let path = store.session_path(&id)?;
        Ok(read_session(&path)?.0)
    })
    .await
}

async fn session_stats(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionStats>> {
    Ok(Json(compute_stats(&load_session(&s, id).await?)))
}

async fn session_trace(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let log = load_session(&s, id).await?;
    let mut csv = Vec::new();
    write_trace_csv(&compute_posture_trace(&log), &mut csv).map_err(|e| ApiError { code: ErrorCode::Storage, message: e.to_string() })?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

#[derive(Deserialize)]
struct Window {
    from_ms: Option<u64>,
    to_ms: Option<u64>,
}

/// Records in `[from_ms, to_ms]` as NDJSON, one `{record, metrics}` per line.
async fn session_replay(State(s): State<AppState>, Path(id): Path<String>, Query(w): Query<Window>) -> ApiResult<Response> {
    let log = load_session(&s, id).await?;
    let mut body = String::new();
    for item in replay_iterate(&log, w.from_ms.unwrap_or(0), w.to_ms.unwrap_or(u64::MAX)) {
        let metrics = serde_json::to_string(&item.metrics).expect("metrics serialize");
        body.push_str(&format!("{{\"record\":{},\"metrics\":{}}}\n", item.record.to_line(), metrics));
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

#[derive(Serialize)]
struct DefaultsView {
    protocol_version: u32,
    log_format_version: u32,
    #[serde(flatten)]
    defaults: SystemDefaults,
}

async fn defaults(State(s): State<AppState>) -> ApiResult<Json<DefaultsView>> {
    let defaults = with_store(&s, |store| Ok(store.defaults()?)).await?;
    Ok(Json(DefaultsView { protocol_version: PROTOCOL_VERSION, log_format_version: FORMAT_VERSION, defaults }))
}

#[derive(Deserialize)]
struct LiveQuery {
    /// Stable id so a reconnecting client also gets its own acks back.
    client: Option<String>,
    /// Last `seq` the client received.
    resume_from: Option<u64>,
    #[serde(default = "frames_default")]
    frames: bool,
}

fn frames_default() -> bool {
    true
}

async fn live(ws: WebSocketUpgrade, Query(q): Query<LiveQuery>, State(s): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, q, s))
}

async fn connection(socket: WebSocket, q: LiveQuery, s: AppState) {
    let client = q.client.unwrap_or_else(|| format!("c{}", s.next_client.fetch_add(1, Ordering::Relaxed)));
    let mut latest = s.hub.subscribe();
    let mut cursor = q.resume_from.unwrap_or_else(|| s.hub.last_seq());
    let (mut tx, mut rx) = socket.split();

    let outgoing = async {
        loop {
            let (msgs, next) = s.hub.since(cursor, &client, q.frames);
            cursor = next;
            for m in msgs {
                let text = serde_json::to_string(&m).expect("messages serialize");
                if tx.send(Message::Text(text.into())).await.is_err() {
                    return;
                }
            }
            if latest.changed().await.is_err() {
                return;
            }
        }
    };
    let incoming = async {
        while let Some(Ok(msg)) = rx.next().await {
            match msg {
                Message::Text(text) => match serde_json::from_str::<ClientCommand>(&text) {
                    Ok(command) => {
                        if s.commands.send(Request { client: client.clone(), command }).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let seq = serde_json::from_str::<serde_json::Value>(&text).ok().and_then(|v| v["seq"].as_u64());
                        let body = LiveBody::Error(ErrorPayload::new(ErrorCode::BadCommand, e.to_string(), seq));
                        s.hub.publish(body, Audience::Client(client.clone()));
                    }
                },
                Message::Close(_) => return,
                _ => {}
            }
        }
    };
    tokio::select! {
        _ = outgoing => {}
        _ = incoming => {}
    }
}
