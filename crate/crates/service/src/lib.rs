//! HTTP and live-channel front end for the game station.
//!
//! One [`Service`] owns one station thread (one live game at a time) and
//! serves the REST routes and `/live` WebSocket from [`api::router`].

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::Router;
use rehab_core::input::SourceError;
use rehab_core::profile::{ProfileError, ProfileStore};

pub mod api;
pub mod hub;
pub mod protocol;
pub mod runner;
pub mod station;

pub use api::AppState;
pub use hub::Hub;
pub use protocol::{ClientCommand, Command, LiveBody, LiveMessage};
pub use runner::REAL_TIME_TICK;
pub use station::{Station, StationOptions};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] ProfileError),
    #[error("cannot open input source: {0}")]
    Source(#[from] SourceError),
}

pub struct ServiceConfig {
    pub root: PathBuf,
    pub station: StationOptions,
    /// Wall time per engine tick; [`REAL_TIME_TICK`] in production.
    pub tick: Duration,
}

pub struct Service {
    state: AppState,
    station: runner::StationHandle,
}

impl Service {
    pub fn start(config: ServiceConfig) -> Result<Self, ServiceError> {
        let store = Arc::new(Mutex::new(ProfileStore::open(config.root)?));
        let hub = Arc::new(Hub::new());
        let station = Station::new(store.clone(), hub.clone(), config.station)?;
        let handle = runner::StationHandle::spawn(station, config.tick);
        let state = AppState::new(store, hub, handle.sender());
        Ok(Self { state, station: handle })
    }

    pub fn router(&self) -> Router {
        api::router(self.state.clone())
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    /// Serves until `shutdown` resolves, then stops the station.
    pub async fn serve(
        self,
        listener: tokio::net::TcpListener,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> std::io::Result<()> {
        let res = axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await;
        self.station.stop();
        res
    }

    pub fn stop(self) {
        self.station.stop();
    }
}
