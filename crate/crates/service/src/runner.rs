//! Runs a [`Station`] on its own thread at a fixed tick rate.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rehab_core::engine::TICK_HZ;

use crate::protocol::ClientCommand;
use crate::station::Station;

pub const REAL_TIME_TICK: Duration = Duration::from_nanos(1_000_000_000 / TICK_HZ);

#[derive(Debug)]
pub struct Request {
    pub client: String,
    pub command: ClientCommand,
}

pub struct StationHandle {
    commands: Sender<Request>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl StationHandle {
    /// Starts the tick loop. Commands are applied in arrival order before
    /// each tick.
    pub fn spawn(station: Station, tick: Duration) -> Self {
        let (commands, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name("station".into())
            .spawn(move || run(station, rx, tick, &flag))
            .expect("spawn station thread");
        Self { commands, stop, thread: Some(thread) }
    }

    pub fn sender(&self) -> Sender<Request> {
        self.commands.clone()
    }

    /// Stops the loop and closes any running game's log.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StationHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

fn run(mut station: Station, rx: Receiver<Request>, tick: Duration, stop: &AtomicBool) {
    let mut next = Instant::now();
    while !stop.load(Ordering::Relaxed) {
        while let Ok(req) = rx.try_recv() {
            station.handle(&req.client, req.command);
        }
        station.tick();
        next += tick;
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else if now - next > Duration::from_secs(1) {
            // far behind (suspended process): skip ahead instead of bursting
            next = now;
        }
    }
    station.shutdown();
}
