//! Fan-out of station output to live connections.
//!
//! Every message gets the next global `seq` and stays in a ring buffer for
//! [`RESUME_WINDOW_MS`] of station time. A connection is just a cursor into
//! that buffer, so a client that reconnects with its last seen `seq` picks
//! up where it left off, or gets a `gap` message when the buffer has moved on.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use tokio::sync::watch;

use crate::protocol::{LiveBody, LiveMessage, RESUME_WINDOW_MS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Audience {
    All,
    Client(String),
}

struct Entry {
    msg: Arc<LiveMessage>,
    audience: Audience,
}

struct Inner {
    next_seq: u64,
    now_ms: u64,
    ring: VecDeque<Entry>,
}

pub struct Hub {
    inner: Mutex<Inner>,
    latest: watch::Sender<u64>,
}

impl Default for Hub {
    fn default() -> Self {
        Self::new()
    }
}

impl Hub {
    pub fn new() -> Self {
        Self { inner: Mutex::new(Inner { next_seq: 1, now_ms: 0, ring: VecDeque::new() }), latest: watch::channel(0).0 }
    }

    /// Advances station time and evicts messages older than the resume window.
    pub fn set_now(&self, now_ms: u64) {
        let mut g = self.inner.lock().unwrap();
        g.now_ms = now_ms;
        while g.ring.front().is_some_and(|e| e.msg.t_ms + RESUME_WINDOW_MS < now_ms) {
            g.ring.pop_front();
        }
    }

    pub fn publish(&self, body: LiveBody, audience: Audience) -> u64 {
        let seq = {
            let mut g = self.inner.lock().unwrap();
            let seq = g.next_seq;
            g.next_seq += 1;
            let msg = Arc::new(LiveMessage { seq, t_ms: g.now_ms, body });
            g.ring.push_back(Entry { msg, audience });
            seq
        };
        self.latest.send_replace(seq);
        seq
    }

    /// Highest `seq` published so far (0 before the first message).
    pub fn last_seq(&self) -> u64 {
        self.inner.lock().unwrap().next_seq - 1
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.latest.subscribe()
    }

    /// Messages after `cursor` meant for `client`, preceded by a `gap` when
    /// some of them were already evicted. Returns the new cursor.
    pub fn since(&self, cursor: u64, client: &str, frames: bool) -> (Vec<LiveMessage>, u64) {
        let g = self.inner.lock().unwrap();
        let mut out = Vec::new();
        let oldest = g.ring.front().map_or(g.next_seq, |e| e.msg.seq);
        if oldest > cursor + 1 {
            let to_seq = oldest - 1;
            out.push(LiveMessage { seq: to_seq, t_ms: g.now_ms, body: LiveBody::Gap { from_seq: cursor + 1, to_seq } });
        }
        let start = g.ring.partition_point(|e| e.msg.seq <= cursor);
        for e in g.ring.range(start..) {
            let for_me = match &e.audience {
                Audience::All => true,
                Audience::Client(c) => c == client,
            };
            if for_me && (frames || !matches!(e.msg.body, LiveBody::Frame(_))) {
                out.push((*e.msg).clone());
            }
        }
        (out, cursor.max(g.next_seq - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{AckPayload, ErrorCode, ErrorPayload};

    fn ack(n: u64) -> LiveBody {
        LiveBody::Ack(AckPayload { command_seq: n, command: "pause".into() })
    }

    #[test]
    fn cursor_sees_only_newer_messages() {
        let hub = Hub::new();
        assert_eq!(hub.last_seq(), 0);
        for n in 0..5 {
            hub.publish(ack(n), Audience::All);
        }
        let (msgs, cur) = hub.since(2, "a", true);
        assert_eq!(msgs.iter().map(|m| m.seq).collect::<Vec<_>>(), vec![3, 4, 5]);
        assert_eq!(cur, 5);
        assert!(hub.since(5, "a", true).0.is_empty());
    }

    #[test]
    fn audience_and_frame_filters() {
        let hub = Hub::new();
        hub.publish(ack(0), Audience::Client("a".into()));
        hub.publish(LiveBody::Frame(serde_json::json!({"t": 0})), Audience::All);
        hub.publish(LiveBody::Error(ErrorPayload::new(ErrorCode::NotVirtual, "x", None)), Audience::Client("b".into()));
        let kinds = |c: &str, f: bool| hub.since(0, c, f).0.iter().map(|m| m.body.kind()).collect::<Vec<_>>();
        assert_eq!(kinds("a", true), vec!["ack", "frame"]);
        assert_eq!(kinds("a", false), vec!["ack"]);
        assert_eq!(kinds("b", false), vec!["error"]);
    }

    #[test]
    fn eviction_reports_a_gap() {
        let hub = Hub::new();
        for t in 0..30u64 {
            hub.set_now(t * 1000);
            hub.publish(ack(t), Audience::All);
        }
        // at t = 29 s everything before t = 19 s is gone
        let (msgs, _) = hub.since(3, "a", true);
        assert_eq!(msgs[0].body, LiveBody::Gap { from_seq: 4, to_seq: 19 });
        assert_eq!(msgs[0].seq, 19);
        assert_eq!(msgs[1].seq, 20);
        assert!(msgs.windows(2).all(|w| w[0].seq < w[1].seq));
        // a cursor inside the window has no gap
        let (msgs, _) = hub.since(25, "a", true);
        assert_eq!(msgs.first().unwrap().seq, 26);
    }
}
