//! Runs the presence state machine on one task. Candidates arrive over a
//! channel, the clock ticks on an interval, display events are broadcast,
//! and the latest slot snapshot is published for lock-free reads.

use std::time::{Duration, Instant};

use siamface::presence::{DisplayEvent, PresenceState, SlotView};
use tokio::sync::{broadcast, mpsc, watch};

const CHANNEL_DEPTH: usize = 1024;

#[derive(Debug)]
struct Candidate {
    uid: String,
    score: f64,
}

#[derive(Clone)]
pub struct PresenceHandle {
    tx: mpsc::Sender<Candidate>,
    events: broadcast::Sender<DisplayEvent>,
    snapshot: watch::Receiver<Vec<SlotView>>,
}

impl PresenceHandle {
    /// Offers a candidate without waiting. Returns false if the actor is
    /// gone or saturated.
    pub fn offer(&self, uid: &str, score: f64) -> bool {
        self.tx
            .try_send(Candidate {
                uid: uid.to_string(),
                score,
            })
            .is_ok()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<DisplayEvent> {
        self.events.subscribe()
    }

    pub fn snapshot(&self) -> Vec<SlotView> {
        self.snapshot.borrow().clone()
    }
}

/// Spawns the actor on the current tokio runtime.
pub fn spawn(mut state: PresenceState, tick: Duration) -> PresenceHandle {
    let (tx, mut rx) = mpsc::channel::<Candidate>(CHANNEL_DEPTH);
    let (events, _) = broadcast::channel(CHANNEL_DEPTH);
    let (snap_tx, snapshot) = watch::channel(state.snapshot());
    let out = events.clone();
    let start = Instant::now();
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(tick);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            let now = start.elapsed().as_millis() as u64;
            let emitted = tokio::select! {
                msg = rx.recv() => match msg {
                    Some(c) => state.on_candidate(&c.uid, c.score, now),
                    None => break,
                },
                _ = interval.tick() => state.tick(now),
            };
            match emitted {
                Ok(evs) if !evs.is_empty() => {
                    for ev in evs {
                        tracing::debug!(slot = ev.slot, uid = %ev.uid, "display event");
                        let _ = out.send(ev);
                    }
                    let _ = snap_tx.send(state.snapshot());
                }
                Ok(_) => {}
                Err(e) => tracing::warn!("presence rejected input: {e}"),
            }
        }
    });
    PresenceHandle { tx, events, snapshot }
}
