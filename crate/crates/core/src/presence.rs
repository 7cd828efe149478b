//! Display-board presence tracking.
//!
//! A fixed number of display slots show recently recognised people. A
//! candidate above the score threshold is debounced by a block list, then
//! shown in a free slot, swapped into a slot whose initial hold has passed,
//! or queued. All timing goes through an explicit timer queue drained by
//! [`PresenceState::tick`], so the machine is a pure function of its input
//! trace and a caller-supplied clock (milliseconds).

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PresenceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = PresenceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceConfig {
    pub slot_count: usize,
    /// Candidates must score strictly above this.
    pub threshold: f64,
    pub block_ms: u64,
    pub display_ms: u64,
    pub pickup_delay_ms: u64,
    pub initial_hold_ms: u64,
}

impl Default for PresenceConfig {
    fn default() -> Self {
        Self {
            slot_count: 4,
            threshold: 0.5,
            block_ms: 10_000,
            display_ms: 5_000,
            pickup_delay_ms: 500,
            initial_hold_ms: 1_000,
        }
    }
}

impl PresenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PresenceError::InvalidArgument(m));
        if self.slot_count == 0 {
            return bad("slot count must be at least 1".into());
        }
        if !self.threshold.is_finite() {
            return bad(format!("threshold must be finite, got {}", self.threshold));
        }
        if self.block_ms == 0 || self.pickup_delay_ms == 0 || self.initial_hold_ms == 0 {
            return bad("durations must be positive".into());
        }
        if self.display_ms <= self.initial_hold_ms {
            return bad(format!(
                "display time {} ms must exceed the initial hold of {} ms",
                self.display_ms, self.initial_hold_ms
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotStat {
    Empty,
    OnScreen,
    Replaceable,
    #[serde(rename = "PickedUpFromWL")]
    PickedUpFromWl,
    WaitForPush,
}

impl SlotStat {
    fn can_become(self, to: SlotStat) -> bool {
        use SlotStat::*;
        matches!(
            (self, to),
            (Empty, OnScreen)
                | (OnScreen, Replaceable)
                | (OnScreen, PickedUpFromWl)
                | (Replaceable, Empty)
                | (Replaceable, WaitForPush)
                | (PickedUpFromWl, OnScreen)
                | (WaitForPush, OnScreen)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInfo {
    pub username: String,
    pub title: String,
    pub image_ref: String,
}

/// Maps a uid to display details.
pub trait UserDirectory: Send + Sync {
    fn lookup(&self, uid: &str) -> Option<UserInfo>;
}

/// In-memory directory, optionally loaded from a tab-separated file of
/// `uid<TAB>username<TAB>title[<TAB>image_ref]` lines.
#[derive(Debug, Clone, Default)]
pub struct MemoryDirectory {
    users: HashMap<String, UserInfo>,
}

impl MemoryDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, uid: &str, username: &str, title: &str) {
        self.users.insert(
            uid.to_string(),
            UserInfo {
                username: username.to_string(),
                title: title.to_string(),
                image_ref: format!("userimg/{uid}.jpg"),
            },
        );
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dir = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) || cols[0].is_empty() {
                return Err(PresenceError::Parse {
                    line: i + 1,
                    reason: "expected uid, username, title and optional image ref separated by tabs".into(),
                });
            }
            dir.insert(cols[0], cols[1], cols[2]);
            if let Some(img) = cols.get(3) {
                dir.users.get_mut(cols[0]).expect("just inserted").image_ref = img.to_string();
            }
        }
        Ok(dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PresenceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

impl UserDirectory for MemoryDirectory {
    fn lookup(&self, uid: &str) -> Option<UserInfo> {
        self.users.get(uid).cloned()
    }
}

/// A change to one display slot. An empty `uid` clears the slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayEvent {
    pub time_ms: u64,
    pub slot: usize,
    pub uid: String,
    pub user: Option<UserInfo>,
}

impl fmt::Display for DisplayEvent {
    /// Scenario-file form: `<t_ms> EVENT <slot> <uid|->`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let uid = if self.uid.is_empty() { "-" } else { &self.uid };
        write!(f, "{} EVENT {} {}", self.time_ms, self.slot, uid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotView {
    pub index: usize,
    pub stat: SlotStat,
    pub uid: String,
    pub user: Option<UserInfo>,
}

#[derive(Debug, Clone)]
struct Slot {
    stat: SlotStat,
    uid: String,
    user: Option<UserInfo>,
}

#[derive(Debug, Clone, PartialEq)]
enum Timer {
    BlockExpiry { uid: String },
    InitialHold { slot: usize, uid: String },
    Clear { slot: usize, uid: String },
    Show { slot: usize, uid: String },
}

/// Fire order: time, then block expiries before slot timers, then slot
/// index, then scheduling order.
type TimerKey = (u64, u8, usize, u64);

pub struct PresenceState {
    config: PresenceConfig,
    directory: Box<dyn UserDirectory>,
    slots: Vec<Slot>,
    blocked: HashMap<String, u64>,
    wait_list: VecDeque<String>,
    timers: BTreeMap<TimerKey, Timer>,
    pending_clear: Vec<Option<TimerKey>>,
    seq: u64,
    now: u64,
}

impl fmt::Debug for PresenceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PresenceState")
            .field("config", &self.config)
            .field("slots", &self.slots)
            .field("blocked", &self.blocked)
            .field("wait_list", &self.wait_list)
            .field("timers", &self.timers)
            .field("now", &self.now)
            .finish()
    }
}

impl PresenceState {
    pub fn new(config: PresenceConfig, directory: Box<dyn UserDirectory>) -> Result<Self> {
        config.validate()?;
        let n = config.slot_count;
        Ok(Self {
            config,
            directory,
            slots: vec![
                Slot {
                    stat: SlotStat::Empty,
                    uid: String::new(),
                    user: None,
                };
                n
            ],
            blocked: HashMap::new(),
            wait_list: VecDeque::new(),
            timers: BTreeMap::new(),
            pending_clear: vec![None; n],
            seq: 0,
            now: 0,
        })
    }

    pub fn with_defaults() -> Self {
        Self::new(PresenceConfig::default(), Box::new(MemoryDirectory::new())).expect("default config is valid")
    }

    pub fn config(&self) -> &PresenceConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn wait_list(&self) -> impl Iterator<Item = &str> {
        self.wait_list.iter().map(String::as_str)
    }

    pub fn is_blocked(&self, uid: &str) -> bool {
        self.blocked.contains_key(uid)
    }

    /// Time of the earliest pending timer, if any.
    pub fn next_deadline(&self) -> Option<u64> {
        self.timers.keys().next().map(|k| k.0)
    }

    pub fn snapshot(&self) -> Vec<SlotView> {
        self.slots
            .iter()
            .enumerate()
            .map(|(index, s)| SlotView {
                index,
                stat: s.stat,
                uid: s.uid.clone(),
                user: s.user.clone(),
            })
            .collect()
    }

    /// Offers the top candidate of a recognition. Timers due by `now` fire
    /// first.
    pub fn on_candidate(&mut self, uid: &str, score: f64, now: u64) -> Result<Vec<DisplayEvent>> {
        if !score.is_finite() {
            return Err(PresenceError::InvalidArgument(format!("score must be finite, got {score}")));
        }
        let mut events = self.tick(now)?;
        if score <= self.config.threshold || uid.is_empty() || self.blocked.contains_key(uid) {
            return Ok(events);
        }
        let expiry = now + self.config.block_ms;
        self.blocked.insert(uid.to_string(), expiry);
        self.schedule(expiry, Timer::BlockExpiry { uid: uid.to_string() });

        if let Some(i) = self.slots.iter().position(|s| s.stat == SlotStat::Empty) {
            self.show(i, uid, now, &mut events);
        } else if let Some(i) = self.slots.iter().position(|s| s.stat == SlotStat::Replaceable) {
            if let Some(key) = self.pending_clear[i].take() {
                self.timers.remove(&key);
            }
            events.push(self.clear_event(i, now));
            self.set_stat(i, SlotStat::WaitForPush);
            self.schedule(
                now + self.config.pickup_delay_ms,
                Timer::Show {
                    slot: i,
                    uid: uid.to_string(),
                },
            );
        } else {
            self.wait_list.push_back(uid.to_string());
        }
        Ok(events)
    }

    /// Advances the clock to `now`, firing every due timer in order.
    pub fn tick(&mut self, now: u64) -> Result<Vec<DisplayEvent>> {
        if now < self.now {
            return Err(PresenceError::InvalidArgument(format!(
                "clock went backwards from {} to {now}",
                self.now
            )));
        }
        let mut events = Vec::new();
        while let Some(entry) = self.timers.first_entry() {
            if entry.key().0 > now {
                break;
            }
            let (key, timer) = entry.remove_entry();
            self.now = key.0;
            self.fire(key, timer, &mut events);
        }
        self.now = now;
        Ok(events)
    }

    fn fire(&mut self, key: TimerKey, timer: Timer, events: &mut Vec<DisplayEvent>) {
        let t = key.0;
        match timer {
            Timer::BlockExpiry { uid } => {
                if self.blocked.get(&uid) == Some(&t) {
                    self.blocked.remove(&uid);
                }
            }
            Timer::Show { slot, uid } => self.show(slot, &uid, t, events),
            Timer::InitialHold { slot, uid } => {
                if let Some(next) = self.wait_list.pop_front() {
                    self.set_stat(slot, SlotStat::PickedUpFromWl);
                    events.push(self.clear_event(slot, t));
                    self.schedule(t + self.config.pickup_delay_ms, Timer::Show { slot, uid: next });
                } else {
                    self.set_stat(slot, SlotStat::Replaceable);
                    let at = t + self.config.display_ms - self.config.initial_hold_ms;
                    let key = self.schedule(at, Timer::Clear { slot, uid });
                    self.pending_clear[slot] = Some(key);
                }
            }
            Timer::Clear { slot, uid } => {
                if self.pending_clear[slot] == Some(key) {
                    self.pending_clear[slot] = None;
                }
                let s = &self.slots[slot];
                if s.uid == uid && s.stat == SlotStat::Replaceable {
                    self.set_stat(slot, SlotStat::Empty);
                    self.slots[slot].uid.clear();
                    self.slots[slot].user = None;
                    events.push(self.clear_event(slot, t));
                }
            }
        }
    }

    fn show(&mut self, slot: usize, uid: &str, t: u64, events: &mut Vec<DisplayEvent>) {
        self.set_stat(slot, SlotStat::OnScreen);
        let user = self.directory.lookup(uid);
        let s = &mut self.slots[slot];
        s.uid = uid.to_string();
        s.user = user.clone();
        events.push(DisplayEvent {
            time_ms: t,
            slot,
            uid: uid.to_string(),
            user,
        });
        self.schedule(
            t + self.config.initial_hold_ms,
            Timer::InitialHold {
                slot,
                uid: uid.to_string(),
            },
        );
    }

    fn clear_event(&self, slot: usize, t: u64) -> DisplayEvent {
        DisplayEvent {
            time_ms: t,
            slot,
            uid: String::new(),
            user: None,
        }
    }

    fn set_stat(&mut self, slot: usize, to: SlotStat) {
        let from = self.slots[slot].stat;
        assert!(from.can_become(to), "illegal slot transition {from:?} -> {to:?} in slot {slot}");
        self.slots[slot].stat = to;
    }

    fn schedule(&mut self, at: u64, timer: Timer) -> TimerKey {
        let (class, slot) = match &timer {
            Timer::BlockExpiry { .. } => (0, 0),
            Timer::InitialHold { slot, .. } | Timer::Clear { slot, .. } | Timer::Show { slot, .. } => (1, *slot),
        };
        self.seq += 1;
        let key = (at, class, slot, self.seq);
        self.timers.insert(key, timer);
        key
    }
}

/// One input line of a scenario script.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioStep {
    Candidate { time_ms: u64, uid: String, score: f64 },
    Tick { time_ms: u64 },
}

/// A parsed scenario: optional `CONFIG key=value…` header plus steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: PresenceConfig,
    pub steps: Vec<ScenarioStep>,
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| PresenceError::Parse {
        line,
        reason: format!("bad {what}: {s:?}"),
    })
}

/// Parses `<t_ms> CAND <uid> <score>` / `<t_ms> TICK` lines. `#` starts a
/// comment. A `CONFIG` line may set `slots`, `threshold`, `block_ms`,
/// `display_ms`, `pickup_ms` and `hold_ms`.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut config = PresenceConfig::default();
    let mut steps = Vec::new();
    for (line, cols) in content_lines(text) {
        if cols[0] == "CONFIG" {
            for kv in &cols[1..] {
                let (k, v) = kv.split_once('=').ok_or_else(|| PresenceError::Parse {
                    line,
                    reason: format!("expected key=value, got {kv:?}"),
                })?;
                match k {
                    "slots" => config.slot_count = parse_num(v, line, k)?,
                    "threshold" => config.threshold = parse_num(v, line, k)?,
                    "block_ms" => config.block_ms = parse_num(v, line, k)?,
                    "display_ms" => config.display_ms = parse_num(v, line, k)?,
                    "pickup_ms" => config.pickup_delay_ms = parse_num(v, line, k)?,
                    "hold_ms" => config.initial_hold_ms = parse_num(v, line, k)?,
                    _ => {
                        return Err(PresenceError::Parse {
                            line,
                            reason: format!("unknown config key {k:?}"),
                        })
                    }
                }
            }
            continue;
        }
        let time_ms = parse_num(cols[0], line, "time")?;
        match (cols.get(1).copied(), cols.len()) {
            (Some("CAND"), 4) => steps.push(ScenarioStep::Candidate {
                time_ms,
                uid: cols[2].to_string(),
                score: parse_num(cols[3], line, "score")?,
            }),
            (Some("TICK"), 2) => steps.push(ScenarioStep::Tick { time_ms }),
            _ => {
                return Err(PresenceError::Parse {
                    line,
                    reason: "expected `<t> CAND <uid> <score>` or `<t> TICK`".into(),
                })
            }
        }
    }
    Ok(Scenario { config, steps })
}

/// Parses expected-event lines `<t_ms> EVENT <slot> <uid|->` into their
/// canonical printed form.
pub fn parse_expected_events(text: &str) -> Result<Vec<String>> {
    content_lines(text)
        .map(|(line, cols)| {
            if cols.len() != 4 || cols[1] != "EVENT" {
                return Err(PresenceError::Parse {
                    line,
                    reason: "expected `<t> EVENT <slot> <uid|->`".into(),
                });
            }
            let t: u64 = parse_num(cols[0], line, "time")?;
            let slot: usize = parse_num(cols[2], line, "slot")?;
            Ok(format!("{t} EVENT {slot} {}", cols[3]))
        })
        .collect()
}

/// Replays a scenario on a fresh state and returns every emitted event.
pub fn run_scenario(scenario: &Scenario, directory: Box<dyn UserDirectory>) -> Result<Vec<DisplayEvent>> {
    let mut state = PresenceState::new(scenario.config.clone(), directory)?;
    let mut events = Vec::new();
    for step in &scenario.steps {
        match step {
            ScenarioStep::Candidate { time_ms, uid, score } => {
                events.extend(state.on_candidate(uid, *score, *time_ms)?)
            }
            ScenarioStep::Tick { time_ms } => events.extend(state.tick(*time_ms)?),
        }
    }
    Ok(events)
}
