//! Deterministic discrete-event network of peers.
//!
//! Events are processed in `(time, insertion sequence)` order. All randomness
//! (latency draws, mining delays, generated payloads) comes from generators
//! seeded by the scenario, so a scenario always yields the same trace.
//!
//! # Scenario files
//!
//! JSON documents of this shape (all fields except `peers` and `script`
//! have defaults):
//!
//! ```json
//! {
//!   "seed": 7,
//!   "peers": [
//!     {"name": "alice", "mining_power": 3},
//!     {"name": "bob", "topics": ["invoices"], "mining_power": 0}
//!   ],
//!   "latency": {"min": 1, "max": 10},
//!   "mean_block_interval": 100,
//!   "poll_interval": 50,
//!   "chunk_size": 4096,
//!   "script": [
//!     {"at": 10, "action": "publish", "peer": "alice", "doc": "d1", "topic": "invoices", "size": 5000},
//!     {"at": 300, "action": "edit", "peer": "alice", "doc": "d1", "size": 700},
//!     {"at": 400, "action": "offline", "peer": "bob"},
//!     {"at": 900, "action": "online", "peer": "bob"},
//!     {"at": 950, "action": "partition", "groups": [["alice"], ["bob"]]},
//!     {"at": 1200, "action": "heal"},
//!     {"at": 1300, "action": "delete", "peer": "alice", "doc": "d1"}
//!   ]
//! }
//! ```
//!
//! # Trace format
//!
//! One event or state change per line, prefixed by its tick. The last line
//! is `digest <hex>`, the SHA-256 of every preceding line including its
//! newline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::crypto::{hash_bytes, Digest};
use crate::ledger::{ChainConfig, Task};
use crate::peer::{Ctx, Mode, Outbound, Peer, PeerConfig};
use crate::registry::{Location, LocationRegistry, PeerLocation};
use crate::wire::Message;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latency {
    pub min: u64,
    pub max: u64,
}

impl Default for Latency {
    fn default() -> Self {
        Latency { min: 1, max: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub topics: Vec<String>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_power")]
    pub mining_power: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub serve_corrupt: bool,
}

fn default_mode() -> Mode {
    Mode::EtherCouch
}

fn default_power() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum Action {
    Publish {
        peer: String,
        doc: String,
        topic: String,
        size: usize,
    },
    Edit {
        peer: String,
        doc: String,
        size: usize,
    },
    Delete {
        peer: String,
        doc: String,
    },
    Offline {
        peer: String,
    },
    Online {
        peer: String,
    },
    Partition {
        groups: Vec<Vec<String>>,
    },
    Heal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub peers: Vec<PeerSpec>,
    #[serde(default)]
    pub latency: Latency,
    #[serde(default = "default_block_interval")]
    pub mean_block_interval: u64,
    #[serde(default = "default_poll")]
    pub poll_interval: u64,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default = "default_max_txs")]
    pub max_txs_per_block: usize,
    #[serde(default)]
    pub difficulty_bits: u32,
    #[serde(default = "default_depth")]
    pub confirmation_depth: u64,
    /// Ticks to keep running after the last scripted action.
    #[serde(default = "default_settle")]
    pub settle: u64,
    pub script: Vec<Step>,
}

fn default_block_interval() -> u64 {
    100
}
fn default_poll() -> u64 {
    50
}
fn default_chunk() -> usize {
    crate::crypto::DEFAULT_CHUNK_SIZE
}
fn default_max_txs() -> usize {
    16
}
fn default_depth() -> u64 {
    1
}
fn default_settle() -> u64 {
    4000
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("scenario has no peers")]
    NoPeers,
    #[error("duplicate peer name `{0}`")]
    DuplicateName(String),
    #[error("peer name `{0}` must be 1 to 32 bytes")]
    BadName(String),
    #[error("no peer has positive mining power")]
    NoMiner,
    #[error("latency bounds must satisfy 1 <= min <= max (got {min}..{max})")]
    BadLatency { min: u64, max: u64 },
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("peer `{0}` uses plain mode, which has no chain to simulate")]
    PlainPeer(String),
    #[error("script step {index}: time {at} is before the previous step")]
    TimeOrder { index: usize, at: u64 },
    #[error("script step {index}: unknown peer `{peer}`")]
    UnknownPeer { index: usize, peer: String },
    #[error("script step {index}: document `{doc}` is not published earlier")]
    UnknownDoc { index: usize, doc: String },
    #[error("script step {index}: document `{doc}` is already published")]
    DuplicateDoc { index: usize, doc: String },
    #[error("confirmation depth must be at least 1")]
    BadDepth,
    #[error("invalid scenario file: {0}")]
    Parse(String),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.peers.is_empty() {
            return Err(ScenarioError::NoPeers);
        }
        let mut names = BTreeSet::new();
        for p in &self.peers {
            if p.name.is_empty() || p.name.len() > 32 {
                return Err(ScenarioError::BadName(p.name.clone()));
            }
            if !names.insert(p.name.as_str()) {
                return Err(ScenarioError::DuplicateName(p.name.clone()));
            }
            if p.mode == Mode::PlainBaseline {
                return Err(ScenarioError::PlainPeer(p.name.clone()));
            }
        }
        if self.peers.iter().all(|p| p.mining_power == 0) {
            return Err(ScenarioError::NoMiner);
        }
        let Latency { min, max } = self.latency;
        if min < 1 || min > max {
            return Err(ScenarioError::BadLatency { min, max });
        }
        for (v, name) in [
            (self.mean_block_interval, "mean_block_interval"),
            (self.poll_interval, "poll_interval"),
            (self.chunk_size as u64, "chunk_size"),
            (self.max_txs_per_block as u64, "max_txs_per_block"),
        ] {
            if v == 0 {
                return Err(ScenarioError::NotPositive(name));
            }
        }
        if self.confirmation_depth == 0 {
            return Err(ScenarioError::BadDepth);
        }
        let mut last = 0;
        let mut docs = BTreeSet::new();
        for (index, step) in self.script.iter().enumerate() {
            if step.at < last {
                return Err(ScenarioError::TimeOrder { index, at: step.at });
            }
            last = step.at;
            let mut peers: Vec<&String> = Vec::new();
            match &step.action {
                Action::Publish { peer, doc, .. } => {
                    peers.push(peer);
                    if !docs.insert(doc.as_str()) {
                        return Err(ScenarioError::DuplicateDoc { index, doc: doc.clone() });
                    }
                }
                Action::Edit { peer, doc, .. } | Action::Delete { peer, doc } => {
                    peers.push(peer);
                    if !docs.contains(doc.as_str()) {
                        return Err(ScenarioError::UnknownDoc { index, doc: doc.clone() });
                    }
                }
                Action::Offline { peer } | Action::Online { peer } => peers.push(peer),
                Action::Partition { groups } => peers.extend(groups.iter().flatten()),
                Action::Heal => {}
            }
            for peer in peers {
                if !names.contains(peer.as_str()) {
                    return Err(ScenarioError::UnknownPeer {
                        index,
                        peer: peer.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Last scripted time plus the settle period.
    pub fn default_until(&self) -> u64 {
        self.script.last().map_or(0, |s| s.at) + self.settle
    }
}

pub fn topic_digest(label: &str) -> Digest {
    hash_bytes(format!("topic:{label}").as_bytes())
}

pub fn editor_digest(name: &str) -> Digest {
    hash_bytes(format!("peer:{name}").as_bytes())
}

/// Maintenance-ticket payload: a short text header followed by seeded bytes.
pub fn ticket_payload(seed: u64, label: &str, size: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_be_bytes(hash_bytes(label.as_bytes()).0[..8].try_into().unwrap()));
    let mut out = format!("ticket {label}\n").into_bytes();
    out.truncate(size);
    let start = out.len();
    out.resize(size, 0);
    rng.fill_bytes(&mut out[start..]);
    out
}

/// Running trace of a simulation.
#[derive(Debug, Clone)]
pub struct Trace {
    hasher: Sha256,
    lines: Vec<String>,
    keep_lines: bool,
    count: u64,
}

impl Trace {
    pub fn new(keep_lines: bool) -> Self {
        Trace {
            hasher: Sha256::new(),
            lines: Vec::new(),
            keep_lines,
            count: 0,
        }
    }

    pub fn record(&mut self, line: String) {
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if self.keep_lines {
            self.lines.push(line);
        }
    }

    pub fn digest(&self) -> Digest {
        Digest(self.hasher.clone().finalize().into())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Retained lines followed by the digest line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        let _ = writeln!(out, "digest {}", self.digest());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Deliver { from: usize, msg: Message },
    MineComplete,
    GoOffline,
    GoOnline,
    Partition(Vec<Vec<String>>),
    Heal,
    UserAction(usize),
    PollTick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub at: u64,
    pub kind: EventKind,
    pub target: usize,
}

/// Per-tick block probability for a miner: `weight / (total * mean)`.
pub fn mining_probability(weight: u64, total_weight: u64, mean_interval: u64) -> f64 {
    (weight as f64 / (total_weight as f64 * mean_interval as f64)).min(1.0)
}

/// Ticks until the next block of a miner with per-tick probability `p`.
pub fn sample_mining_delay<R: Rng + ?Sized>(rng: &mut R, p: f64) -> u64 {
    if p >= 1.0 {
        return 1;
    }
    1 + Geometric::new(p).expect("probability in (0, 1)").sample(rng)
}

pub struct Simulation {
    scenario: Scenario,
    peers: Vec<Peer>,
    names: Vec<String>,
    by_editor: BTreeMap<Digest, usize>,
    by_location: BTreeMap<String, usize>,
    locations: LocationRegistry,
    queue: BTreeMap<(u64, u64), SimEvent>,
    seq: u64,
    now: u64,
    net_rng: ChaCha8Rng,
    mine_rng: ChaCha8Rng,
    mine_p: Vec<f64>,
    mining_scheduled: Vec<u64>,
    groups: Option<Vec<usize>>,
    docs: BTreeMap<String, Digest>,
    trace: Trace,
    events: u64,
    check_every_event: bool,
    violations: Vec<String>,
}

impl Simulation {
    pub fn new(scenario: Scenario, keep_trace_lines: bool) -> Result<Simulation, ScenarioError> {
        scenario.validate()?;
        let mut locations = LocationRegistry::new();
        let mut peers = Vec::new();
        let mut by_editor = BTreeMap::new();
        let mut by_location = BTreeMap::new();
        for (i, spec) in scenario.peers.iter().enumerate() {
            let editor = editor_digest(&spec.name);
            let mut cfg = PeerConfig::new(editor, spec.mode);
            cfg.topics = spec.topics.iter().map(|t| topic_digest(t)).collect();
            cfg.confirmation_depth = scenario.confirmation_depth;
            cfg.chain = ChainConfig {
                difficulty_bits: scenario.difficulty_bits,
                chunk_size: scenario.chunk_size,
                allow_empty_blocks: false,
            };
            cfg.max_txs_per_block = scenario.max_txs_per_block;
            cfg.request_timeout = 2 * scenario.latency.max + 2;
            cfg.retry_base = scenario.poll_interval;
            cfg.retry_cap = 16 * scenario.poll_interval;
            cfg.serve_corrupt = spec.serve_corrupt;
            peers.push(Peer::new(cfg));
            locations.register_peer(PeerLocation {
                editor_hash: editor,
                location: Location::new(spec.name.clone()).expect("validated name length"),
            });
            by_editor.insert(editor, i);
            by_location.insert(spec.name.clone(), i);
        }
        let total: u64 = scenario.peers.iter().map(|p| p.mining_power).sum();
        let mine_p = scenario
            .peers
            .iter()
            .map(|p| mining_probability(p.mining_power, total, scenario.mean_block_interval))
            .collect();
        let mut seed_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let net_rng = ChaCha8Rng::seed_from_u64(seed_rng.next_u64());
        let mine_rng = ChaCha8Rng::seed_from_u64(seed_rng.next_u64());
        let n = peers.len();
        let mut sim = Simulation {
            names: scenario.peers.iter().map(|p| p.name.clone()).collect(),
            scenario,
            peers,
            by_editor,
            by_location,
            locations,
            queue: BTreeMap::new(),
            seq: 0,
            now: 0,
            net_rng,
            mine_rng,
            mine_p,
            mining_scheduled: vec![0; n],
            groups: None,
            docs: BTreeMap::new(),
            trace: Trace::new(keep_trace_lines),
            events: 0,
            check_every_event: false,
            violations: Vec::new(),
        };
        for (i, step) in sim.scenario.script.clone().iter().enumerate() {
            let (kind, target) = match &step.action {
                Action::Offline { peer } => (EventKind::GoOffline, sim.by_location[peer]),
                Action::Online { peer } => (EventKind::GoOnline, sim.by_location[peer]),
                Action::Partition { groups } => (EventKind::Partition(groups.clone()), 0),
                Action::Heal => (EventKind::Heal, 0),
                Action::Publish { peer, .. } | Action::Edit { peer, .. } | Action::Delete { peer, .. } => {
                    (EventKind::UserAction(i), sim.by_location[peer])
                }
            };
            sim.push(step.at, kind, target);
        }
        let poll = sim.scenario.poll_interval;
        for i in 0..n {
            sim.push(1 + (i as u64 * poll) / n as u64, EventKind::PollTick, i);
            sim.schedule_mining(i);
        }
        Ok(sim)
    }

    /// Audit every peer after every event and collect violations.
    pub fn set_check_every_event(&mut self, on: bool) {
        self.check_every_event = on;
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    fn push(&mut self, at: u64, kind: EventKind, target: usize) {
        assert!(at >= self.now, "event scheduled in the past");
        self.queue.insert((at, self.seq), SimEvent { at, kind, target });
        self.seq += 1;
    }

    fn schedule_mining(&mut self, peer: usize) {
        let p = self.mine_p[peer];
        if p <= 0.0 {
            return;
        }
        let delay = sample_mining_delay(&mut self.mine_rng, p);
        self.mining_scheduled[peer] += 1;
        self.push(self.now + delay, EventKind::MineComplete, peer);
    }

    /// Number of block completions ever scheduled for `peer`.
    pub fn mining_scheduled(&self, peer: usize) -> u64 {
        self.mining_scheduled[peer]
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn peers(&self) -> &[Peer] {
        &self.peers
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn locations(&self) -> &LocationRegistry {
        &self.locations
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn events_processed(&self) -> u64 {
        self.events
    }

    /// Lineage id published under a script document label.
    pub fn doc(&self, label: &str) -> Option<Digest> {
        self.docs.get(label).copied()
    }

    pub fn all_quiescent(&self) -> bool {
        self.peers.iter().all(Peer::is_quiescent)
    }

    /// Processes every event scheduled at or before `until`.
    pub fn run_until(&mut self, until: u64) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > until {
                break;
            }
            let ev = entry.remove();
            self.now = ev.at;
            self.events += 1;
            self.dispatch(ev);
            if self.check_every_event {
                for (i, p) in self.peers.iter().enumerate() {
                    for v in p.audit() {
                        self.violations.push(format!("{} {}: {v}", self.now, self.names[i]));
                    }
                }
            }
        }
        self.now = self.now.max(until);
    }

    fn dispatch(&mut self, ev: SimEvent) {
        let t = ev.target;
        match ev.kind {
            EventKind::Deliver { from, msg } => {
                let kind = msg.kind();
                if let Some(reason) = self.blocked(from, t) {
                    self.trace.record(format!("{} drop {}->{} {kind} {reason}", self.now, self.names[from], self.names[t]));
                    return;
                }
                self.trace.record(format!("{} deliver {}->{} {kind}", self.now, self.names[from], self.names[t]));
                let sender = self.peers[from].editor();
                let out = self.with_ctx(t, |p, ctx| p.handle_message(ctx, sender, msg));
                self.route(t, out);
            }
            EventKind::MineComplete => {
                let out = self.with_ctx(t, |p, ctx| p.mine(ctx));
                self.route(t, out);
                self.schedule_mining(t);
            }
            EventKind::GoOffline => {
                self.trace.record(format!("{} offline {}", self.now, self.names[t]));
                self.peers[t].go_offline();
                self.flush_journal(t);
            }
            EventKind::GoOnline => {
                self.trace.record(format!("{} online {}", self.now, self.names[t]));
                let out = self.with_ctx(t, |p, ctx| p.go_online(ctx));
                self.route(t, out);
            }
            EventKind::Partition(groups) => {
                let mut assign = vec![usize::MAX; self.peers.len()];
                for (g, members) in groups.iter().enumerate() {
                    for m in members {
                        assign[self.by_location[m]] = g;
                    }
                }
                let desc: Vec<String> = groups.iter().map(|g| g.join(",")).collect();
                self.trace.record(format!("{} partition {}", self.now, desc.join("|")));
                self.groups = Some(assign);
            }
            EventKind::Heal => {
                self.trace.record(format!("{} heal", self.now));
                self.groups = None;
            }
            EventKind::UserAction(i) => self.user_action(i),
            EventKind::PollTick => {
                let out = self.with_ctx(t, |p, ctx| p.poll(ctx));
                self.route(t, out);
                let next = self.now + self.scenario.poll_interval;
                self.push(next, EventKind::PollTick, t);
            }
        }
    }

    fn user_action(&mut self, index: usize) {
        let step = self.scenario.script[index].clone();
        let seed = self.scenario.seed;
        let (peer, task, doc, payload, topic) = match &step.action {
            Action::Publish { peer, doc, topic, size } => {
                let label = format!("{doc}#{index}");
                (peer, Task::Add, doc, Some(ticket_payload(seed, &label, *size)), topic_digest(topic))
            }
            Action::Edit { peer, doc, size } => {
                let label = format!("{doc}#{index}");
                (peer, Task::Edit, doc, Some(ticket_payload(seed, &label, *size)), Digest::ZERO)
            }
            Action::Delete { peer, doc } => (peer, Task::Delete, doc, None, Digest::ZERO),
            _ => unreachable!("only mutations are user actions"),
        };
        let i = self.by_location[peer];
        let lineage = match task {
            Task::Add => None,
            _ => match self.docs.get(doc) {
                Some(l) => Some(*l),
                None => {
                    self.trace.record(format!("{} skip {} {task} {doc} unknown-document", self.now, peer));
                    return;
                }
            },
        };
        let result = self.with_ctx(i, |p, ctx| p.publish(ctx, task, lineage, payload, topic));
        match result {
            Ok((tx, out)) => {
                self.trace.record(format!(
                    "{} user {} {task} {doc} {} seq={}",
                    self.now,
                    peer,
                    tx.lineage_id(),
                    tx.sequence_id
                ));
                if task == Task::Add {
                    self.docs.insert(doc.clone(), tx.id());
                }
                self.route(i, out);
            }
            Err(e) => {
                self.trace.record(format!("{} skip {} {task} {doc} {e}", self.now, peer));
                self.flush_journal(i);
            }
        }
    }

    fn with_ctx<R>(&mut self, i: usize, f: impl FnOnce(&mut Peer, &mut Ctx<'_>) -> R) -> R {
        let mut ctx = Ctx {
            now: self.now,
            locations: &mut self.locations,
        };
        let r = f(&mut self.peers[i], &mut ctx);
        self.flush_journal(i);
        r
    }

    fn flush_journal(&mut self, i: usize) {
        for line in self.peers[i].drain_journal() {
            self.trace.record(format!("{} {} {line}", self.now, self.names[i]));
        }
    }

    fn blocked(&self, from: usize, to: usize) -> Option<&'static str> {
        if let Some(g) = &self.groups {
            if g[from] != g[to] {
                return Some("partition");
            }
        }
        if !self.peers[to].is_online() {
            return Some("offline");
        }
        None
    }

    fn route(&mut self, from: usize, out: Vec<Outbound>) {
        for o in out {
            match o {
                Outbound::To(editor, msg) => {
                    let to = self
                        .locations
                        .get_peer_location(&editor)
                        .ok()
                        .and_then(|loc| self.by_location.get(loc.as_str()).copied())
                        .or_else(|| self.by_editor.get(&editor).copied());
                    match to {
                        Some(to) if to != from => self.send(from, to, msg),
                        _ => self
                            .trace
                            .record(format!("{} drop {}->? {} unknown-peer", self.now, self.names[from], msg.kind())),
                    }
                }
                Outbound::Broadcast(msg) => {
                    for to in 0..self.peers.len() {
                        if to != from {
                            self.send(from, to, msg.clone());
                        }
                    }
                }
            }
        }
    }

    /// Schedules a delivery after a seeded latency draw, or drops the
    /// message when the pair is cut off right now.
    pub fn send(&mut self, from: usize, to: usize, msg: Message) {
        if let Some(reason) = self.blocked(from, to) {
            self.trace
                .record(format!("{} drop {}->{} {} {reason}", self.now, self.names[from], self.names[to], msg.kind()));
            return;
        }
        let Latency { min, max } = self.scenario.latency;
        let at = self.now + self.net_rng.random_range(min..=max);
        self.trace.record(format!(
            "{} send {}->{} {} {}B @{at}",
            self.now,
            self.names[from],
            self.names[to],
            msg.kind(),
            msg.encode().len()
        ));
        self.push(at, EventKind::Deliver { from, msg }, to);
    }

    /// Appends the final state summary to the trace and returns its digest.
    pub fn finish(&mut self) -> Digest {
        for i in 0..self.peers.len() {
            let p = &self.peers[i];
            let line = format!(
                "{} final {} tip={} height={} store={}",
                self.now,
                self.names[i],
                p.chain().tip(),
                p.chain().tip_height(),
                hash_bytes(&p.store().encode_snapshot())
            );
            self.trace.record(line);
        }
        self.trace.digest()
    }
}

/// Runs a scenario to `until` (or its default end) and returns the finished
/// simulation.
pub fn run(scenario: Scenario, until: Option<u64>, keep_trace_lines: bool) -> Result<Simulation, ScenarioError> {
    let until = until.unwrap_or_else(|| scenario.default_until());
    let mut sim = Simulation::new(scenario, keep_trace_lines)?;
    sim.run_until(until);
    sim.finish();
    Ok(sim)
}

/// Random scenario for convergence testing: 3 to 7 peers, 20 to 60
/// mutations, offline windows, one partition and heal, and every peer back
/// online before the script ends.
pub fn random_convergence_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=7usize);
    let topics = ["maintenance", "invoices", "inspections"];
    let filtered = rng.random_bool(0.3);
    let peers: Vec<PeerSpec> = (0..n)
        .map(|i| PeerSpec {
            name: format!("p{i}"),
            topics: if filtered && i == n - 1 {
                vec![topics[rng.random_range(0..topics.len())].to_string()]
            } else {
                Vec::new()
            },
            mode: Mode::EtherCouch,
            mining_power: if i == 0 { rng.random_range(1..=3) } else { rng.random_range(0..=3) },
            serve_corrupt: false,
        })
        .collect();
    let m = rng.random_range(20..=60usize);
    let chunk_size = 512;
    let span = m as u64 * 40;
    let mut steps: Vec<Step> = Vec::new();
    let mut live: Vec<(String, usize)> = Vec::new();
    let mut doc_count = 0;
    let mut t = 5;
    for _ in 0..m {
        t += rng.random_range(1..=80);
        let roll = rng.random_range(0..100);
        if live.is_empty() || roll < 45 {
            let creator = rng.random_range(0..n);
            let doc = format!("d{doc_count}");
            doc_count += 1;
            steps.push(Step {
                at: t,
                action: Action::Publish {
                    peer: format!("p{creator}"),
                    doc: doc.clone(),
                    topic: topics[rng.random_range(0..topics.len())].to_string(),
                    size: rng.random_range(32..=3 * chunk_size),
                },
            });
            live.push((doc, creator));
        } else {
            let k = rng.random_range(0..live.len());
            let (doc, creator) = live[k].clone();
            let editor = if rng.random_bool(0.15) { rng.random_range(0..n) } else { creator };
            if roll < 85 {
                steps.push(Step {
                    at: t,
                    action: Action::Edit {
                        peer: format!("p{editor}"),
                        doc,
                        size: rng.random_range(32..=3 * chunk_size),
                    },
                });
            } else {
                steps.push(Step {
                    at: t,
                    action: Action::Delete {
                        peer: format!("p{editor}"),
                        doc,
                    },
                });
                live.remove(k);
            }
        }
    }
    let end = t.max(span);
    for i in 0..n {
        if rng.random_bool(0.5) {
            let a = rng.random_range(1..end);
            let b = (a + rng.random_range(50..=600)).min(end);
            steps.push(Step {
                at: a,
                action: Action::Offline { peer: format!("p{i}") },
            });
            steps.push(Step {
                at: b,
                action: Action::Online { peer: format!("p{i}") },
            });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let cut = rng.random_range(1..n);
    let a = rng.random_range(1..end);
    let b = (a + rng.random_range(100..=800)).min(end);
    let group = |ids: &[usize]| ids.iter().map(|i| format!("p{i}")).collect::<Vec<_>>();
    steps.push(Step {
        at: a,
        action: Action::Partition {
            groups: vec![group(&order[..cut]), group(&order[cut..])],
        },
    });
    steps.push(Step {
        at: b,
        action: Action::Heal,
    });
    // Stable sort keeps each offline before its matching online at equal times.
    steps.sort_by_key(|s| s.at);
    Scenario {
        seed,
        peers,
        latency: Latency::default(),
        mean_block_interval: 100,
        poll_interval: 50,
        chunk_size,
        max_txs_per_block: 16,
        difficulty_bits: 0,
        confirmation_depth: 1,
        settle: 4000,
        script: steps,
    }
}
