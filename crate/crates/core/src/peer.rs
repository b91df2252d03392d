//! Peer state machine.
//!
//! A peer owns one chain replica and one document store. It publishes
//! records, reacts to chain changes, fetches payloads off-chain from other
//! peers (verifying every chunk against the on-chain root), serves what it
//! holds and resynchronises after downtime.
//!
//! All entry points take a [`Ctx`] and return the messages to send. The peer
//! never talks to the network directly, so the same code runs under the
//! simulator and under the benchmark driver.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{chunk_payload, merkle_prove, payload_root, verify_chunk, Digest};
use crate::docstore::{Active, ApplyOutcome, Revision, StoreError, StoreState};
use crate::ledger::{Block, ChainConfig, ChainState, DbFunction, LedgerError, ReorgReport, Task, TxPos};
use crate::registry::{LocationRegistry, RejectReason};
use crate::wire::{ChunkBundle, Message, RefusalReason, Request, ALL_CHUNKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "ethercouch")]
    EtherCouch,
    #[serde(rename = "chain-only")]
    ChainOnly,
    #[serde(rename = "plain")]
    PlainBaseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::PlainBaseline, Mode::EtherCouch, Mode::ChainOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::EtherCouch => "ethercouch",
            Mode::ChainOnly => "chain-only",
            Mode::PlainBaseline => "plain",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ethercouch" => Ok(Mode::EtherCouch),
            "chain-only" | "chainonly" => Ok(Mode::ChainOnly),
            "plain" | "plain-baseline" | "plainbaseline" => Ok(Mode::PlainBaseline),
            other => Err(format!("unknown mode `{other}` (expected ethercouch, chain-only or plain)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerConfig {
    pub editor_hash: Digest,
    /// Replicated topics; empty means every topic.
    pub topics: BTreeSet<Digest>,
    /// Blocks on top of a record (inclusive) before it is applied.
    pub confirmation_depth: u64,
    pub mode: Mode,
    pub chain: ChainConfig,
    pub max_txs_per_block: usize,
    /// Ticks to wait for a response before trying the next source.
    pub request_timeout: u64,
    pub retry_base: u64,
    pub retry_cap: u64,
    /// Requests per fetch round before the record is marked unavailable.
    pub max_attempts: u32,
    /// Fault injection: flip a byte in every served chunk bundle.
    pub serve_corrupt: bool,
}

impl PeerConfig {
    pub fn new(editor_hash: Digest, mode: Mode) -> Self {
        PeerConfig {
            editor_hash,
            topics: BTreeSet::new(),
            confirmation_depth: 1,
            mode,
            chain: ChainConfig::default(),
            max_txs_per_block: 16,
            request_timeout: 25,
            retry_base: 50,
            retry_cap: 800,
            max_attempts: 8,
            serve_corrupt: false,
        }
    }

    pub fn accepts_topic(&self, topic: &Digest) -> bool {
        self.topics.is_empty() || self.topics.contains(topic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchState {
    AwaitingConfirm,
    Fetching,
    Buffered,
    Applied,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingFetch {
    pub tx: DbFunction,
    pub lineage: Digest,
    pub topic_id: Digest,
    /// Source order computed for the current round.
    pub candidates: Vec<Digest>,
    pub tried: BTreeSet<Digest>,
    pub blacklist: BTreeSet<Digest>,
    pub attempts: u32,
    pub rounds: u32,
    pub state: FetchState,
    pub source: Option<Digest>,
    pub deadline: u64,
    pub next_retry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    To(Digest, Message),
    Broadcast(Message),
}

/// Per-call environment: the simulated clock and the shared peer directory.
pub struct Ctx<'a> {
    pub now: u64,
    pub locations: &'a mut LocationRegistry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PeerStats {
    pub payload_bytes_fetched: u64,
    pub payload_bytes_served: u64,
    pub requests_sent: u64,
    pub integrity_failures: u64,
    pub refusals: u64,
    pub blocks_mined: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PublishError {
    #[error(transparent)]
    Rejected(#[from] RejectReason),
    #[error("lineage {0} is not held at its latest revision")]
    NotHolder(Digest),
    #[error("{0} needs a payload")]
    MissingPayload(Task),
    #[error("{0} takes a lineage")]
    MissingLineage(Task),
    #[error("store rejected the record: {0}")]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Cached {
    lineage: Digest,
    seq: u64,
    topic_id: Digest,
    payload: Vec<u8>,
    own: bool,
}

enum Local {
    Done,
    Buffered,
    Fetch,
}

#[derive(Debug, Clone)]
pub struct Peer {
    config: PeerConfig,
    chain: ChainState,
    store: StoreState,
    pending: BTreeMap<TxPos, PendingFetch>,
    cache: BTreeMap<Digest, Cached>,
    online: bool,
    plain_height: u64,
    chain_ops: Cell<u64>,
    stats: PeerStats,
    journal: Vec<String>,
}

impl Peer {
    pub fn new(config: PeerConfig) -> Self {
        let chain = ChainState::new(config.chain);
        let store = StoreState::new(config.chain.chunk_size);
        Peer {
            config,
            chain,
            store,
            pending: BTreeMap::new(),
            cache: BTreeMap::new(),
            online: true,
            plain_height: 0,
            chain_ops: Cell::new(0),
            stats: PeerStats::default(),
            journal: Vec::new(),
        }
    }

    pub fn config(&self) -> &PeerConfig {
        &self.config
    }

    pub fn editor(&self) -> Digest {
        self.config.editor_hash
    }

    pub fn chain(&self) -> &ChainState {
        self.chain_ops.set(self.chain_ops.get() + 1);
        &self.chain
    }

    fn chain_mut(&mut self) -> &mut ChainState {
        self.chain_ops.set(self.chain_ops.get() + 1);
        &mut self.chain
    }

    /// Number of chain accesses so far.
    pub fn chain_ops(&self) -> u64 {
        self.chain_ops.get()
    }

    pub fn store(&self) -> &StoreState {
        &self.store
    }

    pub fn stats(&self) -> &PeerStats {
        &self.stats
    }

    pub fn is_online(&self) -> bool {
        self.online
    }

    pub fn pending(&self) -> &BTreeMap<TxPos, PendingFetch> {
        &self.pending
    }

    pub fn fetch_state(&self, tx: &DbFunction) -> Option<FetchState> {
        if self.store.has_revision(&tx.lineage_id(), tx.sequence_id) {
            return Some(FetchState::Applied);
        }
        self.pending.values().find(|p| &p.tx == tx).map(|p| p.state)
    }

    /// Nothing left to fetch, apply or mine.
    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty() && self.store.held_count() == 0 && self.chain.mempool().is_empty()
    }

    pub fn drain_journal(&mut self) -> Vec<String> {
        std::mem::take(&mut self.journal)
    }

    /// Local read of the active revision; never touches the chain.
    pub fn read_active(&self, lineage: &Digest) -> Active<'_> {
        self.store.get_active(lineage)
    }

    pub fn history(&self, lineage: &Digest) -> Result<&[Revision], StoreError> {
        self.store.history(lineage)
    }

    /// True when this peer can author the next revision of `lineage`.
    pub fn holds_latest(&self, lineage: &Digest) -> bool {
        let Some(state) = self.chain().pending_lineage(lineage) else {
            return false;
        };
        if state.deleted {
            return false;
        }
        if self.store.document(lineage).is_some_and(|d| d.max_seq() == state.latest_seq) {
            return true;
        }
        self.cache
            .values()
            .any(|c| c.own && c.lineage == *lineage && c.seq == state.latest_seq)
    }

    /// Builds, submits and announces a mutation. Add and Edit need a
    /// payload; Edit and Delete need the lineage. Edits and deletes inherit
    /// the lineage's topic.
    pub fn publish(
        &mut self,
        ctx: &mut Ctx<'_>,
        task: Task,
        lineage: Option<Digest>,
        payload: Option<Vec<u8>>,
        topic: Digest,
    ) -> Result<(DbFunction, Vec<Outbound>), PublishError> {
        if task != Task::Delete && payload.is_none() {
            return Err(PublishError::MissingPayload(task));
        }
        if self.config.mode == Mode::PlainBaseline {
            return self.publish_plain(task, lineage, payload, topic);
        }
        let chunk_size = self.config.chain.chunk_size;
        let editor = self.editor();
        let mut tx = match task {
            Task::Add => DbFunction::add(payload_root(payload.as_deref().unwrap(), chunk_size), editor, topic),
            Task::Edit | Task::Delete => {
                let lineage = lineage.ok_or(PublishError::MissingLineage(task))?;
                let state = self
                    .chain()
                    .pending_lineage(&lineage)
                    .ok_or(RejectReason::UnknownLineage)?;
                if state.deleted {
                    return Err(RejectReason::AlreadyDeleted.into());
                }
                if !self.holds_latest(&lineage) {
                    return Err(PublishError::NotHolder(lineage));
                }
                let seq = state.latest_seq + 1;
                if task == Task::Edit {
                    let root = payload_root(payload.as_deref().unwrap(), chunk_size);
                    DbFunction::edit(lineage, seq, root, editor, state.topic_id)
                } else {
                    DbFunction::delete(lineage, seq, editor, state.topic_id)
                }
            }
        };
        if self.config.mode == Mode::ChainOnly {
            if let Some(p) = &payload {
                tx = tx.with_inline(p.clone());
            }
        }
        match self.chain_mut().submit_tx(tx.clone()) {
            Ok(_) => {}
            Err(LedgerError::Rejected(r)) => return Err(r.into()),
            Err(LedgerError::EmptyMempool) => unreachable!(),
        }
        if let (Mode::EtherCouch, Some(p)) = (self.config.mode, payload) {
            let lineage_id = tx.lineage_id();
            let topic_id = self.chain.pending_lineage(&lineage_id).map_or(tx.topic_id, |s| s.topic_id);
            self.cache.insert(
                tx.data_hash,
                Cached {
                    lineage: lineage_id,
                    seq: tx.sequence_id,
                    topic_id,
                    payload: p,
                    own: true,
                },
            );
        }
        self.journal.push(format!("publish {} {} {}", tx.task, tx.lineage_id().short(), tx.sequence_id));
        let mut out = Vec::new();
        if self.online {
            out.push(Outbound::Broadcast(Message::TxAnnounce(tx.clone())));
        }
        out.extend(self.settle(ctx));
        Ok((tx, out))
    }

    fn publish_plain(
        &mut self,
        task: Task,
        lineage: Option<Digest>,
        payload: Option<Vec<u8>>,
        topic: Digest,
    ) -> Result<(DbFunction, Vec<Outbound>), PublishError> {
        let editor = self.editor();
        // No hashing in plain mode: a row counter stands in for the data hash.
        let mut row = [0u8; 32];
        row[24..].copy_from_slice(&(self.plain_height + 1).to_be_bytes());
        let row = Digest(row);
        let tx = match task {
            Task::Add => DbFunction::add(row, editor, topic),
            _ => {
                let lineage = lineage.ok_or(PublishError::MissingLineage(task))?;
                let doc = self.store.document(&lineage).ok_or(RejectReason::UnknownLineage)?;
                let seq = doc.max_seq() + 1;
                if task == Task::Edit {
                    DbFunction::edit(lineage, seq, row, editor, doc.topic_id)
                } else {
                    DbFunction::delete(lineage, seq, editor, doc.topic_id)
                }
            }
        };
        self.plain_height += 1;
        self.store.apply_trusted(&tx, payload, TxPos::new(self.plain_height, 0))?;
        Ok((tx, Vec::new()))
    }

    /// Mines one block from the mempool, adopts it and announces it.
    pub fn mine(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outbound> {
        if !self.online || self.config.mode == Mode::PlainBaseline {
            return Vec::new();
        }
        let editor = self.editor();
        let max = self.config.max_txs_per_block;
        let Ok(block) = self.chain().mine_block(editor, max) else {
            return Vec::new();
        };
        self.stats.blocks_mined += 1;
        self.journal.push(format!(
            "mine {} {} txs={}",
            block.height,
            block.block_hash.short(),
            block.txs.len()
        ));
        let mut out = vec![Outbound::Broadcast(Message::BlockAnnounce(block.clone()))];
        match self.chain_mut().adopt_block(block) {
            Ok(report) => out.extend(self.on_report(ctx, report)),
            Err(e) => self.journal.push(format!("self-reject {e}")),
        }
        out.extend(self.settle(ctx));
        out
    }

    pub fn handle_message(&mut self, ctx: &mut Ctx<'_>, from: Digest, msg: Message) -> Vec<Outbound> {
        if !self.online {
            return Vec::new();
        }
        let mut out = Vec::new();
        match msg {
            Message::Request(req) => {
                let reply = self.serve_request(&req);
                match &reply {
                    Message::Response(b) => self.stats.payload_bytes_served += b.payload_len() as u64,
                    Message::Refusal { reason, .. } => self.journal.push(format!(
                        "refuse {} {} {reason}",
                        req.lineage.short(),
                        req.seq
                    )),
                    _ => {}
                }
                out.push(Outbound::To(from, reply));
            }
            Message::Response(bundle) => self.on_bundle(ctx.now, from, bundle),
            Message::Refusal { lineage, seq, .. } => {
                self.stats.refusals += 1;
                for pf in self.pending.values_mut() {
                    if pf.lineage == lineage
                        && pf.tx.sequence_id == seq
                        && pf.state == FetchState::Fetching
                        && pf.source == Some(from)
                    {
                        pf.deadline = ctx.now;
                    }
                }
            }
            Message::BlockAnnounce(block) => {
                if self.config.mode == Mode::PlainBaseline {
                    return out;
                }
                match self.chain_mut().adopt_block(block) {
                    Ok(r) if r.orphaned => out.push(Outbound::To(from, self.block_request())),
                    Ok(r) => out.extend(self.on_report(ctx, r)),
                    Err(e) => self.journal.push(format!("reject-block {e}")),
                }
            }
            Message::BlockRequest { from_height, locator } => {
                let start = self.fork_point(&locator).map_or(1, |h| h + 1).min(from_height.max(1));
                let blocks = self.chain().blocks_from(start);
                if !blocks.is_empty() {
                    out.push(Outbound::To(from, Message::BlockRange(blocks)));
                }
            }
            Message::BlockRange(blocks) => {
                if self.config.mode == Mode::PlainBaseline {
                    return out;
                }
                for block in blocks {
                    match self.chain_mut().adopt_block(block) {
                        Ok(r) if r.orphaned => {}
                        Ok(r) => out.extend(self.on_report(ctx, r)),
                        Err(e) => self.journal.push(format!("reject-block {e}")),
                    }
                }
            }
            Message::TxAnnounce(tx) => {
                if self.config.mode != Mode::PlainBaseline {
                    let _ = self.chain_mut().submit_tx(tx);
                }
            }
        }
        out.extend(self.settle(ctx));
        out
    }

    /// Periodic work: retries, timeouts, tip and mempool re-announcement.
    pub fn poll(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outbound> {
        if !self.online || self.config.mode == Mode::PlainBaseline {
            return Vec::new();
        }
        let mut out = Vec::new();
        if self.chain.tip_height() > 0 {
            out.push(Outbound::Broadcast(Message::BlockAnnounce(self.chain().tip_block().clone())));
        }
        for tx in self.chain.mempool() {
            out.push(Outbound::Broadcast(Message::TxAnnounce(tx.clone())));
        }
        out.extend(self.settle(ctx));
        out
    }

    pub fn go_offline(&mut self) {
        self.online = false;
        for pf in self.pending.values_mut() {
            if pf.state == FetchState::Fetching {
                pf.state = FetchState::AwaitingConfirm;
                pf.source = None;
            }
        }
        self.journal.push("offline".to_string());
    }

    /// Comes back online: asks for missing blocks, re-announces local
    /// records and restarts stalled fetches.
    pub fn go_online(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outbound> {
        self.online = true;
        self.journal.push("online".to_string());
        if self.config.mode == Mode::PlainBaseline {
            return Vec::new();
        }
        let mut out = Vec::new();
        let req = self.block_request();
        let me = self.editor();
        match ctx.locations.up_to_date_peers().map(|p| p.editor_hash).find(|e| *e != me) {
            Some(peer) => out.push(Outbound::To(peer, req)),
            None => out.push(Outbound::Broadcast(req)),
        }
        for tx in self.chain.mempool() {
            out.push(Outbound::Broadcast(Message::TxAnnounce(tx.clone())));
        }
        for pf in self.pending.values_mut() {
            if pf.state == FetchState::Unavailable {
                pf.next_retry = ctx.now;
            }
        }
        out.extend(self.settle(ctx));
        out
    }

    fn block_request(&self) -> Message {
        let chain = self.chain();
        let hashes = chain.canonical_hashes();
        let mut locator = Vec::new();
        let mut h = hashes.len() - 1;
        let mut step = 1;
        loop {
            locator.push(hashes[h]);
            if h == 0 {
                break;
            }
            if locator.len() > 8 {
                step *= 2;
            }
            h = h.saturating_sub(step);
        }
        Message::BlockRequest {
            from_height: chain.tip_height() + 1,
            locator,
        }
    }

    /// Height of the best locator entry on our canonical chain.
    fn fork_point(&self, locator: &[Digest]) -> Option<u64> {
        let chain = self.chain();
        locator.iter().find_map(|h| {
            let b = chain.block(h)?;
            (chain.canonical_hashes().get(b.height as usize) == Some(h)).then_some(b.height)
        })
    }

    /// Answers a chunk request from what this peer holds.
    pub fn serve_request(&self, req: &Request) -> Message {
        let refuse = |reason| Message::Refusal {
            lineage: req.lineage,
            seq: req.seq,
            reason,
        };
        let held = match self.store.document(&req.lineage) {
            Some(doc) if doc.deleted => None,
            Some(doc) => doc
                .revision(req.seq)
                .filter(|r| r.data_hash == req.data_hash)
                .and_then(|r| r.payload.as_deref())
                .map(|p| (doc.topic_id, p)),
            None => None,
        }
        .or_else(|| {
            self.cache
                .get(&req.data_hash)
                .filter(|c| c.own && c.lineage == req.lineage && c.seq == req.seq)
                .map(|c| (c.topic_id, c.payload.as_slice()))
        });
        let Some((topic, payload)) = held else {
            return refuse(RefusalReason::NotHeld);
        };
        if !req.declared_topics.is_empty() && !req.declared_topics.contains(&topic) {
            return refuse(RefusalReason::FilterRefused);
        }
        Message::Response(self.bundle(req.lineage, req.seq, req.data_hash, topic, payload, req.first_chunk, req.chunk_count))
    }

    #[allow(clippy::too_many_arguments)]
    fn bundle(
        &self,
        lineage: Digest,
        seq: u64,
        data_hash: Digest,
        topic_id: Digest,
        payload: &[u8],
        first: u64,
        count: u64,
    ) -> ChunkBundle {
        let chunks = chunk_payload(payload, self.config.chain.chunk_size);
        let end = first.saturating_add(count).min(chunks.len() as u64);
        let mut out: Vec<(Vec<u8>, _)> = (first..end)
            .map(|i| {
                let i = i as usize;
                (chunks[i].to_vec(), merkle_prove(&chunks, i).expect("index in range"))
            })
            .collect();
        if self.config.serve_corrupt {
            if let Some((chunk, _)) = out.first_mut() {
                match chunk.first_mut() {
                    Some(b) => *b ^= 0x01,
                    None => chunk.push(0),
                }
            }
        }
        ChunkBundle {
            lineage,
            seq,
            data_hash,
            topic_id,
            leaf_count: chunks.len() as u64,
            chunks: out,
        }
    }

    fn on_bundle(&mut self, now: u64, from: Digest, bundle: ChunkBundle) {
        self.stats.payload_bytes_fetched += bundle.payload_len() as u64;
        let key = self
            .pending
            .iter()
            .find(|(_, p)| p.lineage == bundle.lineage && p.tx.sequence_id == bundle.seq && p.tx.data_hash == bundle.data_hash)
            .map(|(k, _)| *k);
        let Some(key) = key else {
            // Pushed ahead of the block; kept until the record shows up.
            if self.config.accepts_topic(&bundle.topic_id)
                && bundle.is_complete()
                && !self.store.has_revision(&bundle.lineage, bundle.seq)
            {
                let payload = bundle.chunks.into_iter().flat_map(|(c, _)| c).collect();
                self.cache.entry(bundle.data_hash).or_insert(Cached {
                    lineage: bundle.lineage,
                    seq: bundle.seq,
                    topic_id: bundle.topic_id,
                    payload,
                    own: false,
                });
            }
            return;
        };
        let root = bundle.data_hash;
        let ok = bundle.is_complete() && bundle.chunks.iter().all(|(c, p)| verify_chunk(c, p, &root));
        let pf = self.pending.get_mut(&key).unwrap();
        if !ok {
            self.stats.integrity_failures += 1;
            pf.blacklist.insert(from);
            if pf.source == Some(from) {
                pf.deadline = now;
            }
            self.journal.push(format!("integrity-fail {} {} from {}", pf.lineage.short(), pf.tx.sequence_id, from.short()));
            return;
        }
        let payload = bundle.chunks.into_iter().flat_map(|(c, _)| c).collect();
        let topic_id = pf.topic_id;
        self.cache.insert(
            root,
            Cached {
                lineage: bundle.lineage,
                seq: bundle.seq,
                topic_id,
                payload,
                own: false,
            },
        );
    }

    fn on_report(&mut self, ctx: &mut Ctx<'_>, report: ReorgReport) -> Vec<Outbound> {
        if !report.tip_changed() {
            return Vec::new();
        }
        let old_height = self.chain.block(&report.old_tip).map_or(0, |b| b.height);
        self.journal.push(format!("tip {} {}", self.chain.tip_height(), report.new_tip.short()));
        if report.common_height < old_height {
            let mark = TxPos::end_of_block(report.common_height);
            let rb = self.store.rollback_to(mark);
            self.journal.push(format!(
                "rollback {} removed={} reset={}",
                report.common_height,
                rb.removed.len(),
                rb.reset.len()
            ));
            self.pending.retain(|pos, _| pos.height <= report.common_height);
            for lineage in rb.reset {
                let entries: Vec<(TxPos, DbFunction)> = self
                    .chain()
                    .registry()
                    .entries_for(&lineage)
                    .filter(|e| e.pos.height <= report.common_height)
                    .map(|e| (e.pos, e.tx.clone()))
                    .collect();
                for (pos, tx) in entries {
                    self.enqueue(pos, tx);
                }
            }
        }
        for tx in &report.dropped {
            self.journal.push(format!("dropped {} {}", tx.lineage_id().short(), tx.sequence_id));
        }
        for (pos, tx) in &report.applied {
            self.enqueue(*pos, tx.clone());
        }
        for pf in self.pending.values_mut() {
            if pf.state == FetchState::Unavailable {
                pf.next_retry = ctx.now;
            }
        }
        let mut out = Vec::new();
        if self.config.mode == Mode::EtherCouch {
            let me = self.editor();
            let targets: Vec<Digest> = ctx
                .locations
                .up_to_date_peers()
                .map(|p| p.editor_hash)
                .filter(|e| *e != me)
                .collect();
            if !targets.is_empty() {
                for (_, tx) in report.applied.iter().filter(|(_, tx)| tx.editor_hash == me) {
                    let Some(c) = self.cache.get(&tx.data_hash).filter(|c| c.own) else {
                        continue;
                    };
                    let b = self.bundle(c.lineage, c.seq, tx.data_hash, c.topic_id, &c.payload, 0, ALL_CHUNKS);
                    for t in &targets {
                        out.push(Outbound::To(*t, Message::Response(b.clone())));
                    }
                }
            }
        }
        out
    }

    fn enqueue(&mut self, pos: TxPos, tx: DbFunction) {
        let lineage = tx.lineage_id();
        let Some(topic_id) = self.chain().registry().lineage(&lineage).map(|s| s.topic_id) else {
            return;
        };
        if !self.config.accepts_topic(&topic_id) || self.store.has_revision(&lineage, tx.sequence_id) {
            return;
        }
        self.pending.entry(pos).or_insert(PendingFetch {
            tx,
            lineage,
            topic_id,
            candidates: Vec::new(),
            tried: BTreeSet::new(),
            blacklist: BTreeSet::new(),
            attempts: 0,
            rounds: 0,
            state: FetchState::AwaitingConfirm,
            source: None,
            deadline: 0,
            next_retry: 0,
        });
    }

    /// Advances every pending record and marks the peer up to date when
    /// nothing is left.
    fn settle(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outbound> {
        let out = self.process(ctx);
        self.maybe_mark_up_to_date(ctx);
        out
    }

    fn process(&mut self, ctx: &mut Ctx<'_>) -> Vec<Outbound> {
        let mut out = Vec::new();
        let keys: Vec<TxPos> = self.pending.keys().copied().collect();
        for pos in keys {
            let Some(pf) = self.pending.get(&pos) else { continue };
            let (lineage, seq) = (pf.lineage, pf.tx.sequence_id);
            if self.store.has_revision(&lineage, seq) {
                self.pending.remove(&pos);
                continue;
            }
            if self.chain.confirmations_at(pos) < self.config.confirmation_depth {
                self.pending.get_mut(&pos).unwrap().state = FetchState::AwaitingConfirm;
                continue;
            }
            if self.store.is_held(&lineage, seq) {
                self.pending.get_mut(&pos).unwrap().state = FetchState::Buffered;
                continue;
            }
            match self.try_local(pos) {
                Local::Done => {
                    self.pending.remove(&pos);
                    continue;
                }
                Local::Buffered => {
                    self.pending.get_mut(&pos).unwrap().state = FetchState::Buffered;
                    continue;
                }
                Local::Fetch => {}
            }
            if !self.online {
                continue;
            }
            if let Some(req) = self.next_request(ctx, pos) {
                out.push(req);
            }
        }
        out
    }

    /// Applies a record from data already at hand.
    fn try_local(&mut self, pos: TxPos) -> Local {
        let pf = &self.pending[&pos];
        let tx = pf.tx.clone();
        let lineage = pf.lineage;
        let result = if tx.task == Task::Delete {
            self.store.apply_delete(&tx, pos)
        } else if self.delete_confirmed(&lineage) {
            self.store.apply_superseded(&tx, pos)
        } else if self.config.mode == Mode::ChainOnly {
            match &tx.inline_payload {
                Some(p) => self.store.apply_add_or_edit(&tx, p.clone(), pos),
                None => return Local::Fetch,
            }
        } else {
            let payload = match self.cache.get(&tx.data_hash) {
                Some(c) => Some(c.payload.clone()),
                None => self.store.take_buffered(&tx.data_hash),
            };
            let Some(payload) = payload else { return Local::Fetch };
            let r = self.store.apply_add_or_edit(&tx, payload, pos);
            if !matches!(r, Err(StoreError::Integrity { .. })) {
                self.cache.remove(&tx.data_hash);
            }
            r
        };
        match result {
            Ok(ApplyOutcome::Applied(list)) => {
                for (l, s) in list {
                    self.journal.push(format!("apply {} {}", l.short(), s));
                    if self.store.document(&l).is_some_and(|d| d.deleted) {
                        self.cache.retain(|_, c| c.lineage != l);
                    }
                }
                Local::Done
            }
            Ok(ApplyOutcome::Deferred) => Local::Buffered,
            Err(StoreError::Integrity { .. }) => {
                self.cache.remove(&tx.data_hash);
                self.journal.push(format!("integrity-fail {} {} local", lineage.short(), tx.sequence_id));
                Local::Fetch
            }
            Err(e) => {
                self.journal.push(format!("skip {} {} {e}", lineage.short(), tx.sequence_id));
                Local::Done
            }
        }
    }

    fn delete_confirmed(&self, lineage: &Digest) -> bool {
        let chain = self.chain();
        let reg = chain.registry();
        if !reg.lineage(lineage).is_some_and(|s| s.deleted) {
            return false;
        }
        reg.entries_for(lineage)
            .last()
            .is_some_and(|e| chain.confirmations_at(e.pos) >= self.config.confirmation_depth)
    }

    fn candidates(&self, locations: &LocationRegistry, tx: &DbFunction) -> Vec<Digest> {
        let me = self.editor();
        let mut order = vec![tx.editor_hash];
        order.extend(locations.get_up_to_date_peer().map(|p| p.editor_hash));
        order.extend(locations.all_peers().map(|p| p.editor_hash));
        let mut seen = BTreeSet::new();
        order
            .into_iter()
            .filter(|e| *e != me && locations.get_peer_location(e).is_ok() && seen.insert(*e))
            .collect()
    }

    fn next_request(&mut self, ctx: &mut Ctx<'_>, pos: TxPos) -> Option<Outbound> {
        let now = ctx.now;
        let candidates = self.candidates(ctx.locations, &self.pending[&pos].tx);
        let declared: Vec<Digest> = self.config.topics.iter().copied().collect();
        let (base, cap, max_attempts, timeout) = (
            self.config.retry_base,
            self.config.retry_cap,
            self.config.max_attempts,
            self.config.request_timeout,
        );
        let pf = self.pending.get_mut(&pos).unwrap();
        match pf.state {
            FetchState::Fetching if now < pf.deadline => return None,
            FetchState::Unavailable if now < pf.next_retry => return None,
            FetchState::Unavailable => {
                pf.tried.clear();
                pf.attempts = 0;
            }
            _ => {}
        }
        pf.candidates = candidates;
        let next = pf
            .candidates
            .iter()
            .find(|c| !pf.tried.contains(c) && !pf.blacklist.contains(c))
            .copied();
        match next {
            Some(src) if pf.attempts < max_attempts => {
                pf.tried.insert(src);
                pf.attempts += 1;
                pf.state = FetchState::Fetching;
                pf.source = Some(src);
                pf.deadline = now + timeout;
                self.stats.requests_sent += 1;
                Some(Outbound::To(
                    src,
                    Message::Request(Request {
                        lineage: pf.lineage,
                        seq: pf.tx.sequence_id,
                        data_hash: pf.tx.data_hash,
                        first_chunk: 0,
                        chunk_count: ALL_CHUNKS,
                        declared_topics: declared,
                    }),
                ))
            }
            _ => {
                pf.state = FetchState::Unavailable;
                pf.source = None;
                pf.rounds += 1;
                let shift = (pf.rounds - 1).min(16);
                pf.next_retry = now + (base << shift).min(cap);
                self.journal
                    .push(format!("unavailable {} {} retry@{}", pf.lineage.short(), pf.tx.sequence_id, pf.next_retry));
                None
            }
        }
    }

    fn maybe_mark_up_to_date(&mut self, ctx: &mut Ctx<'_>) {
        if !self.online || !self.config.topics.is_empty() || self.config.mode != Mode::EtherCouch {
            return;
        }
        if !self.pending.is_empty() || self.store.held_count() > 0 {
            return;
        }
        let me = self.editor();
        let tip = self.chain.tip();
        if ctx.locations.is_up_to_date(&me, &tip) {
            return;
        }
        let behind = ctx.locations.up_to_date_tip().is_some_and(|t| {
            self.chain.block(&t).is_some_and(|b| {
                let mine = self.chain.tip_height();
                b.height > mine || (b.height == mine && t < tip)
            })
        });
        if !behind && ctx.locations.mark_up_to_date(&me, tip).is_ok() {
            self.journal.push(format!("up-to-date {}", tip.short()));
        }
    }

    /// Checks that every stored payload is anchored on the canonical chain
    /// and that filtered topics stay out of the store.
    pub fn audit(&self) -> Vec<String> {
        audit_store(&self.chain, &self.store, &self.config.topics, false)
    }

    /// Blocks on the canonical chain, for tests and dumps.
    pub fn canonical_blocks(&self) -> Vec<Block> {
        self.chain().blocks_from(0)
    }
}

/// Consistency violations between a store and a chain.
///
/// Every revision must match the record at its origin and every payload must
/// hash to its root. With `complete`, every accepted record whose topic
/// passes `topics` must also be present in the store.
pub fn audit_store(chain: &ChainState, store: &StoreState, topics: &BTreeSet<Digest>, complete: bool) -> Vec<String> {
    let mut out = Vec::new();
    let canonical = chain.canonical_hashes();
    let accepts = |t: &Digest| topics.is_empty() || topics.contains(t);
    for doc in store.documents() {
        if !accepts(&doc.topic_id) {
            out.push(format!("lineage {}: topic {} outside the filter", doc.lineage, doc.topic_id));
        }
        for r in &doc.revisions {
            let tx = canonical
                .get(r.origin.height as usize)
                .and_then(|h| chain.block(h))
                .and_then(|b| b.txs.get(r.origin.index as usize));
            match tx {
                Some(tx) if tx.lineage_id() == doc.lineage && tx.sequence_id == r.seq && tx.data_hash == r.data_hash => {}
                _ => out.push(format!(
                    "lineage {} seq {}: no matching record at {}",
                    doc.lineage, r.seq, r.origin
                )),
            }
            if let Some(p) = &r.payload {
                if payload_root(p, store.chunk_size()) != r.data_hash {
                    out.push(format!("lineage {} seq {}: payload does not match data hash", doc.lineage, r.seq));
                }
            }
        }
    }
    if complete {
        let stored = store.triples();
        let mut expected = BTreeSet::new();
        for e in chain.registry().entries() {
            let topic = chain.registry().lineage(&e.lineage).map(|s| s.topic_id);
            if topic.is_some_and(|t| accepts(&t)) {
                expected.insert((e.lineage, e.tx.sequence_id, e.tx.data_hash));
            }
        }
        for (l, s, _) in expected.difference(&stored) {
            out.push(format!("lineage {l} seq {s}: on chain but missing from store"));
        }
        for (l, s, _) in stored.difference(&expected) {
            out.push(format!("lineage {l} seq {s}: in store but not on chain"));
        }
    }
    out
}
