//! Toy proof-of-work chain carrying [`DbFunction`] records.
//!
//! Canonical serialization (used for tx ids, block hashes and byte accounting)
//! is the length-prefixed encoding from [`crate::codec`]:
//!
//! ```text
//! DbFunction := byte(task) field(data_hash) field(editor_hash) field(topic_id)
//!               uint(sequence_id) field(lineage) byte(has_inline) [field(payload)]
//! Block hash input := field(parent) uint(height) uint(nonce) field(miner)
//!                     uint(tx_count) { field(DbFunction) }*
//! ```
//!
//! Task codes are `1 = Add`, `2 = Edit`, `3 = Delete`. A record without an
//! inline payload is always [`RECORD_SIZE`] bytes.
//!
//! Fork choice: the canonical tip is the highest known valid block; equal
//! heights are broken by the lexicographically smaller block hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{self, DecodeError, Reader, Writer};
use crate::crypto::{payload_root, Digest, DEFAULT_CHUNK_SIZE};
use crate::registry::{DataRegistry, LineageState, RejectReason};

/// Encoded size of a record without inline payload.
pub const RECORD_SIZE: usize = codec::field_len(1) // task
    + 3 * codec::field_len(32) // data, editor, topic
    + codec::field_len(8) // sequence
    + codec::field_len(32) // lineage
    + codec::field_len(1); // inline flag

/// Encoded size of a block's hash input excluding its transactions.
pub const BLOCK_HEADER_SIZE: usize = 2 * codec::field_len(32) + 3 * codec::field_len(8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Add,
    Edit,
    Delete,
}

impl Task {
    pub fn code(self) -> u8 {
        match self {
            Task::Add => 1,
            Task::Edit => 2,
            Task::Delete => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Task> {
        match code {
            1 => Some(Task::Add),
            2 => Some(Task::Edit),
            3 => Some(Task::Delete),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Add => "add",
            Task::Edit => "edit",
            Task::Delete => "delete",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// On-chain record of one data mutation.
///
/// `lineage` identifies the document for edits and deletes and is the id of
/// the document's Add record; it is zero on Add records themselves.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DbFunction {
    pub task: Task,
    pub data_hash: Digest,
    pub editor_hash: Digest,
    pub topic_id: Digest,
    pub sequence_id: u64,
    pub lineage: Digest,
    pub inline_payload: Option<Vec<u8>>,
}

impl DbFunction {
    pub fn add(data_hash: Digest, editor: Digest, topic: Digest) -> Self {
        DbFunction {
            task: Task::Add,
            data_hash,
            editor_hash: editor,
            topic_id: topic,
            sequence_id: 1,
            lineage: Digest::ZERO,
            inline_payload: None,
        }
    }

    pub fn edit(lineage: Digest, seq: u64, data_hash: Digest, editor: Digest, topic: Digest) -> Self {
        DbFunction {
            task: Task::Edit,
            data_hash,
            editor_hash: editor,
            topic_id: topic,
            sequence_id: seq,
            lineage,
            inline_payload: None,
        }
    }

    pub fn delete(lineage: Digest, seq: u64, editor: Digest, topic: Digest) -> Self {
        DbFunction {
            task: Task::Delete,
            data_hash: Digest::ZERO,
            editor_hash: editor,
            topic_id: topic,
            sequence_id: seq,
            lineage,
            inline_payload: None,
        }
    }

    pub fn with_inline(mut self, payload: Vec<u8>) -> Self {
        self.inline_payload = Some(payload);
        self
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.byte(self.task.code())
            .field(self.data_hash.as_bytes())
            .field(self.editor_hash.as_bytes())
            .field(self.topic_id.as_bytes())
            .uint(self.sequence_id)
            .field(self.lineage.as_bytes());
        match &self.inline_payload {
            Some(p) => {
                w.byte(1).field(p);
            }
            None => {
                w.byte(0);
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.encoded_len());
        self.encode_into(&mut w);
        w.into_bytes()
    }

    pub fn encoded_len(&self) -> usize {
        RECORD_SIZE + self.inline_payload.as_ref().map_or(0, |p| codec::field_len(p.len()))
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let task = Task::from_code(r.byte()?).ok_or(DecodeError::Invalid("task code"))?;
        let data_hash = Digest(r.fixed()?);
        let editor_hash = Digest(r.fixed()?);
        let topic_id = Digest(r.fixed()?);
        let sequence_id = r.uint()?;
        let lineage = Digest(r.fixed()?);
        let inline_payload = match r.byte()? {
            0 => None,
            1 => Some(r.field()?.to_vec()),
            _ => return Err(DecodeError::Invalid("inline flag")),
        };
        Ok(DbFunction {
            task,
            data_hash,
            editor_hash,
            topic_id,
            sequence_id,
            lineage,
            inline_payload,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let tx = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(tx)
    }

    /// Digest of the canonical serialization.
    pub fn id(&self) -> Digest {
        crate::crypto::hash_bytes(&self.encode())
    }

    /// Lineage this record belongs to: its own id for an Add.
    pub fn lineage_id(&self) -> Digest {
        match self.task {
            Task::Add => self.id(),
            _ => self.lineage,
        }
    }

    /// Structural checks that need no registry state.
    pub fn check_shape(&self, chunk_size: usize) -> Result<(), RejectReason> {
        if self.sequence_id == 0 {
            return Err(RejectReason::Malformed("sequence id 0"));
        }
        if self.task == Task::Add && !self.lineage.is_zero() {
            return Err(RejectReason::Malformed("add carries a lineage"));
        }
        if self.task != Task::Add && self.lineage.is_zero() {
            return Err(RejectReason::UnknownLineage);
        }
        if let Some(p) = &self.inline_payload {
            if self.task == Task::Delete {
                return Err(RejectReason::Malformed("delete carries a payload"));
            }
            if payload_root(p, chunk_size) != self.data_hash {
                return Err(RejectReason::Malformed("inline payload does not match data hash"));
            }
        }
        Ok(())
    }
}

/// Position of a record on a chain: block height and index within the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TxPos {
    pub height: u64,
    pub index: u32,
}

impl TxPos {
    pub fn new(height: u64, index: u32) -> Self {
        TxPos { height, index }
    }

    /// Mark covering every record in blocks up to and including `height`.
    pub fn end_of_block(height: u64) -> Self {
        TxPos {
            height,
            index: u32::MAX,
        }
    }
}

impl fmt::Display for TxPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.height, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub parent: Digest,
    pub height: u64,
    pub nonce: u64,
    pub miner: Digest,
    pub txs: Vec<DbFunction>,
    pub block_hash: Digest,
}

impl Block {
    fn prefix(parent: &Digest, height: u64) -> Vec<u8> {
        let mut w = Writer::with_capacity(64);
        w.field(parent.as_bytes()).uint(height);
        w.into_bytes()
    }

    fn suffix(miner: &Digest, txs: &[DbFunction]) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(miner.as_bytes()).uint(txs.len() as u64);
        for tx in txs {
            w.field(&tx.encode());
        }
        w.into_bytes()
    }

    fn hash_parts(prefix: &[u8], nonce: u64, suffix: &[u8]) -> Digest {
        let mut hasher = Sha256::new();
        hasher.update(prefix);
        hasher.update(8u64.to_be_bytes());
        hasher.update(nonce.to_be_bytes());
        hasher.update(suffix);
        Digest(hasher.finalize().into())
    }

    pub fn compute_hash(&self) -> Digest {
        Self::hash_parts(
            &Self::prefix(&self.parent, self.height),
            self.nonce,
            &Self::suffix(&self.miner, &self.txs),
        )
    }

    /// Builds a block and searches nonces upward from 0 until the hash has
    /// `difficulty_bits` leading zero bits.
    pub fn mine(parent: Digest, height: u64, miner: Digest, txs: Vec<DbFunction>, difficulty_bits: u32) -> Block {
        let prefix = Self::prefix(&parent, height);
        let suffix = Self::suffix(&miner, &txs);
        let mut nonce = 0u64;
        let block_hash = loop {
            let h = Self::hash_parts(&prefix, nonce, &suffix);
            if h.leading_zero_bits() >= difficulty_bits {
                break h;
            }
            nonce += 1;
        };
        Block {
            parent,
            height,
            nonce,
            miner,
            txs,
            block_hash,
        }
    }

    pub fn genesis(difficulty_bits: u32) -> Block {
        Block::mine(Digest::ZERO, 0, Digest::ZERO, Vec::new(), difficulty_bits)
    }

    /// Total encoded size of the records carried by this block.
    pub fn tx_bytes(&self) -> usize {
        self.txs.iter().map(DbFunction::encoded_len).sum()
    }

    /// Wire encoding: the hash input followed by the claimed hash.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(self.parent.as_bytes())
            .uint(self.height)
            .uint(self.nonce)
            .field(self.miner.as_bytes())
            .uint(self.txs.len() as u64);
        for tx in &self.txs {
            w.field(&tx.encode());
        }
        w.field(self.block_hash.as_bytes());
        w.into_bytes()
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Block, DecodeError> {
        let parent = Digest(r.fixed()?);
        let height = r.uint()?;
        let nonce = r.uint()?;
        let miner = Digest(r.fixed()?);
        let n = r.uint()?;
        let mut txs = Vec::new();
        for _ in 0..n {
            txs.push(DbFunction::decode(r.field()?)?);
        }
        let block_hash = Digest(r.fixed()?);
        Ok(Block {
            parent,
            height,
            nonce,
            miner,
            txs,
            block_hash,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Block, DecodeError> {
        let mut r = Reader::new(bytes);
        let b = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(b)
    }

    /// One dump line: `height block_hash parent nonce miner tx_count txs`,
    /// where `txs` is a comma-separated list of hex-encoded records or `-`.
    pub fn dump_line(&self) -> String {
        let txs = if self.txs.is_empty() {
            "-".to_string()
        } else {
            self.txs
                .iter()
                .map(|t| hex::encode(t.encode()))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{} {} {} {} {} {} {}",
            self.height,
            self.block_hash,
            self.parent,
            self.nonce,
            self.miner,
            self.txs.len(),
            txs
        )
    }

    pub fn parse_dump_line(line: &str) -> Result<Block, DumpError> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(DumpError::Fields(fields.len()));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| DumpError::Number(s.to_string()));
        let digest = |s: &str| s.parse::<Digest>().map_err(|e| DumpError::Digest(e.to_string()));
        let count = num(fields[5])? as usize;
        let txs = if fields[6] == "-" {
            Vec::new()
        } else {
            fields[6]
                .split(',')
                .map(|h| {
                    let bytes = hex::decode(h).map_err(|e| DumpError::Digest(e.to_string()))?;
                    DbFunction::decode(&bytes).map_err(DumpError::Decode)
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        if txs.len() != count {
            return Err(DumpError::TxCount {
                declared: count,
                found: txs.len(),
            });
        }
        Ok(Block {
            height: num(fields[0])?,
            block_hash: digest(fields[1])?,
            parent: digest(fields[2])?,
            nonce: num(fields[3])?,
            miner: digest(fields[4])?,
            txs,
        })
    }
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("expected 7 fields, found {0}")]
    Fields(usize),
    #[error("bad number {0:?}")]
    Number(String),
    #[error("bad hex: {0}")]
    Digest(String),
    #[error("bad record: {0}")]
    Decode(DecodeError),
    #[error("declared {declared} records, found {found}")]
    TxCount { declared: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub difficulty_bits: u32,
    pub chunk_size: usize,
    pub allow_empty_blocks: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            difficulty_bits: 12,
            chunk_size: DEFAULT_CHUNK_SIZE,
            allow_empty_blocks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockRejection {
    #[error("unknown parent {0}")]
    UnknownParent(Digest),
    #[error("height {got} does not follow parent height {parent}")]
    BadHeight { parent: u64, got: u64 },
    #[error("block hash does not match contents")]
    HashMismatch,
    #[error("hash has {got} leading zero bits, need {need}")]
    InsufficientWork { got: u32, need: u32 },
    #[error("record {index} rejected: {reason}")]
    InvalidTx { index: usize, reason: RejectReason },
    #[error("competing genesis")]
    Genesis,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("record rejected: {0}")]
    Rejected(#[from] RejectReason),
    #[error("mempool is empty")]
    EmptyMempool,
}

/// What an adoption changed on the canonical chain, in chain order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReorgReport {
    pub old_tip: Digest,
    pub new_tip: Digest,
    /// Height of the last block shared by the old and new canonical chains.
    pub common_height: u64,
    pub rolled_back: Vec<(TxPos, DbFunction)>,
    pub applied: Vec<(TxPos, DbFunction)>,
    /// Mempool records invalidated by the new chain.
    pub dropped: Vec<DbFunction>,
    /// Rolled-back records that went back into the mempool.
    pub reinserted: Vec<DbFunction>,
    pub orphaned: bool,
    pub duplicate: bool,
}

impl ReorgReport {
    pub fn tip_changed(&self) -> bool {
        self.old_tip != self.new_tip
    }

    /// True when blocks (possibly empty ones) left the canonical chain.
    pub fn is_reorg(&self, old_tip_height: u64) -> bool {
        self.tip_changed() && self.common_height < old_tip_height
    }
}

/// One node's view of the chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainState {
    config: ChainConfig,
    genesis: Digest,
    blocks: BTreeMap<Digest, Block>,
    canonical: Vec<Digest>,
    tx_index: BTreeMap<Digest, TxPos>,
    registry: DataRegistry,
    mempool: Vec<DbFunction>,
    mempool_ids: BTreeSet<Digest>,
    overlay: BTreeMap<Digest, LineageState>,
    orphans: BTreeMap<Digest, Vec<Block>>,
}

impl ChainState {
    pub fn new(config: ChainConfig) -> Self {
        let genesis = Block::genesis(config.difficulty_bits);
        let hash = genesis.block_hash;
        let mut blocks = BTreeMap::new();
        blocks.insert(hash, genesis);
        ChainState {
            config,
            genesis: hash,
            blocks,
            canonical: vec![hash],
            tx_index: BTreeMap::new(),
            registry: DataRegistry::new(config.chunk_size),
            mempool: Vec::new(),
            mempool_ids: BTreeSet::new(),
            overlay: BTreeMap::new(),
            orphans: BTreeMap::new(),
        }
    }

    /// Rebuilds a node's chain from a list of blocks (e.g. a dump), adopting
    /// them in order. Fails with the index of the first rejected block.
    pub fn from_blocks(config: ChainConfig, blocks: &[Block]) -> Result<Self, (usize, BlockRejection)> {
        let mut state = ChainState::new(config);
        for (i, block) in blocks.iter().enumerate() {
            if block.height == 0 {
                if block.block_hash != state.genesis || block.compute_hash() != block.block_hash {
                    return Err((i, BlockRejection::Genesis));
                }
                continue;
            }
            state.adopt_block(block.clone()).map_err(|e| (i, e))?;
        }
        Ok(state)
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn genesis(&self) -> Digest {
        self.genesis
    }

    pub fn tip(&self) -> Digest {
        *self.canonical.last().unwrap()
    }

    pub fn tip_height(&self) -> u64 {
        (self.canonical.len() - 1) as u64
    }

    pub fn tip_block(&self) -> &Block {
        &self.blocks[&self.tip()]
    }

    pub fn block(&self, hash: &Digest) -> Option<&Block> {
        self.blocks.get(hash)
    }

    pub fn contains_block(&self, hash: &Digest) -> bool {
        self.blocks.contains_key(hash)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn orphan_count(&self) -> usize {
        self.orphans.values().map(Vec::len).sum()
    }

    pub fn registry(&self) -> &DataRegistry {
        &self.registry
    }

    pub fn mempool(&self) -> &[DbFunction] {
        &self.mempool
    }

    pub fn canonical_hashes(&self) -> &[Digest] {
        &self.canonical
    }

    pub fn canonical_blocks(&self) -> impl Iterator<Item = &Block> + '_ {
        self.canonical.iter().map(move |h| &self.blocks[h])
    }

    /// Canonical blocks with height `>= from`.
    pub fn blocks_from(&self, from: u64) -> Vec<Block> {
        self.canonical
            .iter()
            .skip(from as usize)
            .map(|h| self.blocks[h].clone())
            .collect()
    }

    pub fn canonical_txs(&self) -> impl Iterator<Item = (TxPos, &DbFunction)> + '_ {
        self.canonical_blocks().flat_map(|b| {
            b.txs
                .iter()
                .enumerate()
                .map(move |(i, tx)| (TxPos::new(b.height, i as u32), tx))
        })
    }

    /// Total encoded record bytes on the canonical chain.
    pub fn chain_tx_bytes(&self) -> usize {
        self.canonical_blocks().map(Block::tx_bytes).sum()
    }

    pub fn position_of(&self, tx_id: &Digest) -> Option<TxPos> {
        self.tx_index.get(tx_id).copied()
    }

    /// Lineage state seen through the canonical chain plus the mempool.
    pub fn pending_lineage(&self, lineage: &Digest) -> Option<LineageState> {
        self.overlay
            .get(lineage)
            .or_else(|| self.registry.lineage(lineage))
            .copied()
    }

    /// Appends a record to the mempool. Returns `false` for a byte-equal
    /// duplicate already pending.
    pub fn submit_tx(&mut self, tx: DbFunction) -> Result<bool, LedgerError> {
        let id = tx.id();
        if self.mempool_ids.contains(&id) {
            return Ok(false);
        }
        let next = self.check_pending(&tx)?;
        self.overlay.insert(next.0, next.1);
        self.mempool_ids.insert(id);
        self.mempool.push(tx);
        Ok(true)
    }

    fn check_pending(&self, tx: &DbFunction) -> Result<(Digest, LineageState), RejectReason> {
        crate::registry::check_tx(tx, self.config.chunk_size, |l| self.pending_lineage(l))
    }

    /// Mines a block on the canonical tip carrying up to `max_txs` mempool
    /// records in submission order. The block is not adopted.
    pub fn mine_block(&self, miner: Digest, max_txs: usize) -> Result<Block, LedgerError> {
        if self.mempool.is_empty() && !self.config.allow_empty_blocks {
            return Err(LedgerError::EmptyMempool);
        }
        let txs: Vec<DbFunction> = self.mempool.iter().take(max_txs).cloned().collect();
        Ok(Block::mine(
            self.tip(),
            self.tip_height() + 1,
            miner,
            txs,
            self.config.difficulty_bits,
        ))
    }

    /// Registry state after the chain ending at `hash`.
    fn registry_at(&self, hash: &Digest) -> DataRegistry {
        if *hash == self.tip() {
            return self.registry.clone();
        }
        let mut path = Vec::new();
        let mut cur = *hash;
        loop {
            let b = &self.blocks[&cur];
            let h = b.height as usize;
            if h < self.canonical.len() && self.canonical[h] == cur {
                break;
            }
            path.push(cur);
            cur = b.parent;
        }
        let on_canonical = self.blocks[&cur].height;
        let mut reg = self.registry.clone();
        reg.truncate(on_canonical);
        for h in path.iter().rev() {
            let b = &self.blocks[h];
            for (i, tx) in b.txs.iter().enumerate() {
                reg.apply_or_skip(TxPos::new(b.height, i as u32), tx);
            }
        }
        reg
    }

    pub fn validate_block(&self, block: &Block) -> Result<(), BlockRejection> {
        if block.height == 0 {
            return Err(BlockRejection::Genesis);
        }
        let parent = self
            .blocks
            .get(&block.parent)
            .ok_or(BlockRejection::UnknownParent(block.parent))?;
        if block.height != parent.height + 1 {
            return Err(BlockRejection::BadHeight {
                parent: parent.height,
                got: block.height,
            });
        }
        if block.compute_hash() != block.block_hash {
            return Err(BlockRejection::HashMismatch);
        }
        let got = block.block_hash.leading_zero_bits();
        if got < self.config.difficulty_bits {
            return Err(BlockRejection::InsufficientWork {
                got,
                need: self.config.difficulty_bits,
            });
        }
        let reject = |index: usize| move |reason| BlockRejection::InvalidTx { index, reason };
        if block.parent == self.tip() {
            let mut local: BTreeMap<Digest, LineageState> = BTreeMap::new();
            for (i, tx) in block.txs.iter().enumerate() {
                let (lineage, state) = crate::registry::check_tx(tx, self.config.chunk_size, |l| {
                    local.get(l).or_else(|| self.registry.lineage(l)).copied()
                })
                .map_err(reject(i))?;
                local.insert(lineage, state);
            }
            return Ok(());
        }
        let mut reg = self.registry_at(&block.parent);
        for (i, tx) in block.txs.iter().enumerate() {
            reg.apply(TxPos::new(block.height, i as u32), tx).map_err(reject(i))?;
        }
        Ok(())
    }

    pub fn is_valid_block(&self, block: &Block) -> bool {
        self.validate_block(block).is_ok()
    }

    fn better(&self, a: &Digest, b: &Digest) -> bool {
        let (ha, hb) = (self.blocks[a].height, self.blocks[b].height);
        ha > hb || (ha == hb && a < b)
    }

    /// Stores a block and moves the tip to the best known chain.
    ///
    /// A block whose parent is unknown is parked in an orphan buffer and
    /// connected once the parent arrives.
    pub fn adopt_block(&mut self, block: Block) -> Result<ReorgReport, BlockRejection> {
        let old_tip = self.tip();
        let mut report = ReorgReport {
            old_tip,
            new_tip: old_tip,
            common_height: self.tip_height(),
            ..Default::default()
        };
        if self.blocks.contains_key(&block.block_hash) {
            report.duplicate = true;
            return Ok(report);
        }
        if !self.blocks.contains_key(&block.parent) {
            if block.height == 0 {
                return Err(BlockRejection::Genesis);
            }
            let parked = self.orphans.entry(block.parent).or_default();
            if !parked.iter().any(|b| b.block_hash == block.block_hash) {
                parked.push(block);
            }
            report.orphaned = true;
            return Ok(report);
        }
        self.validate_block(&block)?;

        let mut best = old_tip;
        let mut queue = vec![block.block_hash];
        self.blocks.insert(block.block_hash, block);
        while let Some(hash) = queue.pop() {
            if self.better(&hash, &best) {
                best = hash;
            }
            for child in self.orphans.remove(&hash).unwrap_or_default() {
                if self.blocks.contains_key(&child.block_hash) || self.validate_block(&child).is_err() {
                    continue;
                }
                queue.push(child.block_hash);
                self.blocks.insert(child.block_hash, child);
            }
        }
        if best != old_tip {
            self.switch_to(best, &mut report);
        }
        Ok(report)
    }

    fn switch_to(&mut self, new_tip: Digest, report: &mut ReorgReport) {
        let mut new_branch = Vec::new();
        let mut cur = new_tip;
        let common = loop {
            let b = &self.blocks[&cur];
            let h = b.height as usize;
            if h < self.canonical.len() && self.canonical[h] == cur {
                break b.height;
            }
            new_branch.push(cur);
            cur = b.parent;
        };
        new_branch.reverse();

        for hash in self.canonical.drain(common as usize + 1..) {
            let b = &self.blocks[&hash];
            for (i, tx) in b.txs.iter().enumerate() {
                self.tx_index.remove(&tx.id());
                report.rolled_back.push((TxPos::new(b.height, i as u32), tx.clone()));
            }
        }
        if !report.rolled_back.is_empty() {
            self.registry.truncate(common);
        }
        for hash in new_branch {
            let b = &self.blocks[&hash];
            for (i, tx) in b.txs.iter().enumerate() {
                let pos = TxPos::new(b.height, i as u32);
                self.registry.apply_or_skip(pos, tx);
                self.tx_index.insert(tx.id(), pos);
                report.applied.push((pos, tx.clone()));
            }
            self.canonical.push(hash);
        }
        report.new_tip = new_tip;
        report.common_height = common;
        self.refresh_mempool(report);
    }

    fn refresh_mempool(&mut self, report: &mut ReorgReport) {
        let mut candidates: Vec<DbFunction> = Vec::new();
        for (_, tx) in &report.rolled_back {
            if !self.tx_index.contains_key(&tx.id()) {
                candidates.push(tx.clone());
                report.reinserted.push(tx.clone());
            }
        }
        candidates.append(&mut self.mempool);
        self.mempool_ids.clear();
        self.overlay.clear();
        for tx in candidates {
            let id = tx.id();
            if self.tx_index.contains_key(&id) || self.mempool_ids.contains(&id) {
                continue;
            }
            match self.check_pending(&tx) {
                Ok((lineage, state)) => {
                    self.overlay.insert(lineage, state);
                    self.mempool_ids.insert(id);
                    self.mempool.push(tx);
                }
                Err(_) => report.dropped.push(tx),
            }
        }
        report.reinserted.retain(|tx| self.mempool_ids.contains(&tx.id()));
    }

    pub fn confirmations(&self, tx: &DbFunction) -> u64 {
        self.position_of(&tx.id())
            .map_or(0, |pos| self.confirmations_at(pos))
    }

    /// Depth of a canonical position, 1 for the tip block.
    pub fn confirmations_at(&self, pos: TxPos) -> u64 {
        if pos.height > self.tip_height() {
            0
        } else {
            self.tip_height() - pos.height + 1
        }
    }

    /// Canonical chain dump, one block per line from genesis.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for b in self.canonical_blocks() {
            out.push_str(&b.dump_line());
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Vec<Block>, (usize, DumpError)> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| Block::parse_dump_line(l).map_err(|e| (i + 1, e)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash_bytes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(bits: u32) -> ChainConfig {
        ChainConfig {
            difficulty_bits: bits,
            ..Default::default()
        }
    }

    fn editor(n: u8) -> Digest {
        hash_bytes(&[b'e', n])
    }

    fn topic() -> Digest {
        hash_bytes(b"tickets")
    }

    fn add(n: u32) -> DbFunction {
        DbFunction::add(hash_bytes(&n.to_be_bytes()), editor(1), topic())
    }

    #[test]
    fn record_size_is_fixed() {
        assert_eq!(RECORD_SIZE, 194);
        assert_eq!(add(1).encode().len(), RECORD_SIZE);
        let payload = vec![7u8; 100];
        let tx = DbFunction::add(payload_root(&payload, 4096), editor(1), topic()).with_inline(payload);
        assert_eq!(tx.encode().len(), RECORD_SIZE + 8 + 100);
        assert_eq!(tx.encoded_len(), tx.encode().len());
        assert_eq!(DbFunction::decode(&tx.encode()).unwrap(), tx);
    }

    #[test]
    fn submit_is_idempotent() {
        let mut c = ChainState::new(cfg(0));
        assert!(c.submit_tx(add(1)).unwrap());
        assert_eq!(c.mempool(), &[add(1)]);
        assert!(!c.submit_tx(add(1)).unwrap());
        assert_eq!(c.mempool().len(), 1);
    }

    #[test]
    fn edit_with_add_sequence_is_rejected() {
        let mut c = ChainState::new(cfg(0));
        let a = add(1);
        let lineage = a.id();
        c.submit_tx(a).unwrap();
        let bad = DbFunction::edit(lineage, 1, hash_bytes(b"v2"), editor(1), topic());
        assert!(matches!(
            c.submit_tx(bad),
            Err(LedgerError::Rejected(RejectReason::StaleSequence { .. }))
        ));
        let good = DbFunction::edit(lineage, 2, hash_bytes(b"v2"), editor(1), topic());
        assert!(c.submit_tx(good).unwrap());
    }

    #[test]
    fn zero_difficulty_accepts_nonce_zero() {
        let mut c = ChainState::new(cfg(0));
        c.submit_tx(add(1)).unwrap();
        let b = c.mine_block(editor(9), 10).unwrap();
        assert_eq!(b.nonce, 0);
        assert!(c.is_valid_block(&b));
    }

    #[test]
    fn empty_mempool_mining_needs_config() {
        let c = ChainState::new(cfg(0));
        assert_eq!(c.mine_block(editor(1), 4), Err(LedgerError::EmptyMempool));
        let c = ChainState::new(ChainConfig {
            allow_empty_blocks: true,
            ..cfg(0)
        });
        assert!(c.mine_block(editor(1), 4).unwrap().txs.is_empty());
    }

    #[test]
    fn difficulty_eight_mean_attempts() {
        // Attempts are geometric with p = 1/256.
        let mut total = 0u64;
        for n in 0..100u32 {
            let b = Block::mine(hash_bytes(&n.to_be_bytes()), 1, editor(1), vec![add(n)], 8);
            assert!(b.block_hash.leading_zero_bits() >= 8);
            total += b.nonce + 1;
        }
        let mean = total as f64 / 100.0;
        assert!((128.0..=512.0).contains(&mean), "mean attempts {mean}");
    }

    #[test]
    fn fifo_with_max_txs() {
        let mut c = ChainState::new(cfg(4));
        for n in 0..3 {
            c.submit_tx(add(n)).unwrap();
        }
        let b = c.mine_block(editor(1), 2).unwrap();
        assert_eq!(b.txs, vec![add(0), add(1)]);
        c.adopt_block(b).unwrap();
        assert_eq!(c.mempool(), &[add(2)]);
    }

    #[test]
    fn validation_reasons() {
        let mut c = ChainState::new(cfg(4));
        c.submit_tx(add(1)).unwrap();
        let b = c.mine_block(editor(1), 10).unwrap();
        assert!(c.is_valid_block(&b));

        let mut tampered = b.clone();
        tampered.nonce += 1;
        assert_eq!(c.validate_block(&tampered), Err(BlockRejection::HashMismatch));

        let mut bad_add = add(2);
        bad_add.sequence_id = 2;
        let bad = Block::mine(c.tip(), 1, editor(1), vec![bad_add], 4);
        assert!(matches!(
            c.validate_block(&bad),
            Err(BlockRejection::InvalidTx { index: 0, .. })
        ));

        let weak = Block::mine(c.tip(), 1, editor(1), vec![add(3)], 0);
        if weak.block_hash.leading_zero_bits() < 4 {
            assert!(matches!(
                c.validate_block(&weak),
                Err(BlockRejection::InsufficientWork { .. })
            ));
        }

        let orphan = Block::mine(hash_bytes(b"nowhere"), 1, editor(1), vec![], 4);
        assert!(matches!(c.validate_block(&orphan), Err(BlockRejection::UnknownParent(_))));

        let wrong_height = Block::mine(c.tip(), 2, editor(1), vec![], 4);
        assert!(matches!(c.validate_block(&wrong_height), Err(BlockRejection::BadHeight { .. })));
    }

    #[test]
    fn extend_tip_reports_applied() {
        let mut c = ChainState::new(cfg(2));
        c.submit_tx(add(1)).unwrap();
        let b = c.mine_block(editor(1), 10).unwrap();
        let r = c.adopt_block(b.clone()).unwrap();
        assert!(r.rolled_back.is_empty());
        assert_eq!(r.applied, vec![(TxPos::new(1, 0), add(1))]);
        assert_eq!(c.tip(), b.block_hash);
        assert!(c.mempool().is_empty());
    }

    #[test]
    fn tie_break_prefers_lower_hash() {
        let mut c = ChainState::new(cfg(0));
        let g = c.tip();
        let mut x = Block::mine(g, 1, editor(1), vec![add(1)], 0);
        let mut y = Block::mine(g, 1, editor(2), vec![add(2)], 0);
        if x.block_hash < y.block_hash {
            std::mem::swap(&mut x, &mut y);
        }
        // x has the higher hash; adopt it first.
        c.adopt_block(x.clone()).unwrap();
        assert_eq!(c.tip(), x.block_hash);
        let r = c.adopt_block(y.clone()).unwrap();
        assert_eq!(c.tip(), y.block_hash);
        assert_eq!(r.rolled_back, vec![(TxPos::new(1, 0), x.txs[0].clone())]);
        assert_eq!(r.applied, vec![(TxPos::new(1, 0), y.txs[0].clone())]);
        assert_eq!(r.common_height, 0);
        // The rolled-back record is still valid and goes back to the mempool.
        assert_eq!(c.mempool(), &x.txs[..]);
        // Re-adopting the loser changes nothing.
        let again = c.adopt_block(x).unwrap();
        assert!(again.duplicate);
        assert_eq!(c.tip(), y.block_hash);
    }

    #[test]
    fn confirmations_count_depth() {
        let mut c = ChainState::new(cfg(0));
        let deep = add(1);
        assert_eq!(c.confirmations(&deep), 0);
        c.submit_tx(deep.clone()).unwrap();
        assert_eq!(c.confirmations(&deep), 0);
        let b = c.mine_block(editor(1), 1).unwrap();
        c.adopt_block(b).unwrap();
        assert_eq!(c.confirmations(&deep), 1);
        for n in 2..5 {
            c.submit_tx(add(n)).unwrap();
            let b = c.mine_block(editor(1), 1).unwrap();
            c.adopt_block(b).unwrap();
        }
        assert_eq!(c.confirmations(&deep), 4);
        assert_eq!(c.confirmations(&add(4)), 1);
    }

    #[test]
    fn orphans_connect_when_parent_arrives() {
        let mut c = ChainState::new(cfg(0));
        let b1 = Block::mine(c.tip(), 1, editor(1), vec![add(1)], 0);
        let b2 = Block::mine(b1.block_hash, 2, editor(1), vec![add(2)], 0);
        let r = c.adopt_block(b2.clone()).unwrap();
        assert!(r.orphaned);
        assert_eq!(c.tip_height(), 0);
        assert_eq!(c.orphan_count(), 1);
        let r = c.adopt_block(b1).unwrap();
        assert_eq!(c.tip(), b2.block_hash);
        assert_eq!(r.applied.len(), 2);
        assert_eq!(c.orphan_count(), 0);
    }

    #[test]
    fn dump_roundtrip_rebuilds_state() {
        let mut c = ChainState::new(cfg(3));
        for n in 0..4 {
            c.submit_tx(add(n)).unwrap();
            let b = c.mine_block(editor(1), 2).unwrap();
            c.adopt_block(b).unwrap();
        }
        let text = c.dump();
        assert_eq!(text.lines().count(), 5);
        let blocks = ChainState::parse_dump(&text).unwrap();
        let rebuilt = ChainState::from_blocks(cfg(3), &blocks).unwrap();
        assert_eq!(rebuilt.tip(), c.tip());
        assert_eq!(rebuilt.registry(), c.registry());
        assert_eq!(rebuilt.dump(), text);
        assert!(matches!(
            ChainState::from_blocks(cfg(12), &blocks),
            Err((0, BlockRejection::Genesis))
        ));
    }

    #[test]
    fn wire_encoding_roundtrip() {
        let mut c = ChainState::new(cfg(0));
        c.submit_tx(add(5)).unwrap();
        let b = c.mine_block(editor(3), 5).unwrap();
        assert_eq!(Block::decode(&b.encode()).unwrap(), b);
    }

    /// Reference fork choice: longest chain, ties to the smaller tip hash.
    fn oracle_tip(genesis: &Block, known: &[Block]) -> Digest {
        let mut best = (0u64, genesis.block_hash);
        for b in known {
            let mut cur = b;
            let mut ok = true;
            while cur.height > 0 {
                match known.iter().chain(std::iter::once(genesis)).find(|x| x.block_hash == cur.parent) {
                    Some(p) => cur = p,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && (b.height > best.0 || (b.height == best.0 && b.block_hash < best.1)) {
                best = (b.height, b.block_hash);
            }
        }
        best.1
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn three_block_fixture_every_order_matches_oracle() {
        // A: g <- a1 ; B: g <- b1 <- b2
        let base = ChainState::new(cfg(0));
        let genesis = base.tip_block().clone();
        let a1 = Block::mine(genesis.block_hash, 1, editor(1), vec![add(1)], 0);
        let b1 = Block::mine(genesis.block_hash, 1, editor(2), vec![add(2)], 0);
        let b2 = Block::mine(b1.block_hash, 2, editor(2), vec![add(3)], 0);
        let blocks = [a1, b1, b2];
        for order in permutations(3) {
            let mut c = base.clone();
            let mut model: Vec<DbFunction> = Vec::new();
            let mut seen = Vec::new();
            for &i in &order {
                let r = c.adopt_block(blocks[i].clone()).unwrap();
                seen.push(blocks[i].clone());
                let keep = model.len() - r.rolled_back.len();
                assert_eq!(
                    &model[keep..],
                    &r.rolled_back.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>()[..]
                );
                model.truncate(keep);
                model.extend(r.applied.iter().map(|(_, t)| t.clone()));
                assert_eq!(c.tip(), oracle_tip(&genesis, &seen), "order {order:?}");
            }
            assert_eq!(c.tip(), blocks[2].block_hash);
            let chain_txs: Vec<DbFunction> = c.canonical_txs().map(|(_, t)| t.clone()).collect();
            assert_eq!(chain_txs, model);
            assert_eq!(chain_txs, vec![add(2), add(3)]);
        }
    }

    #[test]
    fn two_block_branch_over_one_block_chain() {
        let mut c = ChainState::new(cfg(0));
        let g = c.tip();
        let a1 = Block::mine(g, 1, editor(1), vec![add(1)], 0);
        let b1 = Block::mine(g, 1, editor(2), vec![add(2)], 0);
        let b2 = Block::mine(b1.block_hash, 2, editor(2), vec![add(3)], 0);
        c.adopt_block(a1.clone()).unwrap();
        if b1.block_hash > a1.block_hash {
            // b1 loses the tie, so the switch happens on b2 in one report.
            c.adopt_block(b1.clone()).unwrap();
            let r = c.adopt_block(b2).unwrap();
            assert_eq!(r.rolled_back, vec![(TxPos::new(1, 0), add(1))]);
            assert_eq!(r.applied, vec![(TxPos::new(1, 0), add(2)), (TxPos::new(2, 0), add(3))]);
        } else {
            c.adopt_block(b1).unwrap();
            let r = c.adopt_block(b2).unwrap();
            assert_eq!(r.applied, vec![(TxPos::new(2, 0), add(3))]);
        }
        assert_eq!(c.mempool(), &[add(1)]);
    }

    #[test]
    fn conflicting_mempool_entries_are_dropped() {
        let mut c = ChainState::new(cfg(0));
        let a = add(1);
        let l = a.id();
        c.submit_tx(a).unwrap();
        let b = c.mine_block(editor(1), 1).unwrap();
        c.adopt_block(b).unwrap();
        let mine = DbFunction::edit(l, 2, hash_bytes(b"mine"), editor(1), topic());
        let theirs = DbFunction::edit(l, 2, hash_bytes(b"theirs"), editor(2), topic());
        c.submit_tx(mine.clone()).unwrap();
        let other = Block::mine(c.tip(), 2, editor(2), vec![theirs], 0);
        let r = c.adopt_block(other).unwrap();
        assert_eq!(r.dropped, vec![mine]);
        assert!(c.mempool().is_empty());
    }

    fn random_tree(seed: u64, n: usize) -> (Block, Vec<Block>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let genesis = Block::genesis(0);
        let mut all: Vec<Block> = vec![];
        for k in 0..n {
            let parent = if all.is_empty() || rng.random_bool(0.3) {
                genesis.clone()
            } else {
                all[rng.random_range(0..all.len())].clone()
            };
            let txs = if rng.random_bool(0.5) { vec![add(1000 + k as u32)] } else { vec![] };
            all.push(Block::mine(parent.block_hash, parent.height + 1, editor(k as u8), txs, 0));
        }
        (genesis, all)
    }

    proptest! {
        #[test]
        fn fork_choice_matches_oracle(seed in any::<u64>(), n in 1usize..=5, shuffle in any::<u64>()) {
            let (genesis, all) = random_tree(seed, n);
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let mut c = ChainState::new(cfg(0));
            let mut seen = Vec::new();
            for i in order {
                c.adopt_block(all[i].clone()).unwrap();
                seen.push(all[i].clone());
                prop_assert_eq!(c.tip(), oracle_tip(&genesis, &seen));
            }
        }

        #[test]
        fn replay_is_bit_identical(seed in any::<u64>()) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut c = ChainState::new(cfg(1));
                for k in 0..6u32 {
                    c.submit_tx(add(rng.random_range(0..4) * 10 + k)).unwrap();
                    if rng.random_bool(0.5) {
                        let b = c.mine_block(editor(rng.random()), rng.random_range(1..3)).unwrap();
                        c.adopt_block(b).unwrap();
                    }
                }
                c
            };
            prop_assert_eq!(run(), run());
        }
    }
}
