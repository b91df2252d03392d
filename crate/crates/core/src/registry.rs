//! State machines derived from the chain.
//!
//! [`DataRegistry`] folds canonical records into per-lineage sequence state and
//! enforces the revision rules. [`LocationRegistry`] is the peer directory
//! used to find off-chain sources.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::ledger::{ChainState, DbFunction, Task, TxPos};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RejectReason {
    #[error("unknown-lineage")]
    UnknownLineage,
    #[error("stale-sequence (expected {expected}, got {got})")]
    StaleSequence { expected: u64, got: u64 },
    #[error("duplicate-add")]
    DuplicateAdd,
    #[error("already-deleted")]
    AlreadyDeleted,
    #[error("malformed: {0}")]
    Malformed(&'static str),
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::UnknownLineage => "unknown-lineage",
            RejectReason::StaleSequence { .. } => "stale-sequence",
            RejectReason::DuplicateAdd => "duplicate-add",
            RejectReason::AlreadyDeleted => "already-deleted",
            RejectReason::Malformed(_) => "malformed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineageState {
    pub topic_id: Digest,
    pub latest_seq: u64,
    pub deleted: bool,
}

/// Validates `tx` against lineage state supplied by `lookup` and returns the
/// lineage id with its state after the record.
pub fn check_tx(
    tx: &DbFunction,
    chunk_size: usize,
    lookup: impl Fn(&Digest) -> Option<LineageState>,
) -> Result<(Digest, LineageState), RejectReason> {
    tx.check_shape(chunk_size)?;
    match tx.task {
        Task::Add => {
            if tx.sequence_id != 1 {
                return Err(RejectReason::StaleSequence {
                    expected: 1,
                    got: tx.sequence_id,
                });
            }
            let lineage = tx.id();
            if lookup(&lineage).is_some() {
                return Err(RejectReason::DuplicateAdd);
            }
            Ok((
                lineage,
                LineageState {
                    topic_id: tx.topic_id,
                    latest_seq: 1,
                    deleted: false,
                },
            ))
        }
        Task::Edit | Task::Delete => {
            let state = lookup(&tx.lineage).ok_or(RejectReason::UnknownLineage)?;
            if state.deleted {
                return Err(RejectReason::AlreadyDeleted);
            }
            if tx.topic_id != state.topic_id {
                return Err(RejectReason::Malformed("topic differs from lineage"));
            }
            if tx.sequence_id != state.latest_seq + 1 {
                return Err(RejectReason::StaleSequence {
                    expected: state.latest_seq + 1,
                    got: tx.sequence_id,
                });
            }
            Ok((
                tx.lineage,
                LineageState {
                    topic_id: state.topic_id,
                    latest_seq: tx.sequence_id,
                    deleted: tx.task == Task::Delete,
                },
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub pos: TxPos,
    pub lineage: Digest,
    pub tx: DbFunction,
}

/// Every accepted record on a chain, in chain order, plus per-lineage state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRegistry {
    chunk_size: usize,
    entries: Vec<RegistryEntry>,
    lineages: BTreeMap<Digest, LineageState>,
    skipped: u64,
}

impl DataRegistry {
    pub fn new(chunk_size: usize) -> Self {
        DataRegistry {
            chunk_size,
            entries: Vec::new(),
            lineages: BTreeMap::new(),
            skipped: 0,
        }
    }

    /// Folds the canonical chain from scratch.
    pub fn rebuild(chain: &ChainState) -> Self {
        Self::rebuild_from(chain.config().chunk_size, chain.canonical_txs())
    }

    pub fn rebuild_from<'a>(chunk_size: usize, txs: impl IntoIterator<Item = (TxPos, &'a DbFunction)>) -> Self {
        let mut reg = DataRegistry::new(chunk_size);
        for (pos, tx) in txs {
            reg.apply_or_skip(pos, tx);
        }
        reg
    }

    pub fn validate_tx(&self, tx: &DbFunction) -> Result<Digest, RejectReason> {
        check_tx(tx, self.chunk_size, |l| self.lineages.get(l).copied()).map(|(l, _)| l)
    }

    pub fn apply(&mut self, pos: TxPos, tx: &DbFunction) -> Result<Digest, RejectReason> {
        let (lineage, state) = check_tx(tx, self.chunk_size, |l| self.lineages.get(l).copied())?;
        self.lineages.insert(lineage, state);
        self.entries.push(RegistryEntry {
            pos,
            lineage,
            tx: tx.clone(),
        });
        Ok(lineage)
    }

    /// Applies a record, counting it as skipped when invalid.
    pub fn apply_or_skip(&mut self, pos: TxPos, tx: &DbFunction) -> bool {
        match self.apply(pos, tx) {
            Ok(_) => true,
            Err(_) => {
                self.skipped += 1;
                false
            }
        }
    }

    /// Drops entries above `height` and recomputes lineage state.
    pub fn truncate(&mut self, height: u64) {
        let keep = self.entries.partition_point(|e| e.pos.height <= height);
        if keep == self.entries.len() {
            return;
        }
        let kept: Vec<RegistryEntry> = self.entries.drain(..keep).collect();
        self.entries.clear();
        self.lineages.clear();
        for e in kept {
            self.apply_or_skip(e.pos, &e.tx);
        }
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn lineage(&self, lineage: &Digest) -> Option<&LineageState> {
        self.lineages.get(lineage)
    }

    pub fn lineages(&self) -> impl Iterator<Item = (&Digest, &LineageState)> {
        self.lineages.iter()
    }

    pub fn latest_seq(&self, lineage: &Digest) -> Option<u64> {
        self.lineages.get(lineage).map(|s| s.latest_seq)
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn entries_for<'a>(&'a self, lineage: &'a Digest) -> impl Iterator<Item = &'a RegistryEntry> + 'a {
        self.entries.iter().filter(move |e| &e.lineage == lineage)
    }

    pub fn query_by_topic(&self, topic: &Digest) -> Vec<&DbFunction> {
        self.entries
            .iter()
            .filter(|e| &e.tx.topic_id == topic)
            .map(|e| &e.tx)
            .collect()
    }

    pub fn query_by_editor(&self, editor: &Digest) -> Vec<&DbFunction> {
        self.entries
            .iter()
            .filter(|e| &e.tx.editor_hash == editor)
            .map(|e| &e.tx)
            .collect()
    }

    /// One line per accepted record:
    /// `height:index task lineage seq data_hash editor topic`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                e.pos, e.tx.task, e.lineage, e.tx.sequence_id, e.tx.data_hash, e.tx.editor_hash, e.tx.topic_id
            ));
        }
        out
    }
}

/// Opaque off-chain address of a peer (at most 32 bytes).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location(String);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LocationError {
    #[error("location token longer than 32 bytes")]
    TooLong,
    #[error("peer {0} not registered")]
    NotRegistered(Digest),
    #[error("peer {0} not found")]
    NotFound(Digest),
}

impl Location {
    pub fn new(token: impl Into<String>) -> Result<Self, LocationError> {
        let token = token.into();
        if token.len() > 32 {
            return Err(LocationError::TooLong);
        }
        Ok(Location(token))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerLocation {
    pub editor_hash: Digest,
    pub location: Location,
}

/// Peer directory with a tip-scoped "up to date" set.
///
/// Unlike a fixed-size contract array this grows without bound, and lookups
/// of unknown peers return an explicit error.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocationRegistry {
    all_peers: IndexMap<Digest, PeerLocation>,
    up_to_date: IndexSet<Digest>,
    up_to_date_tip: Option<Digest>,
}

impl LocationRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_peer(&mut self, peer: PeerLocation) {
        self.all_peers.insert(peer.editor_hash, peer);
    }

    /// Records that `editor` holds everything up to `tip`. Peers recorded for
    /// any other tip are evicted.
    pub fn mark_up_to_date(&mut self, editor: &Digest, tip: Digest) -> Result<(), LocationError> {
        if !self.all_peers.contains_key(editor) {
            return Err(LocationError::NotRegistered(*editor));
        }
        if self.up_to_date_tip != Some(tip) {
            self.up_to_date.clear();
            self.up_to_date_tip = Some(tip);
        }
        self.up_to_date.insert(*editor);
        Ok(())
    }

    pub fn get_peer_location(&self, editor: &Digest) -> Result<&Location, LocationError> {
        self.all_peers
            .get(editor)
            .map(|p| &p.location)
            .ok_or(LocationError::NotFound(*editor))
    }

    /// First up-to-date peer in insertion order.
    pub fn get_up_to_date_peer(&self) -> Option<&PeerLocation> {
        self.up_to_date.first().map(|e| &self.all_peers[e])
    }

    pub fn up_to_date_tip(&self) -> Option<Digest> {
        self.up_to_date_tip
    }

    pub fn up_to_date_peers(&self) -> impl Iterator<Item = &PeerLocation> {
        self.up_to_date.iter().map(move |e| &self.all_peers[e])
    }

    pub fn is_up_to_date(&self, editor: &Digest, tip: &Digest) -> bool {
        self.up_to_date_tip.as_ref() == Some(tip) && self.up_to_date.contains(editor)
    }

    pub fn all_peers(&self) -> impl Iterator<Item = &PeerLocation> {
        self.all_peers.values()
    }

    pub fn len(&self) -> usize {
        self.all_peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all_peers.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{hash_bytes, DEFAULT_CHUNK_SIZE};
    use crate::ledger::{Block, ChainConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(name: &str) -> Digest {
        hash_bytes(name.as_bytes())
    }

    fn reg() -> DataRegistry {
        DataRegistry::new(DEFAULT_CHUNK_SIZE)
    }

    #[test]
    fn sequence_rules() {
        let mut r = reg();
        let a = DbFunction::add(t("v1"), t("ed"), t("topic"));
        let l = r.apply(TxPos::new(1, 0), &a).unwrap();
        assert_eq!(l, a.id());
        assert_eq!(r.validate_tx(&a), Err(RejectReason::DuplicateAdd));

        let e2 = DbFunction::edit(l, 2, t("v2"), t("ed"), t("topic"));
        r.apply(TxPos::new(2, 0), &e2).unwrap();
        let again = DbFunction::edit(l, 2, t("v2b"), t("ed"), t("topic"));
        assert_eq!(
            r.validate_tx(&again),
            Err(RejectReason::StaleSequence { expected: 3, got: 2 })
        );

        let d = DbFunction::delete(l, 3, t("ed"), t("topic"));
        r.apply(TxPos::new(3, 0), &d).unwrap();
        assert_eq!(r.latest_seq(&l), Some(3));
        assert!(r.lineage(&l).unwrap().deleted);
        let late = DbFunction::edit(l, 4, t("v4"), t("ed"), t("topic"));
        assert_eq!(r.validate_tx(&late), Err(RejectReason::AlreadyDeleted));

        let stray = DbFunction::edit(t("nope"), 2, t("x"), t("ed"), t("topic"));
        assert_eq!(r.validate_tx(&stray), Err(RejectReason::UnknownLineage));
    }

    #[test]
    fn add_with_wrong_sequence() {
        let mut a = DbFunction::add(t("v1"), t("ed"), t("topic"));
        a.sequence_id = 2;
        assert_eq!(reg().validate_tx(&a).unwrap_err().code(), "stale-sequence");
    }

    #[test]
    fn inline_payload_must_match() {
        let a = DbFunction::add(t("not the root"), t("ed"), t("topic")).with_inline(b"body".to_vec());
        assert!(matches!(reg().validate_tx(&a), Err(RejectReason::Malformed(_))));
    }

    #[test]
    fn topic_queries_partition_entries() {
        let mut r = reg();
        assert!(r.query_by_topic(&t("T")).is_empty());
        let txs = [
            DbFunction::add(t("1"), t("ed"), t("T")),
            DbFunction::add(t("2"), t("ed"), t("U")),
            DbFunction::add(t("3"), t("ed2"), t("T")),
        ];
        for (i, tx) in txs.iter().enumerate() {
            r.apply(TxPos::new(1, i as u32), tx).unwrap();
        }
        let hits = r.query_by_topic(&t("T"));
        assert_eq!(hits, vec![&txs[0], &txs[2]]);
        let rest: Vec<_> = r.entries().iter().filter(|e| e.tx.topic_id != t("T")).collect();
        assert_eq!(hits.len() + rest.len(), r.entries().len());
        assert_eq!(r.query_by_editor(&t("ed2")), vec![&txs[2]]);
    }

    #[test]
    fn rebuild_empty_chain() {
        let c = ChainState::new(ChainConfig {
            difficulty_bits: 0,
            ..Default::default()
        });
        let r = DataRegistry::rebuild(&c);
        assert!(r.entries().is_empty());
        assert_eq!(r.skipped(), 0);
    }

    #[test]
    fn rebuild_skips_invalid_records_deterministically() {
        let a = DbFunction::add(t("1"), t("ed"), t("T"));
        let bad = DbFunction::edit(a.id(), 5, t("x"), t("ed"), t("T"));
        let txs = [(TxPos::new(1, 0), &a), (TxPos::new(1, 1), &bad)];
        let r = DataRegistry::rebuild_from(DEFAULT_CHUNK_SIZE, txs);
        assert_eq!(r.entries().len(), 1);
        assert_eq!(r.skipped(), 1);
    }

    #[test]
    fn truncate_recomputes_lineages() {
        let mut r = reg();
        let a = DbFunction::add(t("1"), t("ed"), t("T"));
        let l = r.apply(TxPos::new(1, 0), &a).unwrap();
        r.apply(TxPos::new(2, 0), &DbFunction::edit(l, 2, t("2"), t("ed"), t("T"))).unwrap();
        r.truncate(1);
        assert_eq!(r.latest_seq(&l), Some(1));
        assert_eq!(r.entries().len(), 1);
    }

    /// Random valid-ish op stream; returns records ready for submission.
    fn random_ops(seed: u64, n: usize) -> Vec<DbFunction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shadow: Vec<(Digest, u64, bool)> = Vec::new();
        let mut out = Vec::new();
        for k in 0..n {
            let body = t(&format!("{seed}-{k}"));
            if shadow.is_empty() || rng.random_bool(0.35) {
                let a = DbFunction::add(body, t("ed"), t("T"));
                shadow.push((a.id(), 1, false));
                out.push(a);
                continue;
            }
            let i = rng.random_range(0..shadow.len());
            let (l, seq, deleted) = shadow[i];
            if deleted {
                continue;
            }
            if rng.random_bool(0.2) {
                out.push(DbFunction::delete(l, seq + 1, t("ed"), t("T")));
                shadow[i] = (l, seq + 1, true);
            } else {
                out.push(DbFunction::edit(l, seq + 1, body, t("ed"), t("T")));
                shadow[i].1 += 1;
            }
        }
        out
    }

    #[test]
    fn rebuild_equals_incremental_tracking() {
        for seed in 0..10u64 {
            let mut c = ChainState::new(ChainConfig {
                difficulty_bits: 0,
                ..Default::default()
            });
            let mut incremental = reg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let ops = random_ops(seed, 50);
            let total = ops.len();
            for tx in ops {
                c.submit_tx(tx).unwrap();
                if rng.random_bool(0.4) {
                    let b = c.mine_block(t("miner"), 8).unwrap();
                    let report = c.adopt_block(b).unwrap();
                    for (pos, tx) in &report.applied {
                        incremental.apply(*pos, tx).unwrap();
                    }
                }
            }
            while !c.mempool().is_empty() {
                let b = c.mine_block(t("miner"), 8).unwrap();
                for (pos, tx) in c.adopt_block(b).unwrap().applied {
                    incremental.apply(pos, &tx).unwrap();
                }
            }
            assert_eq!(c.registry().entries().len(), total);
            assert_eq!(DataRegistry::rebuild(&c), incremental);
            assert_eq!(c.registry(), &incremental);
        }
    }

    #[test]
    fn rebuild_after_reorg_matches_incremental_repair() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = ChainState::new(ChainConfig {
                difficulty_bits: 0,
                ..Default::default()
            });
            let ops = random_ops(seed, 12);
            let mut incremental = reg();
            let genesis = c.tip();
            let mut blocks_a = Vec::new();
            let mut parent = genesis;
            for (h, chunk) in ops[..6].chunks(2).enumerate() {
                let b = Block::mine(parent, h as u64 + 1, t("a"), chunk.to_vec(), 0);
                parent = b.block_hash;
                blocks_a.push(b);
            }
            for b in &blocks_a {
                for (pos, tx) in c.adopt_block(b.clone()).unwrap().applied {
                    incremental.apply(pos, &tx).unwrap();
                }
            }
            // Competing branch forking at a random height, one block longer.
            let fork_at = rng.random_range(0..=2usize);
            let mut parent = if fork_at == 0 { genesis } else { blocks_a[fork_at - 1].block_hash };
            let mut branch_reg = DataRegistry::rebuild_from(
                DEFAULT_CHUNK_SIZE,
                c.canonical_txs().filter(|(p, _)| p.height as usize <= fork_at),
            );
            for h in fork_at + 1..=4 {
                let mut txs = Vec::new();
                for tx in ops.iter() {
                    if txs.len() < 2 && branch_reg.validate_tx(tx).is_ok() {
                        branch_reg.apply(TxPos::new(h as u64, txs.len() as u32), tx).unwrap();
                        txs.push(tx.clone());
                    }
                }
                let b = Block::mine(parent, h as u64, t("b"), txs, 0);
                parent = b.block_hash;
                let report = c.adopt_block(b).unwrap();
                if !report.rolled_back.is_empty() || report.tip_changed() {
                    incremental.truncate(report.common_height);
                }
                for (pos, tx) in &report.applied {
                    incremental.apply(*pos, tx).unwrap();
                }
            }
            assert_eq!(c.tip_height(), 4);
            assert_eq!(DataRegistry::rebuild(&c), incremental);
        }
    }

    #[test]
    fn location_registry_basics() {
        let mut r = LocationRegistry::new();
        let a = t("A");
        let b = t("B");
        assert_eq!(r.get_peer_location(&a), Err(LocationError::NotFound(a)));
        assert_eq!(r.mark_up_to_date(&a, t("tip")), Err(LocationError::NotRegistered(a)));
        r.register_peer(PeerLocation {
            editor_hash: a,
            location: Location::new("n0").unwrap(),
        });
        assert_eq!(r.get_peer_location(&a).unwrap().as_str(), "n0");
        r.register_peer(PeerLocation {
            editor_hash: a,
            location: Location::new("n0-moved").unwrap(),
        });
        assert_eq!(r.get_peer_location(&a).unwrap().as_str(), "n0-moved");
        assert!(r.get_up_to_date_peer().is_none());

        r.register_peer(PeerLocation {
            editor_hash: b,
            location: Location::new("n1").unwrap(),
        });
        r.mark_up_to_date(&a, t("T")).unwrap();
        r.mark_up_to_date(&b, t("T")).unwrap();
        assert_eq!(r.get_up_to_date_peer().unwrap().editor_hash, a);
        r.mark_up_to_date(&b, t("T2")).unwrap();
        assert_eq!(r.up_to_date_peers().count(), 1);
        assert_eq!(r.get_up_to_date_peer().unwrap().editor_hash, b);
        assert!(!r.is_up_to_date(&a, &t("T2")));
    }

    #[test]
    fn registry_is_unbounded() {
        let mut r = LocationRegistry::new();
        for i in 0..101u32 {
            r.register_peer(PeerLocation {
                editor_hash: hash_bytes(&i.to_be_bytes()),
                location: Location::new(format!("n{i}")).unwrap(),
            });
        }
        assert_eq!(r.len(), 101);
        assert_eq!(
            r.get_peer_location(&hash_bytes(&100u32.to_be_bytes())).unwrap().as_str(),
            "n100"
        );
        assert_eq!(Location::new("x".repeat(33)), Err(LocationError::TooLong));
    }

    proptest! {
        #[test]
        fn accepted_sequences_are_gap_free(seed in any::<u64>(), n in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lineages: Vec<DbFunction> = (0..3).map(|i| DbFunction::add(t(&format!("a{i}")), t("ed"), t("T"))).collect();
            let mut r = reg();
            let mut h = 0;
            for _ in 0..n {
                h += 1;
                let tx = match rng.random_range(0..4) {
                    0 => lineages[rng.random_range(0..3)].clone(),
                    1 => DbFunction::delete(lineages[rng.random_range(0..3)].id(), rng.random_range(1..6), t("ed"), t("T")),
                    _ => DbFunction::edit(lineages[rng.random_range(0..3)].id(), rng.random_range(1..6), t(&format!("{h}")), t("ed"), t("T")),
                };
                let deleted_before = r.lineage(&tx.lineage_id()).is_some_and(|s| s.deleted);
                let ok = r.apply(TxPos::new(h, 0), &tx).is_ok();
                if deleted_before && tx.task != Task::Add {
                    prop_assert!(!ok);
                }
            }
            for a in &lineages {
                let seqs: Vec<u64> = r.entries_for(&a.id()).map(|e| e.tx.sequence_id).collect();
                let expect: Vec<u64> = (1..=seqs.len() as u64).collect();
                prop_assert_eq!(seqs, expect);
            }
        }
    }
}
