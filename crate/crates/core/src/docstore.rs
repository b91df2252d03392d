//! Per-peer revisioned document store.
//!
//! Each document keeps every revision in sequence order together with the
//! chain position that introduced it. The highest revision is active. A
//! delete appends a tombstone revision and erases every payload of the
//! document while keeping the hashes, sequence numbers and origins.
//!
//! Records that arrive ahead of their predecessor are held per lineage and
//! applied as soon as the gap closes.
//!
//! # Snapshot layout
//!
//! All values use the length-prefixed encoding from [`crate::codec`]:
//!
//! ```text
//! snapshot := field("ecstore1") uint(chunk_size) uint(doc_count) { field(doc) }*
//! doc      := field(lineage) field(topic) byte(deleted) uint(rev_count) { field(rev) }*
//! rev      := uint(seq) byte(task) field(data_hash) uint(origin_height)
//!             uint(origin_index) byte(has_payload) [field(payload)]
//! ```

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{self, DecodeError, Reader, Writer};
use crate::crypto::{payload_root, Digest};
use crate::ledger::{DbFunction, Task, TxPos};

const MAGIC: &[u8] = b"ecstore1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Revision {
    pub seq: u64,
    pub task: Task,
    pub data_hash: Digest,
    pub payload: Option<Vec<u8>>,
    pub origin: TxPos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub lineage: Digest,
    pub topic_id: Digest,
    pub revisions: Vec<Revision>,
    pub deleted: bool,
}

impl Document {
    pub fn max_seq(&self) -> u64 {
        self.revisions.last().map_or(0, |r| r.seq)
    }

    /// Active revision number, `None` once deleted.
    pub fn active_seq(&self) -> Option<u64> {
        if self.deleted {
            None
        } else {
            Some(self.max_seq())
        }
    }

    pub fn revision(&self, seq: u64) -> Option<&Revision> {
        self.revisions.get(seq.checked_sub(1)? as usize)
    }
}

/// Result of a local read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Active<'a> {
    Payload(&'a [u8]),
    Tombstone,
    /// The active revision is recorded without its payload.
    Missing,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApplyOutcome {
    /// Revisions now in the store, in application order. Includes held
    /// records released by this one.
    Applied(Vec<(Digest, u64)>),
    /// Predecessor missing; held until it arrives.
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("payload for {lineage} seq {seq} does not match its data hash")]
    Integrity { lineage: Digest, seq: u64 },
    #[error("lineage {0} already exists")]
    Duplicate(Digest),
    #[error("lineage {lineage}: seq {seq} is not after current {current}")]
    StaleSequence { lineage: Digest, seq: u64, current: u64 },
    #[error("lineage {0} is deleted")]
    Tombstone(Digest),
    #[error("lineage {0} not found")]
    NotFound(Digest),
    #[error("expected a {expected} record, got {got}")]
    WrongTask { expected: Task, got: Task },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Held {
    tx: DbFunction,
    payload: Option<Vec<u8>>,
    origin: TxPos,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RollbackReport {
    /// Revisions removed from documents, in store order.
    pub removed: Vec<(Digest, u64)>,
    /// Lineages dropped entirely because a rolled-back delete left them
    /// without payloads; they must be re-applied from the chain.
    pub reset: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreState {
    chunk_size: usize,
    docs: BTreeMap<Digest, Document>,
    held: BTreeMap<Digest, BTreeMap<u64, Held>>,
    /// Payloads of rolled-back revisions by data hash, with their lineage.
    side_buffer: BTreeMap<Digest, (Digest, Vec<u8>)>,
}

impl StoreState {
    pub fn new(chunk_size: usize) -> Self {
        StoreState {
            chunk_size,
            docs: BTreeMap::new(),
            held: BTreeMap::new(),
            side_buffer: BTreeMap::new(),
        }
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn apply_add(&mut self, tx: &DbFunction, payload: Vec<u8>, origin: TxPos) -> Result<ApplyOutcome, StoreError> {
        expect_task(tx, &[Task::Add])?;
        self.apply(tx, Some(payload), origin)
    }

    pub fn apply_edit(&mut self, tx: &DbFunction, payload: Vec<u8>, origin: TxPos) -> Result<ApplyOutcome, StoreError> {
        expect_task(tx, &[Task::Edit])?;
        self.apply(tx, Some(payload), origin)
    }

    pub fn apply_delete(&mut self, tx: &DbFunction, origin: TxPos) -> Result<ApplyOutcome, StoreError> {
        expect_task(tx, &[Task::Delete])?;
        self.apply(tx, None, origin)
    }

    pub fn apply_add_or_edit(&mut self, tx: &DbFunction, payload: Vec<u8>, origin: TxPos) -> Result<ApplyOutcome, StoreError> {
        expect_task(tx, &[Task::Add, Task::Edit])?;
        self.apply(tx, Some(payload), origin)
    }

    /// Records an add or edit without its payload. Only meaningful for a
    /// lineage whose delete is already confirmed, where the payload would be
    /// erased on arrival anyway.
    pub fn apply_superseded(&mut self, tx: &DbFunction, origin: TxPos) -> Result<ApplyOutcome, StoreError> {
        expect_task(tx, &[Task::Add, Task::Edit])?;
        self.apply(tx, None, origin)
    }

    /// Writes a record without checking the payload against its data hash.
    pub fn apply_trusted(&mut self, tx: &DbFunction, payload: Option<Vec<u8>>, origin: TxPos) -> Result<ApplyOutcome, StoreError> {
        self.apply_inner(tx, payload, origin, false)
    }

    fn apply(&mut self, tx: &DbFunction, payload: Option<Vec<u8>>, origin: TxPos) -> Result<ApplyOutcome, StoreError> {
        self.apply_inner(tx, payload, origin, true)
    }

    fn apply_inner(
        &mut self,
        tx: &DbFunction,
        payload: Option<Vec<u8>>,
        origin: TxPos,
        verify: bool,
    ) -> Result<ApplyOutcome, StoreError> {
        let lineage = tx.lineage_id();
        if let (true, Some(p)) = (verify, &payload) {
            if payload_root(p, self.chunk_size) != tx.data_hash {
                return Err(StoreError::Integrity {
                    lineage,
                    seq: tx.sequence_id,
                });
            }
        }
        let held = Held {
            tx: tx.clone(),
            payload,
            origin,
        };
        match self.docs.get(&lineage) {
            None if tx.task == Task::Add => {}
            Some(_) if tx.task == Task::Add => return Err(StoreError::Duplicate(lineage)),
            None => {
                self.hold(lineage, held);
                return Ok(ApplyOutcome::Deferred);
            }
            Some(doc) => {
                if doc.deleted {
                    return Err(StoreError::Tombstone(lineage));
                }
                let current = doc.max_seq();
                if tx.sequence_id <= current {
                    return Err(StoreError::StaleSequence {
                        lineage,
                        seq: tx.sequence_id,
                        current,
                    });
                }
                if tx.sequence_id > current + 1 {
                    self.hold(lineage, held);
                    return Ok(ApplyOutcome::Deferred);
                }
            }
        }
        let mut applied = vec![self.commit(lineage, held)];
        while let Some(next) = self.release(&lineage) {
            applied.push(self.commit(lineage, next));
        }
        Ok(ApplyOutcome::Applied(applied))
    }

    fn hold(&mut self, lineage: Digest, held: Held) {
        self.held.entry(lineage).or_default().insert(held.tx.sequence_id, held);
    }

    fn release(&mut self, lineage: &Digest) -> Option<Held> {
        let doc = self.docs.get(lineage)?;
        if doc.deleted {
            return None;
        }
        let next = doc.max_seq() + 1;
        let queue = self.held.get_mut(lineage)?;
        let held = queue.remove(&next);
        if queue.is_empty() {
            self.held.remove(lineage);
        }
        held
    }

    fn commit(&mut self, lineage: Digest, held: Held) -> (Digest, u64) {
        let Held { tx, payload, origin } = held;
        let seq = tx.sequence_id;
        let revision = Revision {
            seq,
            task: tx.task,
            data_hash: tx.data_hash,
            payload,
            origin,
        };
        self.side_buffer.remove(&tx.data_hash);
        match tx.task {
            Task::Add => {
                self.docs.insert(
                    lineage,
                    Document {
                        lineage,
                        topic_id: tx.topic_id,
                        revisions: vec![revision],
                        deleted: false,
                    },
                );
            }
            Task::Edit => {
                self.docs.get_mut(&lineage).unwrap().revisions.push(revision);
            }
            Task::Delete => {
                let doc = self.docs.get_mut(&lineage).unwrap();
                for r in &mut doc.revisions {
                    r.payload = None;
                }
                doc.revisions.push(revision);
                doc.deleted = true;
                self.held.remove(&lineage);
                self.side_buffer.retain(|_, (l, _)| *l != lineage);
            }
        }
        (lineage, seq)
    }

    pub fn get_active(&self, lineage: &Digest) -> Active<'_> {
        match self.docs.get(lineage) {
            None => Active::NotFound,
            Some(doc) if doc.deleted => Active::Tombstone,
            Some(doc) => match doc.revisions.last().and_then(|r| r.payload.as_deref()) {
                Some(p) => Active::Payload(p),
                None => Active::Missing,
            },
        }
    }

    pub fn history(&self, lineage: &Digest) -> Result<&[Revision], StoreError> {
        self.docs
            .get(lineage)
            .map(|d| d.revisions.as_slice())
            .ok_or(StoreError::NotFound(*lineage))
    }

    pub fn document(&self, lineage: &Digest) -> Option<&Document> {
        self.docs.get(lineage)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }

    pub fn has_revision(&self, lineage: &Digest, seq: u64) -> bool {
        self.docs.get(lineage).is_some_and(|d| d.max_seq() >= seq)
    }

    pub fn is_held(&self, lineage: &Digest, seq: u64) -> bool {
        self.held.get(lineage).is_some_and(|q| q.contains_key(&seq))
    }

    pub fn payload(&self, lineage: &Digest, seq: u64) -> Option<&[u8]> {
        self.docs.get(lineage)?.revision(seq)?.payload.as_deref()
    }

    /// Highest chain position among stored revisions.
    pub fn applied_upto(&self) -> Option<TxPos> {
        self.docs.values().flat_map(|d| d.revisions.iter().map(|r| r.origin)).max()
    }

    /// `(lineage, seq, data_hash)` of every stored revision.
    pub fn triples(&self) -> BTreeSet<(Digest, u64, Digest)> {
        self.docs
            .values()
            .flat_map(|d| d.revisions.iter().map(move |r| (d.lineage, r.seq, r.data_hash)))
            .collect()
    }

    /// Payload held from a rolled-back revision, if any.
    pub fn take_buffered(&mut self, data_hash: &Digest) -> Option<Vec<u8>> {
        self.side_buffer.remove(data_hash).map(|(_, p)| p)
    }

    pub fn peek_buffered(&self, data_hash: &Digest) -> Option<&[u8]> {
        self.side_buffer.get(data_hash).map(|(_, p)| p.as_slice())
    }

    pub fn side_buffer_len(&self) -> usize {
        self.side_buffer.len()
    }

    /// Removes every revision (stored or held) whose origin is beyond `mark`.
    pub fn rollback_to(&mut self, mark: TxPos) -> RollbackReport {
        let mut report = RollbackReport::default();
        let mut drop_docs = Vec::new();
        for (lineage, doc) in self.docs.iter_mut() {
            let keep = doc.revisions.partition_point(|r| r.origin <= mark);
            if keep == doc.revisions.len() {
                continue;
            }
            let undone_delete = doc.deleted;
            for r in doc.revisions.drain(keep..) {
                report.removed.push((*lineage, r.seq));
                if let Some(p) = r.payload {
                    self.side_buffer.insert(r.data_hash, (*lineage, p));
                }
            }
            doc.deleted = false;
            if doc.revisions.is_empty() {
                drop_docs.push(*lineage);
            } else if undone_delete || doc.revisions.iter().any(|r| r.payload.is_none()) {
                drop_docs.push(*lineage);
                report.reset.push(*lineage);
            }
        }
        for lineage in drop_docs {
            if let Some(doc) = self.docs.remove(&lineage) {
                for r in doc.revisions {
                    if let Some(p) = r.payload {
                        self.side_buffer.insert(r.data_hash, (lineage, p));
                    }
                }
            }
        }
        for (lineage, queue) in self.held.iter_mut() {
            let beyond: Vec<u64> = queue.iter().filter(|(_, h)| h.origin > mark).map(|(s, _)| *s).collect();
            for seq in beyond {
                if let Some(Held { tx, payload: Some(p), .. }) = queue.remove(&seq) {
                    self.side_buffer.insert(tx.data_hash, (*lineage, p));
                }
            }
        }
        self.held.retain(|_, q| !q.is_empty());
        report
    }

    /// Drops held records that will never be released.
    pub fn discard_held(&mut self, lineage: &Digest, seq: u64) {
        if let Some(q) = self.held.get_mut(lineage) {
            q.remove(&seq);
            if q.is_empty() {
                self.held.remove(lineage);
            }
        }
    }

    pub fn held_count(&self) -> usize {
        self.held.values().map(BTreeMap::len).sum()
    }

    pub fn encode_snapshot(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.snapshot_len());
        w.field(MAGIC).uint(self.chunk_size as u64).uint(self.docs.len() as u64);
        for doc in self.docs.values() {
            w.field(&encode_doc(doc));
        }
        w.into_bytes()
    }

    /// Size of [`Self::encode_snapshot`] without building it.
    pub fn snapshot_len(&self) -> usize {
        let docs: usize = self
            .docs
            .values()
            .map(|d| codec::field_len(doc_len(d)))
            .sum();
        codec::field_len(MAGIC.len()) + 2 * codec::field_len(8) + docs
    }

    pub fn decode_snapshot(bytes: &[u8]) -> Result<StoreState, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.field()? != MAGIC {
            return Err(DecodeError::Invalid("snapshot magic"));
        }
        let chunk_size = r.uint()? as usize;
        if chunk_size == 0 {
            return Err(DecodeError::Invalid("chunk size"));
        }
        let n = r.uint()?;
        let mut store = StoreState::new(chunk_size);
        for _ in 0..n {
            let doc = decode_doc(r.field()?)?;
            store.docs.insert(doc.lineage, doc);
        }
        r.finish()?;
        Ok(store)
    }

    /// Human-readable rendering, stable for diffing.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        match self.applied_upto() {
            Some(p) => out.push_str(&format!("applied_upto {p}\n")),
            None => out.push_str("applied_upto -\n"),
        }
        for doc in self.docs.values() {
            let active = doc.active_seq().map_or("tombstone".to_string(), |s| s.to_string());
            out.push_str(&format!(
                "doc {} topic={} deleted={} active={}\n",
                doc.lineage, doc.topic_id, doc.deleted, active
            ));
            for r in &doc.revisions {
                let payload = match &r.payload {
                    Some(p) => format!("{} {}", p.len(), crate::crypto::hash_bytes(p)),
                    None => "- -".to_string(),
                };
                out.push_str(&format!("  rev {} {} {} {} {}\n", r.seq, r.task, r.data_hash, r.origin, payload));
            }
        }
        out
    }
}

fn expect_task(tx: &DbFunction, allowed: &[Task]) -> Result<(), StoreError> {
    if allowed.contains(&tx.task) {
        Ok(())
    } else {
        Err(StoreError::WrongTask {
            expected: allowed[0],
            got: tx.task,
        })
    }
}

fn rev_len(r: &Revision) -> usize {
    3 * codec::field_len(8)
        + 2 * codec::field_len(1)
        + codec::field_len(32)
        + r.payload.as_ref().map_or(0, |p| codec::field_len(p.len()))
}

fn doc_len(d: &Document) -> usize {
    2 * codec::field_len(32)
        + codec::field_len(1)
        + codec::field_len(8)
        + d.revisions.iter().map(|r| codec::field_len(rev_len(r))).sum::<usize>()
}

fn encode_doc(doc: &Document) -> Vec<u8> {
    let mut w = Writer::with_capacity(doc_len(doc));
    w.field(doc.lineage.as_bytes())
        .field(doc.topic_id.as_bytes())
        .byte(doc.deleted as u8)
        .uint(doc.revisions.len() as u64);
    for r in &doc.revisions {
        let mut rw = Writer::with_capacity(rev_len(r));
        rw.uint(r.seq)
            .byte(r.task.code())
            .field(r.data_hash.as_bytes())
            .uint(r.origin.height)
            .uint(r.origin.index as u64);
        match &r.payload {
            Some(p) => {
                rw.byte(1).field(p);
            }
            None => {
                rw.byte(0);
            }
        }
        w.field(rw.as_bytes());
    }
    w.into_bytes()
}

fn decode_doc(bytes: &[u8]) -> Result<Document, DecodeError> {
    let mut r = Reader::new(bytes);
    let lineage = Digest(r.fixed()?);
    let topic_id = Digest(r.fixed()?);
    let deleted = match r.byte()? {
        0 => false,
        1 => true,
        _ => return Err(DecodeError::Invalid("deleted flag")),
    };
    let n = r.uint()?;
    let mut revisions = Vec::new();
    for _ in 0..n {
        let mut rr = Reader::new(r.field()?);
        let seq = rr.uint()?;
        let task = Task::from_code(rr.byte()?).ok_or(DecodeError::Invalid("task code"))?;
        let data_hash = Digest(rr.fixed()?);
        let height = rr.uint()?;
        let index = u32::try_from(rr.uint()?).map_err(|_| DecodeError::Invalid("origin index"))?;
        let payload = match rr.byte()? {
            0 => None,
            1 => Some(rr.field()?.to_vec()),
            _ => return Err(DecodeError::Invalid("payload flag")),
        };
        rr.finish()?;
        revisions.push(Revision {
            seq,
            task,
            data_hash,
            payload,
            origin: TxPos::new(height, index),
        });
    }
    r.finish()?;
    Ok(Document {
        lineage,
        topic_id,
        revisions,
        deleted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{hash_bytes, DEFAULT_CHUNK_SIZE};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CS: usize = 64;

    fn root(p: &[u8]) -> Digest {
        payload_root(p, CS)
    }

    fn ed() -> Digest {
        hash_bytes(b"editor")
    }

    fn topic() -> Digest {
        hash_bytes(b"topic")
    }

    struct Lineage {
        add: DbFunction,
        id: Digest,
    }

    fn new_doc(p: &[u8]) -> Lineage {
        let add = DbFunction::add(root(p), ed(), topic());
        let id = add.id();
        Lineage { add, id }
    }

    fn edit(l: &Lineage, seq: u64, p: &[u8]) -> DbFunction {
        DbFunction::edit(l.id, seq, root(p), ed(), topic())
    }

    fn pos(h: u64) -> TxPos {
        TxPos::new(h, 0)
    }

    #[test]
    fn add_then_read() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"payload one");
        let out = s.apply_add(&l.add, b"payload one".to_vec(), pos(1)).unwrap();
        assert_eq!(out, ApplyOutcome::Applied(vec![(l.id, 1)]));
        assert_eq!(s.get_active(&l.id), Active::Payload(b"payload one"));
        assert_eq!(s.history(&l.id).unwrap().len(), 1);
        assert_eq!(s.applied_upto(), Some(pos(1)));
    }

    #[test]
    fn tampered_payload_is_refused() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"payload one");
        let err = s.apply_add(&l.add, b"payload onf".to_vec(), pos(1)).unwrap_err();
        assert!(matches!(err, StoreError::Integrity { .. }));
        assert_eq!(s.get_active(&l.id), Active::NotFound);
    }

    #[test]
    fn two_lineages_two_documents() {
        let mut s = StoreState::new(CS);
        for (i, p) in [b"a".as_slice(), b"b"].iter().enumerate() {
            let l = new_doc(p);
            s.apply_add(&l.add, p.to_vec(), pos(i as u64 + 1)).unwrap();
        }
        assert_eq!(s.documents().count(), 2);
        let l = new_doc(b"a");
        assert_eq!(
            s.apply_add(&l.add, b"a".to_vec(), pos(9)),
            Err(StoreError::Duplicate(l.id))
        );
    }

    #[test]
    fn edit_increments_and_keeps_history() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"v1");
        s.apply_add(&l.add, b"v1".to_vec(), pos(1)).unwrap();
        s.apply_edit(&edit(&l, 2, b"v2"), b"v2".to_vec(), pos(2)).unwrap();
        assert_eq!(s.document(&l.id).unwrap().active_seq(), Some(2));
        let seqs: Vec<u64> = s.history(&l.id).unwrap().iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![1, 2]);
        assert_eq!(s.payload(&l.id, 1), Some(b"v1".as_slice()));
        assert_eq!(s.get_active(&l.id), Active::Payload(b"v2"));
        assert!(matches!(
            s.apply_edit(&edit(&l, 2, b"v2"), b"v2".to_vec(), pos(3)),
            Err(StoreError::StaleSequence { current: 2, .. })
        ));
    }

    #[test]
    fn out_of_order_edit_is_held_then_released() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"v1");
        s.apply_add(&l.add, b"v1".to_vec(), pos(1)).unwrap();
        let out = s.apply_edit(&edit(&l, 3, b"v3"), b"v3".to_vec(), pos(3)).unwrap();
        assert_eq!(out, ApplyOutcome::Deferred);
        assert!(s.is_held(&l.id, 3));
        assert_eq!(s.document(&l.id).unwrap().max_seq(), 1);
        let out = s.apply_edit(&edit(&l, 2, b"v2"), b"v2".to_vec(), pos(2)).unwrap();
        assert_eq!(out, ApplyOutcome::Applied(vec![(l.id, 2), (l.id, 3)]));
        assert_eq!(s.get_active(&l.id), Active::Payload(b"v3"));
        assert_eq!(s.held_count(), 0);
    }

    #[test]
    fn delete_erases_payloads() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"v1");
        s.apply_add(&l.add, b"v1".to_vec(), pos(1)).unwrap();
        s.apply_edit(&edit(&l, 2, b"v2"), b"v2".to_vec(), pos(2)).unwrap();
        s.apply_delete(&DbFunction::delete(l.id, 3, ed(), topic()), pos(3)).unwrap();
        let doc = s.document(&l.id).unwrap();
        assert!(doc.deleted);
        assert_eq!(doc.revisions.len(), 3);
        assert!(doc.revisions.iter().all(|r| r.payload.is_none()));
        assert_eq!(doc.active_seq(), None);
        assert_eq!(s.get_active(&l.id), Active::Tombstone);
        assert_eq!(
            s.apply_edit(&edit(&l, 4, b"v4"), b"v4".to_vec(), pos(4)),
            Err(StoreError::Tombstone(l.id))
        );
    }

    #[test]
    fn delete_on_unknown_lineage_waits() {
        let mut s = StoreState::new(CS);
        let d = DbFunction::delete(hash_bytes(b"ghost"), 2, ed(), topic());
        assert_eq!(s.apply_delete(&d, pos(5)).unwrap(), ApplyOutcome::Deferred);
        assert_eq!(s.get_active(&hash_bytes(b"ghost")), Active::NotFound);
    }

    #[test]
    fn history_errors() {
        let s = StoreState::new(CS);
        assert_eq!(s.history(&Digest::ZERO), Err(StoreError::NotFound(Digest::ZERO)));
    }

    #[test]
    fn wrong_task_is_rejected() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"v1");
        assert!(matches!(
            s.apply_edit(&l.add, b"v1".to_vec(), pos(1)),
            Err(StoreError::WrongTask { .. })
        ));
    }

    #[test]
    fn rollback_reverts_and_reapplies() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"v1");
        s.apply_add(&l.add, b"v1".to_vec(), pos(1)).unwrap();
        let before = s.clone();
        let e2 = edit(&l, 2, b"v2");
        s.apply_edit(&e2, b"v2".to_vec(), pos(2)).unwrap();
        let after = s.clone();

        let noop = s.rollback_to(TxPos::end_of_block(2));
        assert_eq!(noop, RollbackReport::default());
        assert_eq!(s, after);

        let report = s.rollback_to(TxPos::end_of_block(1));
        assert_eq!(report.removed, vec![(l.id, 2)]);
        assert_eq!(s.document(&l.id).unwrap().active_seq(), Some(1));
        assert_eq!(s.docs, before.docs);

        let p = s.take_buffered(&e2.data_hash).unwrap();
        s.apply_edit(&e2, p, pos(2)).unwrap();
        assert_eq!(s, after);
    }

    #[test]
    fn rolled_back_delete_resets_lineage() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"v1");
        s.apply_add(&l.add, b"v1".to_vec(), pos(1)).unwrap();
        s.apply_delete(&DbFunction::delete(l.id, 2, ed(), topic()), pos(2)).unwrap();
        let r = s.rollback_to(TxPos::end_of_block(1));
        assert_eq!(r.reset, vec![l.id]);
        assert_eq!(s.get_active(&l.id), Active::NotFound);
    }

    #[test]
    fn rollback_drops_held_records_beyond_mark() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"v1");
        s.apply_add(&l.add, b"v1".to_vec(), pos(1)).unwrap();
        let e3 = edit(&l, 3, b"v3");
        s.apply_edit(&e3, b"v3".to_vec(), pos(3)).unwrap();
        s.rollback_to(TxPos::end_of_block(2));
        assert_eq!(s.held_count(), 0);
        assert_eq!(s.peek_buffered(&e3.data_hash), Some(b"v3".as_slice()));
    }

    #[test]
    fn superseded_revisions_then_delete() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"v1");
        s.apply_superseded(&l.add, pos(1)).unwrap();
        assert_eq!(s.get_active(&l.id), Active::Missing);
        s.apply_delete(&DbFunction::delete(l.id, 2, ed(), topic()), pos(2)).unwrap();
        assert_eq!(s.get_active(&l.id), Active::Tombstone);
    }

    #[test]
    fn snapshot_roundtrip_and_length() {
        let mut s = StoreState::new(CS);
        let l = new_doc(b"v1");
        s.apply_add(&l.add, b"v1".to_vec(), pos(1)).unwrap();
        s.apply_edit(&edit(&l, 2, b"v2"), b"v2".to_vec(), TxPos::new(2, 3)).unwrap();
        let m = new_doc(b"other");
        s.apply_add(&m.add, b"other".to_vec(), pos(3)).unwrap();
        s.apply_delete(&DbFunction::delete(m.id, 2, ed(), topic()), pos(4)).unwrap();
        let bytes = s.encode_snapshot();
        assert_eq!(bytes.len(), s.snapshot_len());
        let back = StoreState::decode_snapshot(&bytes).unwrap();
        assert_eq!(back.dump(), s.dump());
        assert_eq!(back.encode_snapshot(), bytes);
        assert!(StoreState::decode_snapshot(&bytes[..bytes.len() - 1]).is_err());
        assert!(s.dump().contains("active=tombstone"));
    }

    #[test]
    fn deletion_leaves_no_payload_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for round in 0..50 {
            let mut s = StoreState::new(DEFAULT_CHUNK_SIZE);
            let mut erased: Vec<Vec<u8>> = Vec::new();
            let mut kept: Vec<Vec<u8>> = Vec::new();
            for d in 0..4u64 {
                let p1: Vec<u8> = (0..rng.random_range(16..5000)).map(|_| rng.random()).collect();
                let add = DbFunction::add(payload_root(&p1, DEFAULT_CHUNK_SIZE), ed(), topic());
                let id = add.id();
                s.apply_add(&add, p1.clone(), TxPos::new(d * 10 + 1, 0)).unwrap();
                let p2: Vec<u8> = (0..rng.random_range(16..5000)).map(|_| rng.random()).collect();
                let e = DbFunction::edit(id, 2, payload_root(&p2, DEFAULT_CHUNK_SIZE), ed(), topic());
                s.apply_edit(&e, p2.clone(), TxPos::new(d * 10 + 2, 0)).unwrap();
                if d % 2 == round % 2 {
                    s.apply_delete(&DbFunction::delete(id, 3, ed(), topic()), TxPos::new(d * 10 + 3, 0))
                        .unwrap();
                    erased.extend([p1, p2]);
                } else {
                    kept.extend([p1, p2]);
                }
            }
            let snap = s.encode_snapshot();
            for p in &erased {
                for w in p.windows(16) {
                    assert!(!snap.windows(16).any(|x| x == w), "erased bytes survive");
                }
            }
            for p in &kept {
                assert!(snap.windows(p.len()).any(|x| x == p.as_slice()));
            }
        }
    }

    proptest! {
        #[test]
        fn active_is_max_and_seqs_gap_free(ops in prop::collection::vec((0u8..3, 0usize..3), 1..40)) {
            let mut s = StoreState::new(CS);
            let mut ids: Vec<Digest> = Vec::new();
            let mut h = 0u64;
            for (kind, which) in ops {
                h += 1;
                let body = h.to_be_bytes().to_vec();
                if kind == 0 || ids.is_empty() {
                    let add = DbFunction::add(root(&body), ed(), topic());
                    ids.push(add.id());
                    s.apply_add(&add, body, pos(h)).unwrap();
                    continue;
                }
                let id = ids[which % ids.len()];
                let doc = s.document(&id).unwrap();
                if doc.deleted { continue; }
                let seq = doc.max_seq() + 1;
                if kind == 1 {
                    s.apply_edit(&DbFunction::edit(id, seq, root(&body), ed(), topic()), body, pos(h)).unwrap();
                } else {
                    s.apply_delete(&DbFunction::delete(id, seq, ed(), topic()), pos(h)).unwrap();
                }
            }
            for doc in s.documents() {
                let seqs: Vec<u64> = doc.revisions.iter().map(|r| r.seq).collect();
                prop_assert_eq!(seqs, (1..=doc.max_seq()).collect::<Vec<_>>());
                if !doc.deleted {
                    prop_assert_eq!(doc.active_seq(), Some(doc.max_seq()));
                } else {
                    prop_assert!(doc.revisions.iter().all(|r| r.payload.is_none()));
                }
            }
        }
    }
}
