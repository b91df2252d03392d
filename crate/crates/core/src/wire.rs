//! Off-chain messages exchanged between peers.
//!
//! Every message encodes as `byte(tag)` followed by its fields in the
//! length-prefixed encoding of [`crate::codec`]:
//!
//! | tag | message        | fields |
//! |-----|----------------|--------|
//! | 1   | Request        | lineage, seq, data_hash, first_chunk, chunk_count, uint(n), n × topic |
//! | 2   | Response       | lineage, seq, data_hash, topic, leaf_count, uint(n), n × field(chunk) field(proof) |
//! | 3   | Refusal        | lineage, seq, byte(reason) |
//! | 4   | BlockAnnounce  | field(block) |
//! | 5   | BlockRequest   | from_height, uint(n), n × locator hash |
//! | 6   | BlockRange     | uint(n), n × field(block) |
//! | 7   | TxAnnounce     | field(record) |
//!
//! A proof encodes as `leaf_index, leaf_count, uint(n), n × sibling`.

use std::fmt;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{Digest, MerkleProof};
use crate::ledger::{Block, DbFunction};

/// `chunk_count` value asking for every chunk from `first_chunk` on.
pub const ALL_CHUNKS: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub lineage: Digest,
    pub seq: u64,
    pub data_hash: Digest,
    pub first_chunk: u64,
    pub chunk_count: u64,
    /// Topics the requester replicates; empty means all.
    pub declared_topics: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkBundle {
    pub lineage: Digest,
    pub seq: u64,
    pub data_hash: Digest,
    pub topic_id: Digest,
    pub leaf_count: u64,
    pub chunks: Vec<(Vec<u8>, MerkleProof)>,
}

impl ChunkBundle {
    pub fn payload_len(&self) -> usize {
        self.chunks.iter().map(|(c, _)| c.len()).sum()
    }

    /// True when the bundle carries leaves `0..leaf_count` in order.
    pub fn is_complete(&self) -> bool {
        self.leaf_count > 0
            && self.chunks.len() as u64 == self.leaf_count
            && self
                .chunks
                .iter()
                .enumerate()
                .all(|(i, (_, p))| p.leaf_index == i as u64 && p.leaf_count == self.leaf_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefusalReason {
    NotHeld,
    FilterRefused,
}

impl RefusalReason {
    fn code(self) -> u8 {
        match self {
            RefusalReason::NotHeld => 1,
            RefusalReason::FilterRefused => 2,
        }
    }
}

impl fmt::Display for RefusalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefusalReason::NotHeld => "not-held",
            RefusalReason::FilterRefused => "filter-refused",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(Request),
    Response(ChunkBundle),
    Refusal {
        lineage: Digest,
        seq: u64,
        reason: RefusalReason,
    },
    BlockAnnounce(Block),
    /// Asks for canonical blocks after the best locator hash the receiver
    /// knows, but never before `from_height`'s fork point.
    BlockRequest {
        from_height: u64,
        locator: Vec<Digest>,
    },
    BlockRange(Vec<Block>),
    TxAnnounce(DbFunction),
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Request(_) => "request",
            Message::Response(_) => "response",
            Message::Refusal { .. } => "refusal",
            Message::BlockAnnounce(_) => "block-announce",
            Message::BlockRequest { .. } => "block-request",
            Message::BlockRange(_) => "block-range",
            Message::TxAnnounce(_) => "tx-announce",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::Request(r) => {
                w.byte(1)
                    .field(r.lineage.as_bytes())
                    .uint(r.seq)
                    .field(r.data_hash.as_bytes())
                    .uint(r.first_chunk)
                    .uint(r.chunk_count)
                    .uint(r.declared_topics.len() as u64);
                for t in &r.declared_topics {
                    w.field(t.as_bytes());
                }
            }
            Message::Response(b) => {
                w.byte(2)
                    .field(b.lineage.as_bytes())
                    .uint(b.seq)
                    .field(b.data_hash.as_bytes())
                    .field(b.topic_id.as_bytes())
                    .uint(b.leaf_count)
                    .uint(b.chunks.len() as u64);
                for (chunk, proof) in &b.chunks {
                    w.field(chunk).field(&encode_proof(proof));
                }
            }
            Message::Refusal { lineage, seq, reason } => {
                w.byte(3).field(lineage.as_bytes()).uint(*seq).byte(reason.code());
            }
            Message::BlockAnnounce(block) => {
                w.byte(4).field(&block.encode());
            }
            Message::BlockRequest { from_height, locator } => {
                w.byte(5).uint(*from_height).uint(locator.len() as u64);
                for h in locator {
                    w.field(h.as_bytes());
                }
            }
            Message::BlockRange(blocks) => {
                w.byte(6).uint(blocks.len() as u64);
                for b in blocks {
                    w.field(&b.encode());
                }
            }
            Message::TxAnnounce(tx) => {
                w.byte(7).field(&tx.encode());
            }
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
        let mut r = Reader::new(bytes);
        let msg = match r.byte()? {
            1 => {
                let lineage = Digest(r.fixed()?);
                let seq = r.uint()?;
                let data_hash = Digest(r.fixed()?);
                let first_chunk = r.uint()?;
                let chunk_count = r.uint()?;
                let n = r.uint()?;
                let mut declared_topics = Vec::new();
                for _ in 0..n {
                    declared_topics.push(Digest(r.fixed()?));
                }
                Message::Request(Request {
                    lineage,
                    seq,
                    data_hash,
                    first_chunk,
                    chunk_count,
                    declared_topics,
                })
            }
            2 => {
                let lineage = Digest(r.fixed()?);
                let seq = r.uint()?;
                let data_hash = Digest(r.fixed()?);
                let topic_id = Digest(r.fixed()?);
                let leaf_count = r.uint()?;
                let n = r.uint()?;
                let mut chunks = Vec::new();
                for _ in 0..n {
                    let chunk = r.field()?.to_vec();
                    let proof = decode_proof(r.field()?)?;
                    chunks.push((chunk, proof));
                }
                Message::Response(ChunkBundle {
                    lineage,
                    seq,
                    data_hash,
                    topic_id,
                    leaf_count,
                    chunks,
                })
            }
            3 => {
                let lineage = Digest(r.fixed()?);
                let seq = r.uint()?;
                let reason = match r.byte()? {
                    1 => RefusalReason::NotHeld,
                    2 => RefusalReason::FilterRefused,
                    _ => return Err(DecodeError::Invalid("refusal reason")),
                };
                Message::Refusal { lineage, seq, reason }
            }
            4 => Message::BlockAnnounce(Block::decode(r.field()?)?),
            5 => {
                let from_height = r.uint()?;
                let n = r.uint()?;
                let mut locator = Vec::new();
                for _ in 0..n {
                    locator.push(Digest(r.fixed()?));
                }
                Message::BlockRequest { from_height, locator }
            }
            6 => {
                let n = r.uint()?;
                let mut blocks = Vec::new();
                for _ in 0..n {
                    blocks.push(Block::decode(r.field()?)?);
                }
                Message::BlockRange(blocks)
            }
            7 => Message::TxAnnounce(DbFunction::decode(r.field()?)?),
            _ => return Err(DecodeError::Invalid("message tag")),
        };
        r.finish()?;
        Ok(msg)
    }
}

fn encode_proof(p: &MerkleProof) -> Vec<u8> {
    let mut w = Writer::with_capacity(40 * (p.siblings.len() + 1));
    w.uint(p.leaf_index).uint(p.leaf_count).uint(p.siblings.len() as u64);
    for s in &p.siblings {
        w.field(s.as_bytes());
    }
    w.into_bytes()
}

fn decode_proof(bytes: &[u8]) -> Result<MerkleProof, DecodeError> {
    let mut r = Reader::new(bytes);
    let leaf_index = r.uint()?;
    let leaf_count = r.uint()?;
    let n = r.uint()?;
    if n > 64 {
        return Err(DecodeError::Invalid("proof depth"));
    }
    let mut siblings = Vec::with_capacity(n as usize);
    for _ in 0..n {
        siblings.push(Digest(r.fixed()?));
    }
    r.finish()?;
    Ok(MerkleProof {
        leaf_index,
        leaf_count,
        siblings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{chunk_payload, hash_bytes, merkle_prove, payload_root, verify_chunk};

    fn bundle(payload: &[u8], cs: usize) -> ChunkBundle {
        let chunks = chunk_payload(payload, cs);
        ChunkBundle {
            lineage: hash_bytes(b"l"),
            seq: 2,
            data_hash: payload_root(payload, cs),
            topic_id: hash_bytes(b"t"),
            leaf_count: chunks.len() as u64,
            chunks: (0..chunks.len())
                .map(|i| (chunks[i].to_vec(), merkle_prove(&chunks, i).unwrap()))
                .collect(),
        }
    }

    #[test]
    fn every_message_roundtrips() {
        let tx = DbFunction::add(hash_bytes(b"x"), hash_bytes(b"e"), hash_bytes(b"t"));
        let block = Block::mine(Digest::ZERO, 1, hash_bytes(b"m"), vec![tx.clone()], 0);
        let msgs = vec![
            Message::Request(Request {
                lineage: hash_bytes(b"l"),
                seq: 3,
                data_hash: hash_bytes(b"d"),
                first_chunk: 0,
                chunk_count: ALL_CHUNKS,
                declared_topics: vec![hash_bytes(b"t")],
            }),
            Message::Response(bundle(&[7u8; 300], 64)),
            Message::Refusal {
                lineage: hash_bytes(b"l"),
                seq: 1,
                reason: RefusalReason::FilterRefused,
            },
            Message::BlockAnnounce(block.clone()),
            Message::BlockRequest {
                from_height: 4,
                locator: vec![block.block_hash, Digest::ZERO],
            },
            Message::BlockRange(vec![block.clone(), block]),
            Message::TxAnnounce(tx),
        ];
        for m in msgs {
            let bytes = m.encode();
            assert_eq!(Message::decode(&bytes).unwrap(), m, "{}", m.kind());
            assert!(Message::decode(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn refusal_layout_is_fixed() {
        let m = Message::Refusal {
            lineage: Digest::ZERO,
            seq: 1,
            reason: RefusalReason::NotHeld,
        };
        let bytes = m.encode();
        assert_eq!(bytes.len(), 9 + 40 + 16 + 9);
        assert_eq!(&bytes[..9], &[0, 0, 0, 0, 0, 0, 0, 1, 3]);
        assert_eq!(*bytes.last().unwrap(), 1);
    }

    #[test]
    fn decoded_bundle_still_verifies() {
        let payload: Vec<u8> = (0..1000u32).map(|i| (i % 251) as u8).collect();
        let b = bundle(&payload, 128);
        assert!(b.is_complete());
        let Message::Response(back) = Message::decode(&Message::Response(b).encode()).unwrap() else {
            panic!("wrong kind");
        };
        for (chunk, proof) in &back.chunks {
            assert!(verify_chunk(chunk, proof, &back.data_hash));
        }
        assert_eq!(back.payload_len(), 1000);
    }

    #[test]
    fn unknown_tag_is_rejected() {
        let mut w = Writer::new();
        w.byte(99);
        assert_eq!(Message::decode(w.as_bytes()), Err(DecodeError::Invalid("message tag")));
    }
}
