//! Content hashing and binary merkle trees over payload chunks.
//!
//! All digests are SHA-256. A payload is split into fixed-size chunks, each
//! chunk is hashed into a leaf, and pairs of nodes are hashed as
//! `H(left || right)` until one root remains. When a level has an odd number
//! of nodes the last node is paired with itself. Leaves carry no domain prefix,
//! so a single-chunk payload has `root == H(chunk)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Default transfer chunk size in bytes.
pub const DEFAULT_CHUNK_SIZE: usize = 4096;

/// A 32-byte SHA-256 digest. Rendered as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 32]
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Number of leading zero bits, used as the proof-of-work measure.
    pub fn leading_zero_bits(&self) -> u32 {
        let mut bits = 0;
        for byte in self.0 {
            if byte == 0 {
                bits += 8;
            } else {
                bits += byte.leading_zeros();
                break;
            }
        }
        bits
    }

    /// Short prefix for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseDigestError {
    #[error("digest must be 64 hex characters, got {0}")]
    Length(usize),
    #[error("invalid hex: {0}")]
    Hex(#[from] hex::FromHexError),
}

impl FromStr for Digest {
    type Err = ParseDigestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 {
            return Err(ParseDigestError::Length(s.len()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("empty input")]
    EmptyInput,
    #[error("chunk index {index} out of range for {count} chunks")]
    IndexOutOfRange { index: usize, count: usize },
}

pub fn hash_bytes(payload: &[u8]) -> Digest {
    Digest(Sha256::digest(payload).into())
}

/// `H(left || right)`.
pub fn hash_pair(left: &Digest, right: &Digest) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update(left.0);
    hasher.update(right.0);
    Digest(hasher.finalize().into())
}

/// Splits a payload into transfer chunks. An empty payload is a single empty
/// chunk so that every payload has a well-defined root.
pub fn chunk_payload(payload: &[u8], chunk_size: usize) -> Vec<&[u8]> {
    assert!(chunk_size > 0, "chunk size must be positive");
    if payload.is_empty() {
        return vec![payload];
    }
    payload.chunks(chunk_size).collect()
}

/// Merkle root of a payload under the given chunk size.
pub fn payload_root(payload: &[u8], chunk_size: usize) -> Digest {
    let chunks = chunk_payload(payload, chunk_size);
    merkle_root(&chunks).expect("chunk_payload never returns an empty list")
}

fn leaves<C: AsRef<[u8]>>(chunks: &[C]) -> Vec<Digest> {
    chunks.iter().map(|c| hash_bytes(c.as_ref())).collect()
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => hash_pair(l, r),
            [l] => hash_pair(l, l),
            _ => unreachable!(),
        })
        .collect()
}

pub fn merkle_root<C: AsRef<[u8]>>(chunks: &[C]) -> Result<Digest, CryptoError> {
    if chunks.is_empty() {
        return Err(CryptoError::EmptyInput);
    }
    let mut level = leaves(chunks);
    while level.len() > 1 {
        level = next_level(&level);
    }
    Ok(level[0])
}

/// Inclusion proof for one chunk: sibling digests from the leaf level up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: u64,
    pub leaf_count: u64,
    pub siblings: Vec<Digest>,
}

/// Tree depth for `leaf_count` leaves, i.e. `ceil(log2(leaf_count))`.
pub fn proof_depth(leaf_count: u64) -> usize {
    if leaf_count <= 1 {
        0
    } else {
        (64 - (leaf_count - 1).leading_zeros()) as usize
    }
}

pub fn merkle_prove<C: AsRef<[u8]>>(chunks: &[C], index: usize) -> Result<MerkleProof, CryptoError> {
    if chunks.is_empty() {
        return Err(CryptoError::EmptyInput);
    }
    if index >= chunks.len() {
        return Err(CryptoError::IndexOutOfRange {
            index,
            count: chunks.len(),
        });
    }
    let mut siblings = Vec::with_capacity(proof_depth(chunks.len() as u64));
    let mut level = leaves(chunks);
    let mut pos = index;
    while level.len() > 1 {
        let sibling = pos ^ 1;
        siblings.push(*level.get(sibling).unwrap_or(&level[pos]));
        level = next_level(&level);
        pos /= 2;
    }
    Ok(MerkleProof {
        leaf_index: index as u64,
        leaf_count: chunks.len() as u64,
        siblings,
    })
}

/// Checks that `chunk` sits at `proof.leaf_index` of a tree with root `root`.
/// Malformed proofs verify as false.
pub fn verify_chunk(chunk: &[u8], proof: &MerkleProof, root: &Digest) -> bool {
    if proof.leaf_count == 0 || proof.leaf_index >= proof.leaf_count {
        return false;
    }
    if proof.siblings.len() != proof_depth(proof.leaf_count) {
        return false;
    }
    let mut node = hash_bytes(chunk);
    let mut pos = proof.leaf_index;
    let mut width = proof.leaf_count;
    for sibling in &proof.siblings {
        let is_right = pos & 1 == 1;
        // The last node of an odd level can only be paired with itself.
        if !is_right && pos == width - 1 && *sibling != node {
            return false;
        }
        node = if is_right {
            hash_pair(sibling, &node)
        } else {
            hash_pair(&node, sibling)
        };
        pos /= 2;
        width = width.div_ceil(2);
    }
    node == *root
}
