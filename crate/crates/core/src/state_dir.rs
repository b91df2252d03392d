//! On-disk form of a finished simulation.
//!
//! A state directory holds `trace.log` plus three files per peer:
//! `<name>.chain` (one block per line), `<name>.store` (binary snapshot) and
//! `<name>.json` (configuration and status).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::DecodeError;
use crate::crypto::Digest;
use crate::docstore::StoreState;
use crate::ledger::{BlockRejection, ChainConfig, ChainState, DumpError};
use crate::peer::{audit_store, Mode};
use crate::simnet::Simulation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerMeta {
    pub name: String,
    pub editor: String,
    pub mode: Mode,
    /// Hex topic digests; empty replicates everything.
    pub topics: Vec<String>,
    pub chunk_size: usize,
    pub difficulty_bits: u32,
    pub quiescent: bool,
    pub tip: String,
}

#[derive(Debug, Error)]
pub enum StateError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Meta {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: bad hex digest in metadata")]
    MetaDigest { path: PathBuf },
    #[error("{path} line {line}: {source}")]
    ChainText {
        path: PathBuf,
        line: usize,
        source: DumpError,
    },
    #[error("{path}: block {index} rejected: {source}")]
    ChainInvalid {
        path: PathBuf,
        index: usize,
        source: BlockRejection,
    },
    #[error("{path}: {source}")]
    Snapshot { path: PathBuf, source: DecodeError },
    #[error("{0}: no peer files found")]
    Empty(PathBuf),
}

fn read(path: &Path) -> Result<Vec<u8>, StateError> {
    fs::read(path).map_err(|source| StateError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), StateError> {
    fs::write(path, bytes).map_err(|source| StateError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes the trace and every peer's chain, store and metadata into `dir`.
pub fn write_simulation(dir: &Path, sim: &Simulation) -> Result<(), StateError> {
    fs::create_dir_all(dir).map_err(|source| StateError::Io {
        path: dir.to_owned(),
        source,
    })?;
    write(&dir.join("trace.log"), sim.trace().render().as_bytes())?;
    for (name, peer) in sim.names().iter().zip(sim.peers()) {
        let chain = peer.chain();
        let meta = PeerMeta {
            name: name.clone(),
            editor: peer.editor().to_hex(),
            mode: peer.config().mode,
            topics: peer.config().topics.iter().map(Digest::to_hex).collect(),
            chunk_size: chain.config().chunk_size,
            difficulty_bits: chain.config().difficulty_bits,
            quiescent: peer.is_quiescent(),
            tip: chain.tip().to_hex(),
        };
        write(&dir.join(format!("{name}.chain")), chain.dump().as_bytes())?;
        write(&dir.join(format!("{name}.store")), &peer.store().encode_snapshot())?;
        let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        write(&dir.join(format!("{name}.json")), json.as_bytes())?;
    }
    Ok(())
}

/// Peer names in `dir`, sorted.
pub fn peer_names(dir: &Path) -> Result<Vec<String>, StateError> {
    let entries = fs::read_dir(dir).map_err(|source| StateError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|source| StateError::Io {
            path: dir.to_owned(),
            source,
        })?;
        let path = e.path();
        if path.extension().is_some_and(|x| x == "json") {
            if let Some(stem) = path.file_stem() {
                names.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub struct LoadedPeer {
    pub meta: PeerMeta,
    pub chain: ChainState,
    pub store: StoreState,
}

impl LoadedPeer {
    pub fn topics(&self) -> BTreeSet<Digest> {
        // Parsed once at load time, so this cannot fail here.
        self.meta.topics.iter().map(|t| t.parse().expect("validated")).collect()
    }
}

pub fn load_meta(dir: &Path, name: &str) -> Result<PeerMeta, StateError> {
    let path = dir.join(format!("{name}.json"));
    let meta: PeerMeta = serde_json::from_slice(&read(&path)?).map_err(|source| StateError::Meta {
        path: path.clone(),
        source,
    })?;
    for t in &meta.topics {
        t.parse::<Digest>().map_err(|_| StateError::MetaDigest { path: path.clone() })?;
    }
    Ok(meta)
}

/// Rebuilds a peer's chain by re-validating every stored block.
pub fn load_chain(dir: &Path, meta: &PeerMeta) -> Result<ChainState, StateError> {
    let path = dir.join(format!("{}.chain", meta.name));
    let text = String::from_utf8_lossy(&read(&path)?).into_owned();
    let blocks = ChainState::parse_dump(&text).map_err(|(line, source)| StateError::ChainText {
        path: path.clone(),
        line,
        source,
    })?;
    let config = ChainConfig {
        difficulty_bits: meta.difficulty_bits,
        chunk_size: meta.chunk_size,
        allow_empty_blocks: false,
    };
    ChainState::from_blocks(config, &blocks).map_err(|(index, source)| StateError::ChainInvalid { path, index, source })
}

pub fn load_store(dir: &Path, name: &str) -> Result<StoreState, StateError> {
    let path = dir.join(format!("{name}.store"));
    StoreState::decode_snapshot(&read(&path)?).map_err(|source| StateError::Snapshot { path, source })
}

pub fn load_peer(dir: &Path, name: &str) -> Result<LoadedPeer, StateError> {
    let meta = load_meta(dir, name)?;
    let chain = load_chain(dir, &meta)?;
    let store = load_store(dir, name)?;
    Ok(LoadedPeer { meta, chain, store })
}

/// Checks every peer's store against its own chain. Each violation is
/// prefixed with the peer name. Stores of peers that were idle when saved
/// must also be complete.
pub fn verify_dir(dir: &Path) -> Result<Vec<String>, StateError> {
    let names = peer_names(dir)?;
    if names.is_empty() {
        return Err(StateError::Empty(dir.to_owned()));
    }
    let mut out = Vec::new();
    for name in names {
        let p = load_peer(dir, &name)?;
        if p.chain.tip().to_hex() != p.meta.tip {
            out.push(format!("{name}: chain tip {} differs from recorded tip {}", p.chain.tip(), p.meta.tip));
        }
        if p.store.chunk_size() != p.meta.chunk_size {
            out.push(format!("{name}: store chunk size {} differs from {}", p.store.chunk_size(), p.meta.chunk_size));
        }
        if p.meta.mode == Mode::PlainBaseline {
            continue;
        }
        for v in audit_store(&p.chain, &p.store, &p.topics(), p.meta.quiescent) {
            out.push(format!("{name}: {v}"));
        }
    }
    Ok(out)
}
