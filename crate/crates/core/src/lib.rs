//! Blockchain-anchored document storage.
//!
//! Two storage architectures share one code base:
//!
//! * **chain-only**: every payload travels inline in the on-chain record;
//! * **EtherCouch**: the chain carries fixed-size records with merkle roots of
//!   the payloads, while every peer keeps a revisioned document store that is
//!   filled off-chain and verified against those roots.
//!
//! [`simnet`] drives many peers through a deterministic discrete-event network
//! and [`bench`] reproduces the insert-scaling comparison against a plain
//! in-memory store.

pub mod bench;
pub mod codec;
pub mod crypto;
pub mod docstore;
pub mod ledger;
pub mod peer;
pub mod registry;
pub mod simnet;
pub mod state_dir;
pub mod wire;

pub use crypto::{hash_bytes, merkle_prove, merkle_root, verify_chunk, Digest, MerkleProof};
pub use docstore::StoreState;
pub use ledger::{Block, ChainConfig, ChainState, DbFunction, ReorgReport, Task, TxPos};
pub use peer::{Mode, Peer, PeerConfig};
pub use registry::{DataRegistry, LocationRegistry};
