//! Bulk-insert benchmark across storage modes.
//!
//! Each cell drives one peer through `count` publish, mine and apply
//! rounds with one record per block, and measures wall time for the whole
//! pipeline. Plain mode writes straight to the store.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash_bytes, DEFAULT_CHUNK_SIZE};
use crate::ledger::{ChainConfig, Task};
use crate::peer::{Ctx, Mode, Peer, PeerConfig};
use crate::registry::{Location, LocationRegistry, PeerLocation};
use crate::simnet::ticket_payload;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub modes: Vec<Mode>,
    pub counts: Vec<u64>,
    #[serde(default = "default_doc_size")]
    pub doc_size: usize,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_difficulty")]
    pub difficulty_bits: u32,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

fn default_doc_size() -> usize {
    4096
}
fn default_reps() -> usize {
    5
}
fn default_difficulty() -> u32 {
    8
}
fn default_chunk() -> usize {
    DEFAULT_CHUNK_SIZE
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            modes: Mode::ALL.to_vec(),
            counts: vec![10, 100, 1000],
            doc_size: default_doc_size(),
            repetitions: default_reps(),
            seed: 0,
            difficulty_bits: default_difficulty(),
            chunk_size: default_chunk(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("no counts given")]
    NoCounts,
    #[error("no modes given")]
    NoModes,
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("counts must be positive")]
    ZeroCount,
    #[error("chunk size must be positive")]
    ZeroChunk,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.counts.is_empty() {
            return Err(BenchError::NoCounts);
        }
        if self.modes.is_empty() {
            return Err(BenchError::NoModes);
        }
        if self.repetitions == 0 {
            return Err(BenchError::NoRepetitions);
        }
        if self.counts.contains(&0) {
            return Err(BenchError::ZeroCount);
        }
        if self.chunk_size == 0 {
            return Err(BenchError::ZeroChunk);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRun {
    pub rep: usize,
    pub wall_ms: f64,
    pub ticks: u64,
    pub chain_bytes: u64,
    pub store_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub mode: Mode,
    pub count: u64,
    pub doc_size: usize,
    pub runs: Vec<BenchRun>,
}

impl BenchResult {
    pub fn mean_ms(&self) -> f64 {
        self.runs.iter().map(|r| r.wall_ms).sum::<f64>() / self.runs.len() as f64
    }

    /// Counters of the first run; every run of a cell shares them.
    pub fn ticks(&self) -> u64 {
        self.runs[0].ticks
    }

    pub fn chain_bytes(&self) -> u64 {
        self.runs[0].chain_bytes
    }

    pub fn store_bytes(&self) -> u64 {
        self.runs[0].store_bytes
    }

    /// True when all runs agree on ticks and byte counters.
    pub fn is_stable(&self) -> bool {
        let f = &self.runs[0];
        self.runs
            .iter()
            .all(|r| (r.ticks, r.chain_bytes, r.store_bytes) == (f.ticks, f.chain_bytes, f.store_bytes))
    }
}

/// Runs one (mode, count) cell once.
pub fn run_cell(spec: &BenchSpec, mode: Mode, count: u64, rep: usize) -> BenchRun {
    let editor = hash_bytes(b"bench-node");
    let topic = hash_bytes(b"maintenance");
    let mut cfg = PeerConfig::new(editor, mode);
    cfg.chain = ChainConfig {
        difficulty_bits: spec.difficulty_bits,
        chunk_size: spec.chunk_size,
        allow_empty_blocks: false,
    };
    cfg.max_txs_per_block = 1;
    let mut locations = LocationRegistry::new();
    locations.register_peer(PeerLocation {
        editor_hash: editor,
        location: Location::new("bench-node").expect("short token"),
    });
    // Payloads are generated up front so the timer covers only the pipeline.
    let payloads: Vec<Vec<u8>> = (0..count)
        .map(|i| ticket_payload(spec.seed, &format!("ticket-{i}"), spec.doc_size))
        .collect();

    let start = Instant::now();
    let mut peer = Peer::new(cfg);
    let mut ticks = 0;
    for (i, payload) in payloads.into_iter().enumerate() {
        let mut ctx = Ctx {
            now: i as u64,
            locations: &mut locations,
        };
        peer.publish(&mut ctx, Task::Add, None, Some(payload), topic)
            .expect("fresh ticket is accepted");
        ticks += 1;
        if mode != Mode::PlainBaseline {
            peer.mine(&mut ctx);
            ticks += 1;
        }
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let chain_bytes = if mode == Mode::PlainBaseline {
        0
    } else {
        peer.chain().chain_tx_bytes() as u64
    };
    let run = BenchRun {
        rep,
        wall_ms,
        ticks,
        chain_bytes,
        store_bytes: peer.store().snapshot_len() as u64,
    };
    debug_assert_eq!(peer.store().documents().count() as u64, count);
    run
}

/// Runs every (mode, count) cell `repetitions` times. Modes are interleaved
/// within each repetition so that machine noise spreads evenly.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchResult>, BenchError> {
    spec.validate()?;
    let mut results: Vec<BenchResult> = Vec::new();
    for &count in &spec.counts {
        let first = results.len();
        for &mode in &spec.modes {
            results.push(BenchResult {
                mode,
                count,
                doc_size: spec.doc_size,
                runs: Vec::new(),
            });
        }
        for rep in 0..spec.repetitions {
            for (k, &mode) in spec.modes.iter().enumerate() {
                results[first + k].runs.push(run_cell(spec, mode, count, rep));
            }
        }
    }
    Ok(results)
}

pub const CSV_HEADER: [&str; 8] = [
    "mode",
    "count",
    "doc_size",
    "rep",
    "wall_ms",
    "ticks",
    "chain_bytes",
    "store_bytes",
];

/// One row per run plus a `mean` row per cell.
pub fn write_csv<W: Write>(out: W, results: &[BenchResult]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in results {
        let row = |rep: String, ms: f64, run: &BenchRun| {
            vec![
                r.mode.to_string(),
                r.count.to_string(),
                r.doc_size.to_string(),
                rep,
                format!("{ms:.3}"),
                run.ticks.to_string(),
                run.chain_bytes.to_string(),
                run.store_bytes.to_string(),
            ]
        };
        for run in &r.runs {
            w.write_record(row(run.rep.to_string(), run.wall_ms, run))?;
        }
        w.write_record(row("mean".into(), r.mean_ms(), &r.runs[0]))?;
    }
    w.flush()?;
    Ok(())
}
