use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ethercouch::bench::{self, BenchSpec};
use ethercouch::peer::Mode;
use ethercouch::simnet::{self, Scenario};
use ethercouch::state_dir;

#[derive(Parser)]
#[command(name = "ethercouch", version, about = "Hash-anchored document replication: benchmark, simulator and state tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time bulk inserts per storage mode and write CSV.
    Bench {
        /// Storage modes (ethercouch, chain-only, plain); defaults to all.
        #[arg(long = "mode", value_delimiter = ',')]
        modes: Vec<Mode>,
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
        counts: Vec<u64>,
        #[arg(long, default_value_t = 4096)]
        doc_size: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        difficulty: u32,
        #[arg(long, default_value_t = 4096)]
        chunk_size: usize,
        /// JSON spec file; replaces all other bench flags.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario file and write its final state directory.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop time; defaults to the last scripted action plus the settle period.
        #[arg(long)]
        until: Option<u64>,
        /// Audit every peer after every event.
        #[arg(long)]
        check: bool,
    },
    /// Print a peer's canonical chain.
    DumpChain { dir: PathBuf, peer: String },
    /// Print a peer's record registry.
    DumpRegistry { dir: PathBuf, peer: String },
    /// Print a peer's document store.
    DumpStore { dir: PathBuf, peer: String },
    /// Recheck every hash and store entry in a state directory.
    Verify { dir: PathBuf },
    /// Write a random convergence scenario as JSON.
    GenScenario {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Bench {
            modes,
            counts,
            doc_size,
            reps,
            seed,
            difficulty,
            chunk_size,
            spec,
            out,
        } => {
            let spec = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => BenchSpec {
                    modes: if modes.is_empty() { Mode::ALL.to_vec() } else { modes },
                    counts,
                    doc_size,
                    repetitions: reps,
                    seed,
                    difficulty_bits: difficulty,
                    chunk_size,
                },
            };
            let results = bench::run_bench(&spec)?;
            for r in &results {
                eprintln!(
                    "{:<10} count={:<6} mean={:>10.3} ms chain={} store={}",
                    r.mode,
                    r.count,
                    r.mean_ms(),
                    r.chain_bytes(),
                    r.store_bytes()
                );
            }
            let mut buf = Vec::new();
            bench::write_csv(&mut buf, &results)?;
            emit(out.as_ref(), &String::from_utf8(buf)?)?;
        }
        Cmd::Run {
            scenario,
            out,
            until,
            check,
        } => {
            let text = fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let sc = Scenario::from_json(&text)?;
            let until = until.unwrap_or_else(|| sc.default_until());
            let mut sim = simnet::Simulation::new(sc, true)?;
            sim.set_check_every_event(check);
            sim.run_until(until);
            let digest = sim.finish();
            state_dir::write_simulation(&out, &sim)?;
            for v in sim.violations() {
                println!("{v}");
            }
            println!("events {} trace-lines {}", sim.events_processed(), sim.trace().len());
            println!("digest {digest}");
            if !sim.violations().is_empty() {
                bail!("{} invariant violations during the run", sim.violations().len());
            }
        }
        Cmd::DumpChain { dir, peer } => {
            let meta = state_dir::load_meta(&dir, &peer)?;
            print!("{}", state_dir::load_chain(&dir, &meta)?.dump());
        }
        Cmd::DumpRegistry { dir, peer } => {
            let meta = state_dir::load_meta(&dir, &peer)?;
            print!("{}", state_dir::load_chain(&dir, &meta)?.registry().dump());
        }
        Cmd::DumpStore { dir, peer } => {
            print!("{}", state_dir::load_store(&dir, &peer)?.dump());
        }
        Cmd::Verify { dir } => {
            let violations = state_dir::verify_dir(&dir)?;
            for v in &violations {
                println!("{v}");
            }
            println!("{} violations", violations.len());
            if !violations.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::GenScenario { seed, out } => {
            let mut json = simnet::random_convergence_scenario(seed).to_json();
            json.push('\n');
            emit(out.as_ref(), &json)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
