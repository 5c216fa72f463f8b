use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use magnet_core::erasure::{rs_decode, rs_encode, CodingParams, Shard};
use magnet_core::rounds::model_check_round;
use magnet_core::scenario::{run_autoloop, run_diloco, run_ledger, run_storage, RunReport, Scenario, ScenarioError};

/// Simulation and tooling for decentralized training, storage and rewards.
#[derive(Debug, Parser)]
#[command(name = "magnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Outer-round training over the simulated network, compared with a centralized baseline.
    Diloco(ScenarioArgs),
    /// Storage daemon under heartbeats and node failures.
    Storage(ScenarioArgs),
    /// Randomized reward epochs, slashing and data challenges.
    Ledger(ScenarioArgs),
    /// The automated improvement loop.
    Autoloop(ScenarioArgs),
    /// Reed-Solomon shard encoding and decoding of files.
    Rs {
        #[command(subcommand)]
        command: RsCommand,
    },
    /// Exhaustively explore message orderings of one round.
    ModelCheck,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario TOML file.
    config: PathBuf,
    /// Directory for metrics and logs; only the summary is printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum RsCommand {
    /// Split a file into K data and M parity shards.
    Encode {
        input: PathBuf,
        #[arg(short, long, default_value_t = 4)]
        k: usize,
        #[arg(short, long, default_value_t = 2)]
        m: usize,
        /// Output directory for shard-<i>.bin files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild a file from any K shards.
    Decode {
        /// Shard files, or directories containing shard-*.bin files.
        #[arg(required = true)]
        shards: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Outcome {
    Ok,
    Violations,
}

fn run_scenario(args: &ScenarioArgs, run: fn(&Scenario) -> Result<RunReport, ScenarioError>) -> Result<Outcome> {
    let scenario = Scenario::from_path(&args.config)?;
    let report = run(&scenario)?;
    if let Some(dir) = &args.out {
        report
            .write_to(dir)
            .with_context(|| format!("writing outputs to {}", dir.display()))?;
    }
    println!("{:#}", report.summary);
    if report.ok() {
        Ok(Outcome::Ok)
    } else {
        for v in &report.violations {
            eprintln!("invariant violated: {v}");
        }
        Ok(Outcome::Violations)
    }
}

fn shard_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("shard-") && n.ends_with(".bin"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn encode(input: &Path, k: usize, m: usize, out: &Path) -> Result<()> {
    let params = CodingParams::new(k, m)?;
    let blob = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let shards = rs_encode(&blob, params)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for s in &shards {
        fs::write(out.join(format!("shard-{}.bin", s.index)), s.to_bytes())?;
    }
    println!("{} {} shards ({k} data, {m} parity) in {}", shards[0].blob_id_hex(), shards.len(), out.display());
    Ok(())
}

fn decode(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let paths = shard_paths(inputs)?;
    if paths.is_empty() {
        bail!("no shard files given");
    }
    let mut shards = Vec::new();
    for p in &paths {
        let raw = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        shards.push(Shard::from_bytes(&raw).with_context(|| format!("parsing {}", p.display()))?);
    }
    let blob = rs_decode(&shards)?;
    fs::write(out, &blob).with_context(|| format!("writing {}", out.display()))?;
    println!("{} {} bytes to {}", shards[0].blob_id_hex(), blob.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Diloco(a) => run_scenario(&a, run_diloco),
        Command::Storage(a) => run_scenario(&a, run_storage),
        Command::Ledger(a) => run_scenario(&a, run_ledger),
        Command::Autoloop(a) => run_scenario(&a, run_autoloop),
        Command::Rs { command } => {
            match command {
                RsCommand::Encode { input, k, m, out } => encode(&input, k, m, &out)?,
                RsCommand::Decode { shards, out } => decode(&shards, &out)?,
            }
            Ok(Outcome::Ok)
        }
        Command::ModelCheck => {
            let r = model_check_round();
            println!(
                "messages {} states {} interleavings {} merges {} fast-peer cases {}",
                r.messages, r.distinct_states, r.interleavings, r.merges_observed, r.fast_peer_cases
            );
            for v in &r.violations {
                eprintln!("invariant violated: {v}");
            }
            Ok(if r.passed() { Outcome::Ok } else { Outcome::Violations })
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violations) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
