use std::fs::File;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use mutexbench::{BenchConfig, BenchTarget, Row, latency_mode, run_protocol, write_rows};

/// Contended monitor benchmark. Writes one CSV row per (algo, threads) cell.
#[derive(Debug, Parser)]
#[command(name = "mutexbench", version)]
struct Cli {
    /// Comma-separated algorithms (HashChains, HashChainsFast, HashChains3,
    /// CjmFifo, CjmBy, pthreads, sabotaged).
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "HashChains,HashChains3,CjmFifo,CjmBy,pthreads"
    )]
    algo: Vec<BenchTarget>,
    /// Comma-separated thread counts.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    locks: usize,
    /// Locks acquired per iteration.
    #[arg(long, default_value_t = 1)]
    acquire: usize,
    /// Shared generator steps inside the critical section.
    #[arg(long, default_value_t = 0)]
    csl: u32,
    /// Mean private generator steps outside it.
    #[arg(long, default_value_t = 0)]
    ncsl: u32,
    /// Seconds per run.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, default_value_t = 3)]
    subruns: u32,
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    /// Use 10 s runs, 7 subruns, 3 repeats.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 5489)]
    seed: u64,
    /// Measure single-thread enter+exit latency instead of throughput.
    #[arg(long)]
    latency: bool,
    /// Spin budget before parking.
    #[arg(long)]
    max_spins: Option<u32>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    anyhow::ensure!(cli.duration > 0.0, "duration must be positive");
    let mut rows = Vec::new();
    let mut exclusion_failures = 0;
    for &target in &cli.algo {
        if cli.latency {
            let BenchTarget::Monitor(algo) = target else {
                anyhow::bail!("latency mode needs a real monitor, not {target}");
            };
            let r = latency_mode(algo, 7, 200_000);
            eprintln!(
                "{target}: p50 {:.1} ns, mean {:.1} ns per enter+exit",
                r.p50_ns, r.mean_ns
            );
            rows.push(Row::from_latency(target, &r));
            continue;
        }
        for &threads in &cli.threads {
            let mut cfg = BenchConfig::new(target, threads)
                .sections(cli.csl, cli.ncsl)
                .duration(Duration::from_secs_f64(cli.duration))
                .samples(cli.subruns, cli.repeats);
            if cli.full {
                cfg = cfg.full_protocol();
            }
            cfg.locks = cli.locks;
            cfg.acquire = cli.acquire;
            cfg.seed = cli.seed;
            cfg.max_spins = cli.max_spins;
            let cell =
                run_protocol(&cfg).with_context(|| format!("{target} at {threads} threads"))?;
            for s in cell.samples.iter().filter(|s| !s.exclusion.ok) {
                exclusion_failures += 1;
                eprintln!(
                    "EXCLUSION FAILURE {target} T={threads}: after {} steps expected {:#010x}, shared generator gave {:#010x}",
                    s.exclusion.replayed_steps, s.exclusion.expected, s.exclusion.observed
                );
            }
            let row = Row::from_cell(&cell);
            eprintln!(
                "{target} T={threads}: {:.0} it/s, fairness {:.2}, exclusion {}",
                row.median_thruput,
                row.fairness_ratio,
                if row.exclusion_ok { "ok" } else { "FAILED" }
            );
            rows.push(row);
        }
    }
    match &cli.out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_rows(f, &rows)?;
        }
        None => write_rows(io::stdout().lock(), &rows)?,
    }
    Ok(if exclusion_failures > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}
