//! The benchmark loop, the run protocol and latency mode.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::sync::Barrier;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use monitors::{MonitorAlgo, MonitorConfig, Monitors, SpinPolicy, SyncObject, ThreadContext};
use rand::{Rng, RngCore};
use thiserror::Error;

use crate::mt::{ExclusionReport, Mt19937, SharedMt, exclusion_oracle};

/// What the benchmark locks with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchTarget {
    Monitor(MonitorAlgo),
    /// `enter` and `exit` do nothing. Exists to show that the oracle catches
    /// a broken lock.
    Sabotaged,
}

impl fmt::Display for BenchTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchTarget::Monitor(algo) => algo.fmt(f),
            BenchTarget::Sabotaged => f.write_str("sabotaged"),
        }
    }
}

impl FromStr for BenchTarget {
    type Err = monitors::UnknownAlgo;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sabotaged" | "noop" | "no-op" => Ok(BenchTarget::Sabotaged),
            _ => s.parse().map(BenchTarget::Monitor),
        }
    }
}

impl From<MonitorAlgo> for BenchTarget {
    fn from(algo: MonitorAlgo) -> Self {
        BenchTarget::Monitor(algo)
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub target: BenchTarget,
    pub threads: usize,
    /// Size of the lock pool.
    pub locks: usize,
    /// Locks taken per iteration.
    pub acquire: usize,
    /// Shared generator steps inside the critical section.
    pub csl: u32,
    /// Mean thread-local generator steps outside it.
    pub ncsl: u32,
    pub duration: Duration,
    pub subruns: u32,
    pub repeats: u32,
    pub seed: u64,
    /// Overrides the monitors' spin budget.
    pub max_spins: Option<u32>,
    /// Record the longest time any single `enter` took.
    pub measure_waits: bool,
}

impl BenchConfig {
    /// Desk-scale defaults: 2 s runs, 3 subruns, 1 repeat, maximum contention.
    pub fn new(target: impl Into<BenchTarget>, threads: usize) -> Self {
        Self {
            target: target.into(),
            threads,
            locks: 1,
            acquire: 1,
            csl: 0,
            ncsl: 0,
            duration: Duration::from_secs(2),
            subruns: 3,
            repeats: 1,
            seed: 5489,
            max_spins: None,
            measure_waits: false,
        }
    }

    /// 7 subruns of 10 s, repeated 3 times.
    pub fn full_protocol(mut self) -> Self {
        self.duration = Duration::from_secs(10);
        self.subruns = 7;
        self.repeats = 3;
        self
    }

    pub fn sections(mut self, csl: u32, ncsl: u32) -> Self {
        self.csl = csl;
        self.ncsl = ncsl;
        self
    }

    pub fn duration(mut self, d: Duration) -> Self {
        self.duration = d;
        self
    }

    pub fn samples(mut self, subruns: u32, repeats: u32) -> Self {
        self.subruns = subruns;
        self.repeats = repeats;
        self
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |msg: String| Err(BenchError::Config(msg));
        if self.threads == 0 {
            return fail("threads must be at least 1".into());
        }
        if self.locks == 0 {
            return fail("locks must be at least 1".into());
        }
        if self.acquire == 0 || self.acquire > self.locks {
            return fail(format!(
                "acquire count {} must be in 1..={}",
                self.acquire, self.locks
            ));
        }
        if self.duration.is_zero() {
            return fail("duration must be positive".into());
        }
        if self.subruns == 0 || self.repeats == 0 {
            return fail("subruns and repeats must be at least 1".into());
        }
        Ok(())
    }

    fn monitor_config(&self, algo: MonitorAlgo) -> MonitorConfig {
        let config = MonitorConfig::new(algo);
        match self.max_spins {
            Some(n) => config.spin(SpinPolicy::new(n)),
            None => config,
        }
    }

    fn shared_seed(&self) -> u32 {
        (self.seed ^ (self.seed >> 32)) as u32
    }
}

/// One timed run.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub total_iterations: u64,
    pub per_thread_iterations: Vec<u64>,
    pub elapsed: Duration,
    /// Iterations per second, all threads together.
    pub throughput: f64,
    pub exclusion: ExclusionReport,
    /// Longest single `enter`, when measured.
    pub max_wait: Option<Duration>,
}

impl BenchResult {
    pub fn min_thread_iterations(&self) -> u64 {
        self.per_thread_iterations
            .iter()
            .copied()
            .min()
            .unwrap_or(0)
    }

    pub fn max_thread_iterations(&self) -> u64 {
        self.per_thread_iterations
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
    }

    /// Most over least productive thread; infinite if some thread starved.
    pub fn fairness_ratio(&self) -> f64 {
        self.max_thread_iterations() as f64 / self.min_thread_iterations() as f64
    }
}

fn thread_seed(seed: u64, thread: usize) -> u32 {
    let mut z = seed.wrapping_add((thread as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) as u32
}

struct Worker<'a> {
    config: &'a BenchConfig,
    objects: &'a [SyncObject],
    /// One generator per lock.
    shared: &'a [SharedMt],
    stop: &'a AtomicBool,
    start: &'a Barrier,
}

impl Worker<'_> {
    fn run(
        &self,
        index: usize,
        mut cx: Option<ThreadContext>,
    ) -> (u64, Option<Duration>, Vec<u64>) {
        let cfg = self.config;
        let mut rng = Mt19937::new(thread_seed(cfg.seed, index));
        let mut lockset: Vec<usize> = Vec::with_capacity(cfg.acquire);
        let mut max_wait = Duration::ZERO;
        let mut held_counts = vec![0u64; cfg.locks];
        let mut iters = 0u64;
        self.start.wait();
        loop {
            if iters.is_multiple_of(64) && self.stop.load(Ordering::Relaxed) {
                break;
            }
            lockset.clear();
            if cfg.locks == 1 {
                lockset.push(0);
            } else {
                lockset.extend(rand::seq::index::sample(&mut rng, cfg.locks, cfg.acquire).iter());
                lockset.sort_unstable_by_key(|&i| self.objects[i].addr());
            }

            let t0 = cfg.measure_waits.then(Instant::now);
            if let Some(cx) = cx.as_mut() {
                for &i in &lockset {
                    cx.enter(&self.objects[i]);
                }
            }
            if let Some(t0) = t0 {
                max_wait = max_wait.max(t0.elapsed());
            }
            for &i in &lockset {
                for _ in 0..cfg.csl {
                    black_box(self.shared[i].step());
                }
                held_counts[i] += 1;
            }
            if let Some(cx) = cx.as_mut() {
                for &i in lockset.iter().rev() {
                    cx.exit(&self.objects[i]).expect("lockset is held");
                }
            }

            if cfg.ncsl > 0 {
                let steps = rng.random_range(0..2 * cfg.ncsl);
                for _ in 0..steps {
                    black_box(rng.next_u32());
                }
            }
            iters += 1;
        }
        (iters, cfg.measure_waits.then_some(max_wait), held_counts)
    }
}

/// Runs the benchmark once for `config.duration` and checks exclusion.
pub fn run_bench(config: &BenchConfig) -> Result<BenchResult, BenchError> {
    config.validate()?;
    let pool = match config.target {
        BenchTarget::Monitor(algo) => Some(Monitors::new(config.monitor_config(algo))),
        BenchTarget::Sabotaged => None,
    };
    let objects: Vec<SyncObject> = (0..config.locks)
        .map(|i| SyncObject::new(i as u32 + 1))
        .collect();
    let seeds: Vec<u32> = (0..config.locks)
        .map(|i| config.shared_seed().wrapping_add(i as u32))
        .collect();
    let shared: Vec<SharedMt> = seeds.iter().map(|&s| SharedMt::new(s)).collect();
    let stop = AtomicBool::new(false);
    let start = Barrier::new(config.threads + 1);
    let worker = Worker {
        config,
        objects: &objects,
        shared: &shared,
        stop: &stop,
        start: &start,
    };

    let (outcomes, elapsed) = thread::scope(|s| {
        let handles: Vec<_> = (0..config.threads)
            .map(|t| {
                let (worker, pool) = (&worker, pool.as_ref());
                s.spawn(move || worker.run(t, pool.map(Monitors::context)))
            })
            .collect();
        start.wait();
        let t0 = Instant::now();
        thread::sleep(config.duration);
        stop.store(true, Ordering::Relaxed);
        let outcomes: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect();
        (outcomes, t0.elapsed())
    });

    let per_thread: Vec<u64> = outcomes.iter().map(|o| o.0).collect();
    let total: u64 = per_thread.iter().sum();
    let max_wait = outcomes.iter().filter_map(|o| o.1).max();
    let mut exclusion = ExclusionReport {
        ok: true,
        replayed_steps: 0,
        first_mismatch: None,
        expected: 0,
        observed: 0,
    };
    for (i, mt) in shared.iter().enumerate() {
        let held: u64 = outcomes.iter().map(|o| o.2[i]).sum();
        let report = exclusion_oracle(seeds[i], held * config.csl as u64, mt);
        if !report.ok {
            exclusion = report;
            break;
        }
        exclusion.replayed_steps += report.replayed_steps;
    }
    Ok(BenchResult {
        total_iterations: total,
        per_thread_iterations: per_thread,
        elapsed,
        throughput: total as f64 / elapsed.as_secs_f64(),
        exclusion,
        max_wait,
    })
}

/// Middle order statistic; the lower middle for even counts.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut v = xs.to_vec();
    let mid = (v.len() - 1) / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// All samples of one (target, threads) cell.
#[derive(Debug, Clone)]
pub struct CellReport {
    pub config: BenchConfig,
    pub samples: Vec<BenchResult>,
}

impl CellReport {
    pub fn median_throughput(&self) -> f64 {
        median(
            &self
                .samples
                .iter()
                .map(|s| s.throughput)
                .collect::<Vec<_>>(),
        )
    }

    pub fn median_fairness(&self) -> f64 {
        median(
            &self
                .samples
                .iter()
                .map(BenchResult::fairness_ratio)
                .collect::<Vec<_>>(),
        )
    }

    /// The sample whose throughput is the median.
    pub fn median_sample(&self) -> &BenchResult {
        let m = self.median_throughput();
        self.samples
            .iter()
            .find(|s| s.throughput == m)
            .expect("median is a sample")
    }

    pub fn exclusion_ok(&self) -> bool {
        self.samples.iter().all(|s| s.exclusion.ok)
    }

    pub fn max_wait(&self) -> Option<Duration> {
        self.samples.iter().filter_map(|s| s.max_wait).max()
    }
}

/// Runs `subruns` × `repeats` timed runs of one cell.
pub fn run_protocol(config: &BenchConfig) -> Result<CellReport, BenchError> {
    config.validate()?;
    let n = config.subruns * config.repeats;
    let samples = (0..n)
        .map(|_| run_bench(config))
        .collect::<Result<_, _>>()?;
    Ok(CellReport {
        config: config.clone(),
        samples,
    })
}

/// Single-thread uncontended cost of one `enter` + `exit` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    pub p50_ns: f64,
    pub mean_ns: f64,
    pub batches: usize,
    pub pairs_per_batch: usize,
}

/// Times `batches` tight loops of `pairs` enter/exit pairs on one object.
pub fn latency_mode(algo: MonitorAlgo, batches: usize, pairs: usize) -> LatencyReport {
    assert!(batches > 0 && pairs > 0);
    let pool = Monitors::with_algo(algo);
    let obj = SyncObject::new(1);
    let mut cx = pool.context();
    // Warm up the record cache and hash the object.
    for _ in 0..pairs.min(1000) {
        cx.enter(&obj);
        cx.exit(&obj).unwrap();
    }
    let per_pair: Vec<f64> = (0..batches)
        .map(|_| {
            let t0 = Instant::now();
            for _ in 0..pairs {
                cx.enter(black_box(&obj));
                cx.exit(black_box(&obj)).unwrap();
            }
            t0.elapsed().as_nanos() as f64 / pairs as f64
        })
        .collect();
    LatencyReport {
        p50_ns: median(&per_pair),
        mean_ns: per_pair.iter().sum::<f64>() / batches as f64,
        batches,
        pairs_per_batch: pairs,
    }
}
