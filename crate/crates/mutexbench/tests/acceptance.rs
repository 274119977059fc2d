//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the test harness so the lines are always shown, and runs
//! the criteria one after another so they do not compete for CPUs and the
//! process-wide spin counter covers the whole suite.
//! Directional performance criteria (4 and 6) are printed but not asserted:
//! their outcome depends on the host, and a failing line is reported as is.

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use monitors::{
    DEFAULT_MAX_SPINS, DEFAULT_PATIENCE, Header, HeaderMode, LockBits, MonitorAlgo, Monitors,
    NeutralHeader, RecordState, SyncObject, WaitOutcome, spin_high_water,
};
use mutexbench::{BenchConfig, BenchTarget, latency_mode, run_bench, run_protocol};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

// Pinned tolerances.
const EXCLUSION_RUN: Duration = Duration::from_secs(2);
const MEMORY_ITERATIONS: u64 = 1_000_000;
const MEMORY_THREADS: usize = 8;
const MEMORY_MAX_NESTING: usize = 2;
const COUNTER_PAIRS: u64 = 1000;
const LATENCY_REPEATS: usize = 7;
const LATENCY_SAMPLES: usize = 7;
const LATENCY_PAIRS: usize = 20_000;
const LATENCY_MIN_HOLDING: usize = 6;
const FIFO_TRIALS: usize = 10_000;
const BYPASS_RUN: Duration = Duration::from_secs(5);
const FAIRNESS_RUN: Duration = Duration::from_secs(1);
const FAIRNESS_RUNS: u32 = 7;
/// Handoff slack on top of the patience, calibrated once on the development
/// host (largest CJM-FIFO per-acquisition wait at T=2, csl=0, ncsl=0, 5 s,
/// over fifteen runs, rounded up to the next scheduler tick).
const BYPASS_SLACK: Duration = Duration::from_millis(CALIBRATED_SLACK_MS);
const CALIBRATED_SLACK_MS: u64 = 20;
const HEADER_OPS: usize = 100_000;
const CHURN_RUN: Duration = Duration::from_secs(2);
const SNAPSHOTS: usize = 100_000;

const ALL: [MonitorAlgo; 6] = MonitorAlgo::ALL;

struct Verdicts(Vec<(u32, bool, bool)>);

impl Verdicts {
    fn record(&mut self, id: u32, enforced: bool, pass: bool, detail: String) {
        println!("{} [{id}] {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push((id, enforced, pass));
    }
}

fn thread_counts() -> Vec<usize> {
    let cores = thread::available_parallelism().map_or(1, |n| n.get());
    BTreeSet::from([1, 4, cores, 2 * cores])
        .into_iter()
        .collect()
}

fn exclusion_oracle(v: &mut Verdicts) {
    let mut failures = Vec::new();
    let mut runs = 0;
    for algo in ALL {
        for &threads in &thread_counts() {
            for csl in [1, 5] {
                let cfg = BenchConfig::new(algo, threads)
                    .sections(csl, 0)
                    .duration(EXCLUSION_RUN);
                let r = run_bench(&cfg).expect("valid config");
                runs += 1;
                if !r.exclusion.ok || r.total_iterations == 0 {
                    failures.push(format!("{algo} T={threads} csl={csl}"));
                }
            }
        }
    }
    let sabotaged = BenchConfig::new(BenchTarget::Sabotaged, 8)
        .sections(2, 0)
        .duration(EXCLUSION_RUN);
    let caught = !run_bench(&sabotaged).expect("valid config").exclusion.ok;
    v.record(
        1,
        true,
        failures.is_empty() && caught,
        format!(
            "exclusion oracle: {runs} runs over T={:?}, {} mismatches {failures:?}; sabotaged lock {}",
            thread_counts(),
            failures.len(),
            if caught { "caught" } else { "NOT caught" }
        ),
    );
}

fn memory_round(m: &Monitors, objs: &[SyncObject]) {
    let per_thread = MEMORY_ITERATIONS / MEMORY_THREADS as u64;
    thread::scope(|s| {
        for t in 0..MEMORY_THREADS {
            s.spawn(move || {
                let mut cx = m.context();
                let mut rng = StdRng::seed_from_u64(t as u64);
                for _ in 0..per_thread {
                    let a = rng.random_range(0..objs.len());
                    let b = rng.random_range(0..objs.len());
                    let (a, b) = (a.min(b), a.max(b));
                    cx.enter(&objs[a]);
                    if a != b {
                        cx.enter(&objs[b]);
                        cx.exit(&objs[b]).unwrap();
                    }
                    cx.exit(&objs[a]).unwrap();
                }
                assert_eq!(cx.outstanding_records(), 0);
            });
        }
    });
}

fn self_cleaning_memory(v: &mut Verdicts) {
    let bound = MEMORY_THREADS * MEMORY_MAX_NESTING;
    let mut details = Vec::new();
    let mut pass = true;
    for algo in ALL {
        let m = Monitors::with_algo(algo);
        // Objects are contiguous, so index order is address order.
        let objs: Vec<SyncObject> = (0..8).map(SyncObject::new).collect();
        memory_round(&m, &objs);
        let first = m.record_stats();
        memory_round(&m, &objs);
        let second = m.record_stats();
        let ok = first.allocated <= bound
            && second.allocated == first.allocated
            && second.spare == second.allocated;
        pass &= ok;
        details.push(format!(
            "{algo} hwm={} growth={}",
            first.allocated,
            second.allocated - first.allocated
        ));
    }
    v.record(
        2,
        true,
        pass,
        format!(
            "self-cleaning memory (bound {bound}): {}",
            details.join(", ")
        ),
    );
}

fn fast_path_counters(v: &mut Verdicts) {
    let mut details = Vec::new();
    let mut pass = true;
    for algo in [
        MonitorAlgo::HashChains3,
        MonitorAlgo::CjmFifo,
        MonitorAlgo::HashChainsFast,
        MonitorAlgo::HashChains,
    ] {
        let m = Monitors::with_algo(algo);
        let obj = SyncObject::new(1);
        let mut cx = m.context();
        let before = cx.stats();
        for _ in 0..COUNTER_PAIRS {
            cx.enter(&obj);
            cx.exit(&obj).unwrap();
        }
        let locks = cx.stats().bucket_locks - before.bucket_locks;
        let expected = if algo == MonitorAlgo::HashChains {
            2 * COUNTER_PAIRS
        } else {
            0
        };
        pass &= locks == expected;
        details.push(format!(
            "{algo}={locks}/{COUNTER_PAIRS} pairs (want {expected})"
        ));
    }
    v.record(
        3,
        true,
        pass,
        format!("bucket-lock acquisitions: {}", details.join(", ")),
    );
}

fn latency_ordering(v: &mut Verdicts) {
    let mut holding = 0;
    let mut last = (0.0, 0.0, 0.0);
    for _ in 0..LATENCY_REPEATS {
        let hc = latency_mode(MonitorAlgo::HashChains, LATENCY_SAMPLES, LATENCY_PAIRS).p50_ns;
        let h3 = latency_mode(MonitorAlgo::HashChains3, LATENCY_SAMPLES, LATENCY_PAIRS).p50_ns;
        let cjm = latency_mode(MonitorAlgo::CjmFifo, LATENCY_SAMPLES, LATENCY_PAIRS).p50_ns;
        if hc > h3 && hc > cjm {
            holding += 1;
        }
        last = (hc, h3, cjm);
    }
    v.record(
        4,
        false,
        holding >= LATENCY_MIN_HOLDING,
        format!(
            "latency HashChains > HashChains3 and > CJM-FIFO in {holding}/{LATENCY_REPEATS} repeats \
             (last p50: {:.1} / {:.1} / {:.1} ns)",
            last.0, last.1, last.2
        ),
    );
}

/// Returns (grant-order violations, queue-vs-arrival mismatches).
fn fifo_trials(algo: MonitorAlgo, trials: usize) -> (usize, usize) {
    let m = Monitors::with_algo(algo);
    let obj = SyncObject::new(1);
    let go: [AtomicU64; 3] = Default::default();
    let ids: [AtomicU64; 3] = Default::default();
    let log = Mutex::new(Vec::with_capacity(3));
    let stop = AtomicBool::new(false);
    let mut violations = 0;
    let mut arrival_mismatches = 0;
    thread::scope(|s| {
        for i in 0..3 {
            let (m, obj, go, ids, log, stop) = (&m, &obj, &go, &ids, &log, &stop);
            s.spawn(move || {
                let mut cx = m.context();
                ids[i].store(cx.id(), Ordering::SeqCst);
                let mut seen = 0;
                loop {
                    let g = loop {
                        let g = go[i].load(Ordering::SeqCst);
                        if g != seen || stop.load(Ordering::SeqCst) {
                            break g;
                        }
                        thread::yield_now();
                    };
                    if g == seen {
                        return;
                    }
                    seen = g;
                    cx.enter(obj);
                    log.lock().unwrap().push(cx.id());
                    cx.exit(obj).unwrap();
                }
            });
        }
        while ids.iter().any(|id| id.load(Ordering::SeqCst) == 0) {
            thread::yield_now();
        }
        let arrival: Vec<u64> = ids.iter().map(|id| id.load(Ordering::SeqCst)).collect();
        let mut cx = m.context();
        for trial in 1..=trials as u64 {
            cx.enter(&obj);
            for (i, g) in go.iter().enumerate() {
                g.store(trial, Ordering::SeqCst);
                let deadline = Instant::now() + Duration::from_secs(10);
                while cx.entry_queue(&obj).unwrap().len() < i + 1 {
                    assert!(
                        Instant::now() < deadline,
                        "{algo}: arrival {i} never queued"
                    );
                    thread::yield_now();
                }
            }
            let queued = cx.entry_queue(&obj).unwrap();
            if queued != arrival {
                arrival_mismatches += 1;
            }
            cx.exit(&obj).unwrap();
            let deadline = Instant::now() + Duration::from_secs(10);
            while log.lock().unwrap().len() < 3 {
                assert!(Instant::now() < deadline, "{algo}: grants stalled");
                thread::yield_now();
            }
            let granted = std::mem::take(&mut *log.lock().unwrap());
            if granted != queued {
                violations += 1;
            }
        }
        stop.store(true, Ordering::SeqCst);
    });
    (violations, arrival_mismatches)
}

fn fifo_order(v: &mut Verdicts) {
    let (cjm, cjm_arrival) = fifo_trials(MonitorAlgo::CjmFifo, FIFO_TRIALS);
    let (hc, hc_arrival) = fifo_trials(MonitorAlgo::HashChains, FIFO_TRIALS);
    v.record(
        5,
        true,
        cjm == 0 && hc == 0,
        format!(
            "FIFO grants over {FIFO_TRIALS} trials: CJM-FIFO {cjm} violations of swap order, HashChains {hc} \
             violations of enqueue order (queue differed from arrival: {cjm_arrival} / {hc_arrival})"
        ),
    );
}

fn fairness_median(algo: MonitorAlgo, threads: usize) -> f64 {
    let cfg = BenchConfig::new(algo, threads)
        .duration(FAIRNESS_RUN)
        .samples(FAIRNESS_RUNS, 1);
    run_protocol(&cfg).expect("valid config").median_fairness()
}

fn bounded_bypass(v: &mut Verdicts) {
    let cores = thread::available_parallelism().map_or(1, |n| n.get());
    let threads = 2 * cores;
    let mut cfg = BenchConfig::new(MonitorAlgo::CjmBy, threads).duration(BYPASS_RUN);
    cfg.measure_waits = true;
    let r = run_bench(&cfg).expect("valid config");
    let max_wait = r.max_wait.unwrap();
    let limit = DEFAULT_PATIENCE + BYPASS_SLACK;
    let fifo = fairness_median(MonitorAlgo::CjmFifo, threads);
    let by = fairness_median(MonitorAlgo::CjmBy, threads);
    let native = fairness_median(MonitorAlgo::NativeBaseline, threads);
    v.record(
        6,
        false,
        max_wait <= limit && fifo <= by && by <= native,
        format!(
            "bounded bypass at T={threads}: CJM-By max wait {:.3} ms (limit {:.3} ms); fairness medians \
             FIFO {fifo:.4} <= By {by:.4} <= pthreads {native:.4}",
            max_wait.as_secs_f64() * 1e3,
            limit.as_secs_f64() * 1e3
        ),
    );
}

fn neutral(raw: u64) -> Option<NeutralHeader> {
    match Header::decode(raw) {
        Ok(Header::Neutral(n)) => Some(n),
        _ => None,
    }
}

/// Returns the number of violations seen.
fn randomized_cjm_sequence(algo: MonitorAlgo, seed: u64) -> usize {
    let m = Monitors::with_algo(algo);
    let objs: Vec<SyncObject> = (0..4u32)
        .map(|i| {
            SyncObject::with_header(NeutralHeader {
                ihash: if i % 2 == 0 { 0 } else { 1000 + i },
                klass: 77 + i,
                age: (i as u8) * 3,
                lock_bits: LockBits::NONE,
            })
        })
        .collect();
    let initial: Vec<NeutralHeader> = objs
        .iter()
        .map(|o| neutral(o.header().load()).unwrap())
        .collect();
    let mut hashes: Vec<Option<u32>> = initial
        .iter()
        .map(|h| (h.ihash != 0).then_some(h.ihash))
        .collect();
    let mut cx = m.context();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..HEADER_OPS {
        let i = rng.random_range(0..objs.len());
        let o = &objs[i];
        match rng.random_range(0..6) {
            0 => {
                if cx.hold_depth(o) < 3 {
                    cx.enter(o);
                }
            }
            1 => {
                if cx.holds(o) {
                    cx.exit(o).unwrap();
                }
            }
            2 => {
                if cx.holds(o) && cx.wait(o, Some(Duration::ZERO)).unwrap() != WaitOutcome::TimedOut
                {
                    violations += 1;
                }
            }
            3 => {
                if cx.holds(o) {
                    if rng.random() {
                        cx.notify(o)
                    } else {
                        cx.notify_all(o)
                    }
                    .unwrap();
                }
            }
            4 => {
                let h = cx.identity_hash(o);
                if *hashes[i].get_or_insert(h) != h {
                    violations += 1;
                }
            }
            _ => {
                let h = neutral(cx.read_header(o));
                let ok = h.is_some_and(|h| {
                    h.klass == initial[i].klass
                        && h.age == initial[i].age
                        && hashes[i].is_none_or(|x| x == h.ihash)
                });
                if !ok {
                    violations += 1;
                }
            }
        }
    }
    for o in &objs {
        while cx.holds(o) {
            cx.exit(o).unwrap();
        }
    }
    for (i, o) in objs.iter().enumerate() {
        let mut expected = initial[i];
        expected.ihash = neutral(o.header().load()).map_or(0, |h| h.ihash);
        if o.header().load() != expected.encode() || hashes[i].is_some_and(|h| h != expected.ihash)
        {
            violations += 1;
        }
    }
    violations
}

fn churn_reads(algo: MonitorAlgo) -> (usize, u64) {
    let m = Monitors::with_algo(algo);
    let obj = SyncObject::new(5);
    let ihash = m.context().identity_hash(&obj);
    let stop = AtomicBool::new(false);
    let violations = AtomicUsize::new(0);
    let reads = AtomicU64::new(0);
    thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| {
                let mut cx = m.context();
                while !stop.load(Ordering::Relaxed) {
                    cx.enter(&obj);
                    cx.exit(&obj).unwrap();
                }
            });
        }
        s.spawn(|| {
            let cx = m.context();
            while !stop.load(Ordering::Relaxed) {
                let raw = cx.read_header(&obj);
                let ok = Header::decode(raw).is_ok_and(|h| h.mode() == HeaderMode::Neutral)
                    && neutral(raw).is_some_and(|h| h.ihash == ihash && h.klass == 5);
                if !ok {
                    violations.fetch_add(1, Ordering::Relaxed);
                }
                reads.fetch_add(1, Ordering::Relaxed);
            }
        });
        thread::sleep(CHURN_RUN);
        stop.store(true, Ordering::Relaxed);
    });
    (violations.into_inner(), reads.into_inner())
}

fn header_integrity(v: &mut Verdicts) {
    let mut details = Vec::new();
    let mut pass = true;
    for algo in [MonitorAlgo::CjmFifo, MonitorAlgo::CjmBy] {
        let seq = randomized_cjm_sequence(algo, 0x5eed);
        let (churn, reads) = churn_reads(algo);
        pass &= seq == 0 && churn == 0 && reads > 0;
        details.push(format!(
            "{algo}: sequence violations {seq}, churn violations {churn} in {reads} reads"
        ));
    }
    v.record(
        7,
        true,
        pass,
        format!("header integrity: {}", details.join("; ")),
    );
}

fn waiters_exist_conservatism(v: &mut Verdicts) {
    let m = Monitors::with_algo(MonitorAlgo::HashChains3);
    let obj = SyncObject::new(3);
    let stop = AtomicBool::new(false);
    let mut false_negatives = 0;
    let mut with_waiters = 0;
    thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| {
                let mut cx = m.context();
                let mut n = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    cx.enter(&obj);
                    n += 1;
                    if n.is_multiple_of(16) {
                        thread::yield_now();
                    }
                    if n.is_multiple_of(128) {
                        cx.wait(&obj, Some(Duration::from_micros(50))).unwrap();
                    }
                    cx.exit(&obj).unwrap();
                }
            });
        }
        for _ in 0..SNAPSHOTS {
            let snap = m.chain_snapshot(&obj);
            if snap.count(RecordState::EntryWait) > 0 {
                with_waiters += 1;
                let bits = neutral(snap.header).map_or(LockBits::NONE, |h| h.lock_bits);
                if !bits.contains(LockBits::LOCKED.with(LockBits::WAITERS_EXIST)) {
                    false_negatives += 1;
                }
            }
        }
        stop.store(true, Ordering::Relaxed);
    });
    v.record(
        8,
        true,
        false_negatives == 0 && with_waiters > 0,
        format!(
            "WaitersExist conservatism: {false_negatives} false negatives in {SNAPSHOTS} snapshots \
             ({with_waiters} with entry waiters queued)"
        ),
    );
}

fn spin_bound(v: &mut Verdicts) {
    let hw = spin_high_water();
    v.record(
        9,
        true,
        hw <= DEFAULT_MAX_SPINS as u64,
        format!("spin bound: at most {hw} polls between parks across the suite (limit {DEFAULT_MAX_SPINS})"),
    );
}

fn main() {
    assert!(
        std::env::var(monitors::park::MAX_SPINS_ENV).is_err(),
        "spin budget must be the default"
    );
    let mut v = Verdicts(Vec::new());
    exclusion_oracle(&mut v);
    self_cleaning_memory(&mut v);
    fast_path_counters(&mut v);
    latency_ordering(&mut v);
    fifo_order(&mut v);
    bounded_bypass(&mut v);
    header_integrity(&mut v);
    waiters_exist_conservatism(&mut v);
    spin_bound(&mut v);
    let failed: Vec<u32> =
        v.0.iter()
            .filter(|(_, enforced, pass)| *enforced && !pass)
            .map(|c| c.0)
            .collect();
    if !failed.is_empty() {
        eprintln!("criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
