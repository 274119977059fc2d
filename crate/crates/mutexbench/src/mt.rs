//! The shared Mersenne Twister used as the exclusion oracle.
//!
//! The generator lives in plain atomic words accessed with relaxed loads and
//! stores only, so its read-modify-write steps are not atomic: the monitor
//! under test is the only thing keeping two threads from interleaving inside
//! it. Any interleaving corrupts the output sequence, which the replay check
//! then detects.

use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering::Relaxed};

use rand::RngCore;
use rand::rand_core::impls;

const N: usize = 624;
const M: usize = 397;
const MATRIX_A: u32 = 0x9908_b0df;
const UPPER: u32 = 0x8000_0000;
const LOWER: u32 = 0x7fff_ffff;

/// MT19937 with its state in shared memory and no synchronization of its own.
pub struct SharedMt {
    state: Box<[AtomicU32]>,
    index: AtomicUsize,
}

impl SharedMt {
    pub fn new(seed: u32) -> Self {
        Self {
            state: seeded(seed).iter().map(|&v| AtomicU32::new(v)).collect(),
            index: AtomicUsize::new(N),
        }
    }

    /// Draws one 32-bit output.
    #[inline]
    pub fn step(&self) -> u32 {
        let mut i = self.index.load(Relaxed);
        if i >= N {
            self.twist();
            i = 0;
        }
        let y = self.state[i].load(Relaxed);
        self.index.store(i + 1, Relaxed);
        temper(y)
    }

    fn twist(&self) {
        let s = &self.state;
        for k in 0..N {
            let v = mix(
                s[k].load(Relaxed),
                s[(k + 1) % N].load(Relaxed),
                s[(k + M) % N].load(Relaxed),
            );
            s[k].store(v, Relaxed);
        }
    }
}

/// Plain single-threaded MT19937, used for replay and per-thread draws.
#[derive(Clone)]
pub struct Mt19937 {
    state: [u32; N],
    index: usize,
}

impl Mt19937 {
    pub fn new(seed: u32) -> Self {
        Self {
            state: seeded(seed),
            index: N,
        }
    }
}

impl RngCore for Mt19937 {
    fn next_u32(&mut self) -> u32 {
        if self.index >= N {
            let s = &mut self.state;
            for k in 0..N {
                s[k] = mix(s[k], s[(k + 1) % N], s[(k + M) % N]);
            }
            self.index = 0;
        }
        let y = self.state[self.index];
        self.index += 1;
        temper(y)
    }

    fn next_u64(&mut self) -> u64 {
        impls::next_u64_via_u32(self)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}

fn seeded(seed: u32) -> [u32; N] {
    let mut s = [0u32; N];
    s[0] = seed;
    for i in 1..N {
        s[i] = 1_812_433_253u32
            .wrapping_mul(s[i - 1] ^ (s[i - 1] >> 30))
            .wrapping_add(i as u32);
    }
    s
}

#[inline]
fn mix(cur: u32, next: u32, far: u32) -> u32 {
    let y = (cur & UPPER) | (next & LOWER);
    let v = far ^ (y >> 1);
    if y & 1 != 0 { v ^ MATRIX_A } else { v }
}

#[inline]
fn temper(mut y: u32) -> u32 {
    y ^= y >> 11;
    y ^= (y << 7) & 0x9d2c_5680;
    y ^= (y << 15) & 0xefc6_0000;
    y ^ (y >> 18)
}

/// Outcome of comparing the shared generator against a single-threaded
/// replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionReport {
    pub ok: bool,
    /// Shared steps replayed before comparing.
    pub replayed_steps: u64,
    /// First position (of one full state's worth of outputs) where the two
    /// generators disagree.
    pub first_mismatch: Option<usize>,
    pub expected: u32,
    pub observed: u32,
}

/// Replays `steps` draws from `seed` single-threaded and checks that the
/// shared generator is in the same state, by comparing the next 624 outputs
/// of both. Consumes outputs from `shared`.
pub fn exclusion_oracle(seed: u32, steps: u64, shared: &SharedMt) -> ExclusionReport {
    let mut replay = Mt19937::new(seed);
    for _ in 0..steps {
        replay.next_u32();
    }
    let mut report = ExclusionReport {
        ok: true,
        replayed_steps: steps,
        first_mismatch: None,
        expected: 0,
        observed: 0,
    };
    for pos in 0..N {
        let (e, o) = (replay.next_u32(), shared.step());
        if e != o && report.ok {
            report = ExclusionReport {
                ok: false,
                first_mismatch: Some(pos),
                expected: e,
                observed: o,
                ..report
            };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_thousandth_output_of_default_seed() {
        let mt = SharedMt::new(5489);
        let mut last = 0;
        for _ in 0..10_000 {
            last = mt.step();
        }
        assert_eq!(last, 4_123_659_995);
    }

    #[test]
    fn plain_generator_hits_the_reference_vector() {
        let mut mt = Mt19937::new(5489);
        assert_eq!(mt.next_u32(), 3_499_211_612);
        for _ in 1..9999 {
            mt.next_u32();
        }
        assert_eq!(mt.next_u32(), 4_123_659_995);
    }

    #[test]
    fn matches_plain_stream() {
        let shared = SharedMt::new(0xdead_beef);
        let mut reference = Mt19937::new(0xdead_beef);
        for _ in 0..5000 {
            assert_eq!(shared.step(), reference.next_u32());
        }
    }

    #[test]
    fn oracle_accepts_exact_replay() {
        let shared = SharedMt::new(7);
        for _ in 0..5000 {
            shared.step();
        }
        let report = exclusion_oracle(7, 5000, &shared);
        assert!(report.ok, "{report:?}");
    }

    #[test]
    fn oracle_rejects_a_lost_step() {
        let shared = SharedMt::new(7);
        for _ in 0..4999 {
            shared.step();
        }
        let report = exclusion_oracle(7, 5000, &shared);
        assert!(!report.ok);
        assert_eq!(report.first_mismatch, Some(0));
    }

    #[test]
    fn zero_steps_is_vacuous() {
        assert!(exclusion_oracle(11, 0, &SharedMt::new(11)).ok);
    }
}
