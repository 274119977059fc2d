//! Per-thread parking and the spin-then-park waiting policy.

use std::collections::HashMap;
use std::hint;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Instant;

/// Default number of polite spins before a waiter parks.
pub const DEFAULT_MAX_SPINS: u32 = 2500;

/// Environment variable overriding [`DEFAULT_MAX_SPINS`].
pub const MAX_SPINS_ENV: &str = "MONITORS_MAX_SPINS";

const EMPTY: u32 = 0;
const PARKED: u32 = 1;
const NOTIFIED: u32 = 2;

/// A binary permit with a mutex-condvar pair underneath.
///
/// Only the owning thread parks; any thread may unpark. An unpark delivered
/// before the park makes that park return immediately.
#[derive(Debug, Default)]
pub struct ParkHandle {
    state: AtomicU32,
    lock: Mutex<()>,
    cvar: Condvar,
    parks: AtomicU64,
}

impl ParkHandle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Blocks until a permit is available, then consumes it.
    pub fn park(&self) {
        self.park_until(None);
    }

    /// Like [`park`](Self::park) but gives up at `deadline`. Returns `true`
    /// when a permit was consumed.
    pub fn park_until(&self, deadline: Option<Instant>) -> bool {
        if self
            .state
            .compare_exchange(NOTIFIED, EMPTY, Ordering::Acquire, Ordering::Relaxed)
            .is_ok()
        {
            return true;
        }
        let mut guard = self.lock.lock().unwrap();
        match self
            .state
            .compare_exchange(EMPTY, PARKED, Ordering::Relaxed, Ordering::Relaxed)
        {
            Ok(_) => {}
            Err(NOTIFIED) => {
                self.state.swap(EMPTY, Ordering::Acquire);
                return true;
            }
            Err(other) => panic!("inconsistent park state {other}; handle parked twice"),
        }
        self.parks.fetch_add(1, Ordering::Relaxed);
        loop {
            guard = match deadline {
                None => self.cvar.wait(guard).unwrap(),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        // Timed out; a concurrent unpark may still have landed.
                        return self.state.swap(EMPTY, Ordering::Acquire) == NOTIFIED;
                    }
                    self.cvar.wait_timeout(guard, deadline - now).unwrap().0
                }
            };
            if self
                .state
                .compare_exchange(NOTIFIED, EMPTY, Ordering::Acquire, Ordering::Relaxed)
                .is_ok()
            {
                return true;
            }
        }
    }

    /// Makes a permit available and wakes the owner if it is parked.
    pub fn unpark(&self) {
        match self.state.swap(NOTIFIED, Ordering::Release) {
            EMPTY | NOTIFIED => {}
            PARKED => {
                // Taking the lock orders the notify after the waiter's wait().
                drop(self.lock.lock().unwrap());
                self.cvar.notify_one();
            }
            other => panic!("inconsistent park state {other}"),
        }
    }

    /// Number of times the owner actually blocked.
    pub fn park_count(&self) -> u64 {
        self.parks.load(Ordering::Relaxed)
    }
}

/// Bounded polite spinning before parking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpinPolicy {
    pub max_spins: u32,
}

impl Default for SpinPolicy {
    fn default() -> Self {
        Self {
            max_spins: DEFAULT_MAX_SPINS,
        }
    }
}

impl SpinPolicy {
    pub fn new(max_spins: u32) -> Self {
        Self { max_spins }
    }

    /// Reads [`MAX_SPINS_ENV`], falling back to the default.
    pub fn from_env() -> Self {
        std::env::var(MAX_SPINS_ENV)
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .map(Self::new)
            .unwrap_or_default()
    }
}

/// What a single [`spin_then_park`] call did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpinReport {
    /// Pauses executed before the condition held or the waiter parked.
    pub spins: u32,
    /// Times the waiter parked.
    pub parks: u32,
}

static SPIN_HIGH_WATER: AtomicU64 = AtomicU64::new(0);

/// Largest number of polls any waiter in this process performed between
/// parks.
pub fn spin_high_water() -> u64 {
    SPIN_HIGH_WATER.load(Ordering::Relaxed)
}

#[inline]
pub(crate) fn note_spins(spins: u32) {
    let spins = spins as u64;
    if spins > SPIN_HIGH_WATER.load(Ordering::Relaxed) {
        SPIN_HIGH_WATER.fetch_max(spins, Ordering::Relaxed);
    }
}

/// Polls `condition` up to `policy.max_spins` times with a spin hint between
/// polls, then parks on `handle` until the condition holds.
///
/// Whoever makes the condition true must unpark `handle` afterwards.
pub fn spin_then_park(
    mut condition: impl FnMut() -> bool,
    policy: SpinPolicy,
    handle: &ParkHandle,
) -> SpinReport {
    let mut report = SpinReport::default();
    while report.spins < policy.max_spins {
        if condition() {
            note_spins(report.spins);
            return report;
        }
        hint::spin_loop();
        report.spins += 1;
    }
    note_spins(report.spins);
    while !condition() {
        handle.park();
        report.parks += 1;
    }
    report
}

/// Like [`spin_then_park`] but stops waiting at `deadline`. Returns whether
/// the condition holds.
pub fn spin_then_park_until(
    mut condition: impl FnMut() -> bool,
    policy: SpinPolicy,
    handle: &ParkHandle,
    deadline: Option<Instant>,
) -> bool {
    let mut spins = 0;
    while spins < policy.max_spins {
        if condition() {
            note_spins(spins);
            return true;
        }
        hint::spin_loop();
        spins += 1;
    }
    note_spins(spins);
    loop {
        if condition() {
            return true;
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return false;
        }
        handle.park_until(deadline);
    }
}

/// [`spin_then_park`] on a word owned by the waiter. When auditing is
/// enabled the polled address is registered for the duration of the wait so
/// that two threads spinning on one location are caught.
pub(crate) fn spin_then_park_local<T>(
    site: &T,
    condition: impl FnMut() -> bool,
    policy: SpinPolicy,
    handle: &ParkHandle,
) -> SpinReport {
    let _guard = audit::enter(site as *const T as usize);
    spin_then_park(condition, policy, handle)
}

/// Optional runtime check that all spinning is local.
pub mod audit {
    use super::*;

    static ENABLED: AtomicBool = AtomicBool::new(false);
    static VIOLATIONS: AtomicU64 = AtomicU64::new(0);

    fn sites() -> &'static Mutex<HashMap<usize, u32>> {
        static SITES: OnceLock<Mutex<HashMap<usize, u32>>> = OnceLock::new();
        SITES.get_or_init(Default::default)
    }

    pub fn enable() {
        ENABLED.store(true, Ordering::SeqCst);
    }

    /// Number of times two waiters were seen polling the same address.
    pub fn violations() -> u64 {
        VIOLATIONS.load(Ordering::SeqCst)
    }

    pub struct SiteGuard(Option<usize>);

    pub(crate) fn enter(addr: usize) -> SiteGuard {
        if !ENABLED.load(Ordering::Relaxed) {
            return SiteGuard(None);
        }
        let mut sites = sites().lock().unwrap();
        let count = sites.entry(addr).or_insert(0);
        *count += 1;
        if *count > 1 {
            VIOLATIONS.fetch_add(1, Ordering::SeqCst);
        }
        SiteGuard(Some(addr))
    }

    impl Drop for SiteGuard {
        fn drop(&mut self) {
            if let Some(addr) = self.0 {
                let mut sites = sites().lock().unwrap();
                if let Some(count) = sites.get_mut(&addr) {
                    *count -= 1;
                    if *count == 0 {
                        sites.remove(&addr);
                    }
                }
            }
        }
    }
}
