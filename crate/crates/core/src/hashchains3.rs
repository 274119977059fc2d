//! Bucket chains plus three header bits.
//!
//! The header carries `Locked` and `WaitersExist`; an uncontended enter or
//! exit is a single header CAS. Only threads that have to wait put a record
//! on the bucket chain. `WaitersExist` is conservative: it may be set with
//! no entry waiter queued, which merely sends the next exit down the slow
//! path. The converse never happens: whenever an entry waiter for the
//! object is on the chain, both bits are set. Every transition that could
//! strand a waiter is made under the bucket lock, and the unlocking CAS
//! expects `WaitersExist` clear, so it fails once a waiter has announced
//! itself.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crate::bucket::ChainGuard;
use crate::header::{LockBits, SyncObject};
use crate::monitor::{Local, Shared, WaitOutcome};
use crate::park::spin_then_park_local;
use crate::record::{LockRecord, RecordState, Waker};

const L: u64 = LockBits::LOCKED.word_mask();
const WE: u64 = LockBits::WAITERS_EXIST.word_mask();

#[inline]
fn r<'a>(p: *mut LockRecord) -> &'a LockRecord {
    unsafe { &*p }
}

/// Acquires the monitor; never leaves a record behind.
pub(crate) fn acquire(sh: &Shared, lc: &mut Local, obj: &SyncObject) -> *mut LockRecord {
    let w = obj.header().word();
    let h = w.load(Ordering::Relaxed);
    if h & L == 0
        && w.compare_exchange(h, h | L, Ordering::Acquire, Ordering::Relaxed)
            .is_ok()
    {
        lc.stats.header_cas += 1;
        return std::ptr::null_mut();
    }
    slow_acquire(sh, lc, obj);
    std::ptr::null_mut()
}

fn slow_acquire(sh: &Shared, lc: &mut Local, obj: &SyncObject) {
    let addr = obj.addr();
    let w = obj.header().word();
    let rec = lc.alloc(sh, addr);
    {
        let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
        if lock_or_announce(w) {
            drop(g);
            lc.free(rec);
            return;
        }
        g.append(rec);
    }
    lc.stats.contended += 1;
    let rr = r(rec);
    spin_then_park_local(
        rr.state_word(),
        || rr.state() == RecordState::Granted,
        sh.config.spin,
        lc.park(),
    );
    lc.free(rec);
}

/// Takes the lock if it is free, otherwise makes sure `WaitersExist` is set.
/// Returns whether the lock was taken. Called with the bucket lock held.
fn lock_or_announce(w: &AtomicU64) -> bool {
    let mut h = w.load(Ordering::Relaxed);
    loop {
        let (want, acquired) = if h & L == 0 {
            (h | L, true)
        } else if h & WE == 0 {
            (h | WE, false)
        } else {
            return false;
        };
        match w.compare_exchange_weak(h, want, Ordering::AcqRel, Ordering::Relaxed) {
            Ok(_) if acquired => return true,
            Ok(_) => return false,
            Err(cur) => h = cur,
        }
    }
}

pub(crate) fn release(sh: &Shared, lc: &mut Local, obj: &SyncObject) {
    let w = obj.header().word();
    let mut h = w.load(Ordering::Relaxed);
    while h & WE == 0 {
        debug_assert!(h & L != 0, "unlocking an unlocked monitor");
        match w.compare_exchange_weak(h, h & !L, Ordering::Release, Ordering::Relaxed) {
            Ok(_) => {
                lc.stats.header_cas += 1;
                return;
            }
            Err(cur) => h = cur,
        }
    }
    let waker = {
        let g = sh.table.lock(obj.addr(), &mut lc.stats.bucket_locks);
        handoff_or_unlock(&g, w, obj.addr())
    };
    if let Some(wk) = waker {
        lc.stats.handoffs += 1;
        wk.wake();
    }
}

/// Passes ownership to the oldest entry waiter, or unlocks when there is
/// none. `WaitersExist` is cleared once no entry waiter remains queued.
fn handoff_or_unlock(g: &ChainGuard<'_>, w: &AtomicU64, addr: usize) -> Option<Waker> {
    match g.first_in(addr, RecordState::EntryWait) {
        Some(s) => {
            g.remove(s);
            if g.first_in(addr, RecordState::EntryWait).is_none() {
                w.fetch_and(!WE, Ordering::Relaxed);
            }
            // `Locked` stays set: ownership moves without unlocking.
            Some(r(s).grant())
        }
        None => {
            w.fetch_and(!(L | WE), Ordering::Release);
            None
        }
    }
}

pub(crate) fn wait(
    sh: &Shared,
    lc: &mut Local,
    obj: &SyncObject,
    deadline: Option<Instant>,
) -> (*mut LockRecord, WaitOutcome) {
    let addr = obj.addr();
    let w = obj.header().word();
    let rec = lc.alloc(sh, addr);
    let rr = r(rec);
    rr.set_state(RecordState::WaitSet);
    let waker = {
        let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
        g.append(rec);
        handoff_or_unlock(&g, w, addr)
    };
    if let Some(wk) = waker {
        lc.stats.handoffs += 1;
        wk.wake();
    }
    let mut outcome = WaitOutcome::Notified;
    loop {
        match rr.state() {
            RecordState::Granted | RecordState::Owner => break,
            RecordState::WaitSet => {
                if deadline.is_some_and(|d| Instant::now() >= d) {
                    let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
                    if rr.state() == RecordState::WaitSet {
                        outcome = WaitOutcome::TimedOut;
                        g.remove(rec);
                        if lock_or_announce(w) {
                            rr.set_state(RecordState::Owner);
                        } else {
                            rr.set_state(RecordState::EntryWait);
                            g.append(rec);
                        }
                    }
                } else {
                    lc.park().park_until(deadline);
                }
            }
            RecordState::EntryWait => lc.park().park(),
            s => unreachable!("waiting record in state {s:?}"),
        }
    }
    lc.free(rec);
    (std::ptr::null_mut(), outcome)
}

pub(crate) fn notify(sh: &Shared, lc: &mut Local, obj: &SyncObject, all: bool) {
    let addr = obj.addr();
    let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
    let mut moved = false;
    while let Some(wr) = g.first_in(addr, RecordState::WaitSet) {
        r(wr).set_state(RecordState::EntryWait);
        g.move_to_tail(wr);
        moved = true;
        if !all {
            break;
        }
    }
    if moved {
        // We hold the monitor, so `Locked` is set already.
        obj.header().word().fetch_or(WE, Ordering::Relaxed);
    }
}
