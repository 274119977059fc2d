//! Monitors kept entirely in the hashed bucket chains.
//!
//! Every acquisition appends a record to the object's group under the bucket
//! lock and every release removes it under the lock again. Waiting threads
//! spin and park on their own record's state; the releaser hands the monitor
//! to the oldest entry waiter directly.

use std::time::Instant;

use crate::bucket::ChainGuard;
use crate::header::SyncObject;
use crate::monitor::{Local, Shared, WaitOutcome};
use crate::park::spin_then_park_local;
use crate::record::{LockRecord, RecordState, Waker};

#[inline]
fn r<'a>(p: *mut LockRecord) -> &'a LockRecord {
    unsafe { &*p }
}

pub(crate) fn acquire(sh: &Shared, lc: &mut Local, obj: &SyncObject) -> *mut LockRecord {
    let addr = obj.addr();
    let rec = lc.alloc(sh, addr);
    let rr = r(rec);
    if sh.table.fast_path() {
        rr.set_state(RecordState::Owner);
        if sh.table.try_fast_insert(addr, rec) {
            lc.stats.fast_cas += 1;
            return rec;
        }
    }
    let contended = {
        let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
        let contended = g.group(addr).any(|p| {
            matches!(
                r(p).state(),
                RecordState::Owner | RecordState::Granted | RecordState::EntryWait
            )
        });
        rr.set_state(if contended {
            RecordState::EntryWait
        } else {
            RecordState::Owner
        });
        g.append(rec);
        contended
    };
    if contended {
        await_grant(sh, lc, rr);
    }
    rec
}

fn await_grant(sh: &Shared, lc: &mut Local, rr: &LockRecord) {
    lc.stats.contended += 1;
    spin_then_park_local(
        rr.state_word(),
        || rr.state() == RecordState::Granted,
        sh.config.spin,
        lc.park(),
    );
    rr.set_state(RecordState::Owner);
}

/// Grants the monitor to the oldest entry waiter of `addr`, if any.
fn grant_next(g: &ChainGuard<'_>, addr: usize) -> Option<Waker> {
    g.first_in(addr, RecordState::EntryWait)
        .map(|s| r(s).grant())
}

pub(crate) fn release(sh: &Shared, lc: &mut Local, obj: &SyncObject, rec: *mut LockRecord) {
    let addr = obj.addr();
    if sh.table.fast_path() && sh.table.try_fast_remove(addr, rec) {
        lc.stats.fast_cas += 1;
        lc.free(rec);
        return;
    }
    let waker = {
        let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
        let present = g.remove(rec);
        debug_assert!(present);
        grant_next(&g, addr)
    };
    if let Some(w) = waker {
        lc.stats.handoffs += 1;
        w.wake();
    }
    lc.free(rec);
}

pub(crate) fn wait(
    sh: &Shared,
    lc: &mut Local,
    obj: &SyncObject,
    rec: *mut LockRecord,
    deadline: Option<Instant>,
) -> (*mut LockRecord, WaitOutcome) {
    let addr = obj.addr();
    let rr = r(rec);
    let waker = {
        let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
        // A fast-path singleton was moved onto the chain by the lock above.
        rr.set_state(RecordState::WaitSet);
        grant_next(&g, addr)
    };
    if let Some(w) = waker {
        lc.stats.handoffs += 1;
        w.wake();
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
                        if g.has_owner(addr) || g.first_in(addr, RecordState::EntryWait).is_some() {
                            rr.set_state(RecordState::EntryWait);
                            g.move_to_tail(rec);
                        } else {
                            rr.set_state(RecordState::Owner);
                        }
                    }
                } else {
                    lc.park().park_until(deadline);
                }
            }
            RecordState::EntryWait => {
                lc.park().park();
            }
            s => unreachable!("waiting record in state {s:?}"),
        }
    }
    rr.set_state(RecordState::Owner);
    (rec, outcome)
}

pub(crate) fn notify(sh: &Shared, lc: &mut Local, obj: &SyncObject, all: bool) {
    let addr = obj.addr();
    let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
    while let Some(w) = g.first_in(addr, RecordState::WaitSet) {
        r(w).set_state(RecordState::EntryWait);
        g.move_to_tail(w);
        if !all {
            break;
        }
    }
}
