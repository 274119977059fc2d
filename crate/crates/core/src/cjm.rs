//! Compact Java Monitors.
//!
//! While an object is locked its header word is displaced: it holds the tail
//! of an MCS queue of lock records (tag `01`). Every record entering the
//! queue carries a copy of the neutral header, so the header stays readable
//! through whichever record is the current tail. The queue head owns the
//! monitor; on exit it hands ownership to its successor or, with an empty
//! queue, swings the header back to the neutral value.
//!
//! A monitor's wait set is a list of records anchored in the owner's record
//! and handed along with ownership. When the monitor goes idle with waiters,
//! the list moves to the object's bucket in the side table until the next
//! acquisition takes it back.
//!
//! The bypass variant adds an outer test-and-set byte next to the header.
//! Owning the monitor means owning that byte; the MCS queue then only orders
//! the threads that failed to barge, and its head (the standby) competes for
//! the byte. A standby that has waited longer than its patience flags the
//! object impatient, which stops barging and makes the next release hand the
//! byte straight to the standby.

use std::hint;
use std::ptr;
use std::sync::atomic::{AtomicPtr, Ordering};
use std::time::{Duration, Instant};

use crate::header::{SyncObject, displaced_tail, displaced_word, ihash_of, is_neutral};
use crate::monitor::{Local, Shared, WaitOutcome};
use crate::park::{audit, spin_then_park_local, spin_then_park_until};
use crate::record::{LockRecord, RecordState};

#[inline]
fn r<'a>(p: *mut LockRecord) -> &'a LockRecord {
    unsafe { &*p }
}

/// Objects get their identity hash on first synchronization so that every
/// displaced copy carries it.
#[inline]
fn ensure_hashed(obj: &SyncObject) {
    let h = obj.header().load();
    if is_neutral(h) && ihash_of(h) == 0 {
        let _ = obj.assign_identity_hash();
    }
}

/// Appends `rec` to the object's queue. Returns the predecessor, or `None`
/// when the queue was empty and `rec` became its head.
fn enqueue(obj: &SyncObject, rec: *mut LockRecord) -> Option<*mut LockRecord> {
    let addr = obj.addr();
    let w = obj.header().word();
    let rr = r(rec);
    let mut published = 0;
    loop {
        let h = w.load(Ordering::Acquire);
        let displaced = if is_neutral(h) {
            h
        } else {
            let tail = displaced_tail(h).expect("reserved header tag");
            match r(tail).read_displaced_for(addr) {
                Some(d) => d,
                None => {
                    // The tail is mid-publication or already recycled.
                    hint::spin_loop();
                    continue;
                }
            }
        };
        if displaced != published {
            rr.publish(addr, displaced);
            published = displaced;
        }
        if w.compare_exchange(h, displaced_word(rec), Ordering::AcqRel, Ordering::Relaxed)
            .is_ok()
        {
            if is_neutral(h) {
                return None;
            }
            let pred = displaced_tail(h).unwrap();
            let pr = r(pred);
            pr.next.store(rec, Ordering::SeqCst);
            if pr.link_waiter.load(Ordering::SeqCst) {
                pr.waker().wake();
            }
            return Some(pred);
        }
    }
}

/// Passes queue ownership from `q` to its successor `next`.
fn hand_to(lc: &mut Local, q: &LockRecord, next: *mut LockRecord) {
    let nr = r(next);
    debug_assert_eq!(nr.displaced(), q.displaced());
    nr.wait_head.store(
        q.wait_head.swap(ptr::null_mut(), Ordering::Relaxed),
        Ordering::Relaxed,
    );
    q.authoritative.store(false, Ordering::Release);
    nr.authoritative.store(true, Ordering::Release);
    lc.stats.handoffs += 1;
    nr.grant().wake();
}

/// Releases queue ownership held by `q`. Does not free `q`.
fn release_queue(sh: &Shared, lc: &mut Local, obj: &SyncObject, q: *mut LockRecord) {
    let addr = obj.addr();
    let w = obj.header().word();
    let qr = r(q);
    loop {
        let next = qr.next.load(Ordering::Acquire);
        if !next.is_null() {
            hand_to(lc, qr, next);
            return;
        }
        let anchor = qr.wait_head.load(Ordering::Relaxed);
        if !anchor.is_null() {
            let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
            g.put_group(anchor);
            sh.side_count.fetch_add(1, Ordering::Relaxed);
        }
        if w.compare_exchange(
            displaced_word(q),
            qr.displaced(),
            Ordering::Release,
            Ordering::Relaxed,
        )
        .is_ok()
        {
            lc.stats.header_cas += 1;
            qr.wait_head.store(ptr::null_mut(), Ordering::Relaxed);
            qr.authoritative.store(false, Ordering::Release);
            return;
        }
        if !anchor.is_null() {
            // A successor is linking in; it will get the list directly.
            let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
            let taken = g.take_group(addr);
            debug_assert_eq!(taken, Some(anchor));
            sh.side_count.fetch_sub(1, Ordering::Relaxed);
        }
        // The successor has swung the tail but not yet linked itself.
        qr.link_waiter.store(true, Ordering::SeqCst);
        spin_then_park_local(
            &qr.next,
            || !qr.next.load(Ordering::SeqCst).is_null(),
            sh.config.spin,
            lc.park(),
        );
        qr.link_waiter.store(false, Ordering::Relaxed);
    }
}

/// Called by a new queue head that found the object idle: reclaims a wait
/// list left in the side table.
fn reclaim_waiters(sh: &Shared, lc: &mut Local, obj: &SyncObject, q: &LockRecord) {
    if sh.side_count.load(Ordering::Relaxed) == 0 {
        return;
    }
    let g = sh.table.lock(obj.addr(), &mut lc.stats.bucket_locks);
    if let Some(head) = g.take_group(obj.addr()) {
        sh.side_count.fetch_sub(1, Ordering::Relaxed);
        q.wait_head.store(head, Ordering::Relaxed);
    }
}

fn await_grant(sh: &Shared, lc: &mut Local, rr: &LockRecord) {
    lc.stats.contended += 1;
    spin_then_park_local(
        rr.state_word(),
        || rr.state() == RecordState::Granted,
        sh.config.spin,
        lc.park(),
    );
}

pub(crate) fn acquire_fifo(sh: &Shared, lc: &mut Local, obj: &SyncObject) -> *mut LockRecord {
    ensure_hashed(obj);
    let rec = lc.alloc(sh, obj.addr());
    let rr = r(rec);
    match enqueue(obj, rec) {
        None => {
            lc.stats.header_cas += 1;
            rr.authoritative.store(true, Ordering::Release);
            reclaim_waiters(sh, lc, obj, rr);
        }
        Some(_) => await_grant(sh, lc, rr),
    }
    rr.set_state(RecordState::Owner);
    rec
}

pub(crate) fn release_fifo(sh: &Shared, lc: &mut Local, obj: &SyncObject, rec: *mut LockRecord) {
    release_queue(sh, lc, obj, rec);
    lc.free(rec);
}

fn list_append(head: &AtomicPtr<LockRecord>, node: *mut LockRecord) {
    r(node).rib_next.store(ptr::null_mut(), Ordering::Relaxed);
    let mut cur = head.load(Ordering::Relaxed);
    if cur.is_null() {
        head.store(node, Ordering::Relaxed);
        return;
    }
    loop {
        let next = r(cur).rib_next.load(Ordering::Relaxed);
        if next.is_null() {
            r(cur).rib_next.store(node, Ordering::Relaxed);
            return;
        }
        cur = next;
    }
}

fn list_remove(head: &AtomicPtr<LockRecord>, node: *mut LockRecord) -> bool {
    let mut prev: *mut LockRecord = ptr::null_mut();
    let mut cur = head.load(Ordering::Relaxed);
    while !cur.is_null() {
        let next = r(cur).rib_next.load(Ordering::Relaxed);
        if cur == node {
            if prev.is_null() {
                head.store(next, Ordering::Relaxed);
            } else {
                r(prev).rib_next.store(next, Ordering::Relaxed);
            }
            r(node).rib_next.store(ptr::null_mut(), Ordering::Relaxed);
            return true;
        }
        prev = cur;
        cur = next;
    }
    false
}

/// Waits on the caller's own record until it is granted the queue again or
/// the deadline passes and it manages to withdraw. Returns `false` on a
/// withdrawal.
fn await_notify(lc: &mut Local, rr: &LockRecord, deadline: Option<Instant>) -> bool {
    loop {
        match rr.state() {
            RecordState::Granted => return true,
            RecordState::WaitSet => {
                if deadline.is_some_and(|d| Instant::now() >= d) {
                    if rr.cas_state(RecordState::WaitSet, RecordState::TimedOut) {
                        return false;
                    }
                } else {
                    lc.park().park_until(deadline);
                }
            }
            RecordState::EntryWait => lc.park().park(),
            s => unreachable!("waiting record in state {s:?}"),
        }
    }
}

/// Queues a notified waiter's record for the monitor on its behalf.
fn enqueue_for(sh: &Shared, w: *mut LockRecord, obj: &SyncObject) {
    let wr = r(w);
    wr.next.store(ptr::null_mut(), Ordering::Relaxed);
    wr.enqueued_at.store(sh.now_ns(), Ordering::Relaxed);
    if enqueue(obj, w).is_none() {
        // Only possible for the bypass variant, whose queue is empty while
        // the owner holds just the outer byte.
        wr.authoritative.store(true, Ordering::Release);
        wr.grant().wake();
    }
}

pub(crate) fn wait_fifo(
    sh: &Shared,
    lc: &mut Local,
    obj: &SyncObject,
    q: *mut LockRecord,
    deadline: Option<Instant>,
) -> (*mut LockRecord, WaitOutcome) {
    let qr = r(q);
    qr.set_state(RecordState::WaitSet);
    list_append(&qr.wait_head, q);
    release_queue(sh, lc, obj, q);
    if await_notify(lc, qr, deadline) {
        qr.set_state(RecordState::Owner);
        return (q, WaitOutcome::Notified);
    }
    let rec = acquire_fifo(sh, lc, obj);
    let found = list_remove(&r(rec).wait_head, q);
    debug_assert!(found, "timed-out waiter missing from the wait list");
    lc.free(q);
    (rec, WaitOutcome::TimedOut)
}

pub(crate) fn notify_fifo(
    sh: &Shared,
    _lc: &mut Local,
    obj: &SyncObject,
    q: *mut LockRecord,
    all: bool,
) {
    let head = &r(q).wait_head;
    let mut cur = head.load(Ordering::Relaxed);
    while !cur.is_null() {
        let next = r(cur).rib_next.load(Ordering::Relaxed);
        if r(cur).cas_state(RecordState::WaitSet, RecordState::EntryWait) {
            list_remove(head, cur);
            enqueue_for(sh, cur, obj);
            if !all {
                return;
            }
        }
        cur = next;
    }
}

/// Owners of the records linked behind `head`.
pub(crate) fn queued_owners(head: *mut LockRecord) -> Vec<u64> {
    let mut out = Vec::new();
    let mut cur = r(head).next.load(Ordering::Acquire);
    while !cur.is_null() {
        out.push(r(cur).owner());
        cur = r(cur).next.load(Ordering::Acquire);
    }
    out
}

pub(crate) fn acquire_by(sh: &Shared, lc: &mut Local, obj: &SyncObject) -> *mut LockRecord {
    ensure_hashed(obj);
    let cell = &obj.bypass;
    if !cell.impatient.load(Ordering::Relaxed) {
        for _ in 0..sh.config.barge_attempts {
            if cell.outer.load(Ordering::Relaxed) == 0
                && cell
                    .outer
                    .compare_exchange(0, 1, Ordering::SeqCst, Ordering::Relaxed)
                    .is_ok()
            {
                lc.stats.header_cas += 1;
                return ptr::null_mut();
            }
            hint::spin_loop();
        }
    }
    let rec = lc.alloc(sh, obj.addr());
    let rr = r(rec);
    rr.enqueued_at.store(sh.now_ns(), Ordering::Relaxed);
    match enqueue(obj, rec) {
        None => rr.authoritative.store(true, Ordering::Release),
        Some(_) => await_grant(sh, lc, rr),
    }
    standby(sh, lc, obj, rec);
    ptr::null_mut()
}

/// Runs as head of the inner queue: competes for the outer byte, then
/// passes the inner queue on and frees `rec`.
fn standby(sh: &Shared, lc: &mut Local, obj: &SyncObject, rec: *mut LockRecord) {
    let cell = &obj.bypass;
    let rr = r(rec);
    cell.standby.store(rec, Ordering::SeqCst);
    let enqueued = sh.epoch() + Duration::from_nanos(rr.enqueued_at.load(Ordering::Relaxed));
    let mut patience_deadline = enqueued.checked_add(sh.config.patience);
    let take = || {
        rr.outer_granted.load(Ordering::Acquire)
            || (cell.outer.load(Ordering::SeqCst) == 0
                && cell
                    .outer
                    .compare_exchange(0, 1, Ordering::SeqCst, Ordering::Relaxed)
                    .is_ok())
    };
    loop {
        // At most one standby polls the outer byte at a time.
        let _site = audit::enter(&cell.outer as *const _ as usize);
        if spin_then_park_until(take, sh.config.spin, lc.park(), patience_deadline) {
            break;
        }
        cell.impatient.store(true, Ordering::SeqCst);
        patience_deadline = None;
    }
    rr.outer_granted.store(false, Ordering::Relaxed);
    cell.impatient.store(false, Ordering::SeqCst);
    cell.standby.store(ptr::null_mut(), Ordering::SeqCst);
    rr.set_state(RecordState::Owner);
    release_queue(sh, lc, obj, rec);
    lc.free(rec);
}

pub(crate) fn release_by(obj: &SyncObject) {
    let cell = &obj.bypass;
    if cell.impatient.load(Ordering::SeqCst) {
        let s = cell.standby.load(Ordering::SeqCst);
        if !s.is_null() {
            // The outer byte stays set: ownership passes directly.
            let sr = r(s);
            let waker = sr.waker();
            sr.outer_granted.store(true, Ordering::Release);
            waker.wake();
            return;
        }
    }
    cell.outer.store(0, Ordering::SeqCst);
    let s = cell.standby.load(Ordering::SeqCst);
    if !s.is_null() {
        r(s).waker().wake();
    }
}

pub(crate) fn wait_by(
    sh: &Shared,
    lc: &mut Local,
    obj: &SyncObject,
    deadline: Option<Instant>,
) -> (*mut LockRecord, WaitOutcome) {
    let addr = obj.addr();
    let w = lc.alloc(sh, addr);
    let wr = r(w);
    wr.set_state(RecordState::WaitSet);
    {
        let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
        g.append(w);
    }
    release_by(obj);
    if await_notify(lc, wr, deadline) {
        standby(sh, lc, obj, w);
        return (ptr::null_mut(), WaitOutcome::Notified);
    }
    acquire_by(sh, lc, obj);
    {
        let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
        g.remove(w);
    }
    lc.free(w);
    (ptr::null_mut(), WaitOutcome::TimedOut)
}

pub(crate) fn notify_by(sh: &Shared, lc: &mut Local, obj: &SyncObject, all: bool) {
    let addr = obj.addr();
    loop {
        let claimed = {
            let g = sh.table.lock(addr, &mut lc.stats.bucket_locks);
            let found = g
                .group(addr)
                .find(|&p| r(p).cas_state(RecordState::WaitSet, RecordState::EntryWait));
            if let Some(p) = found {
                g.remove(p);
            }
            found
        };
        match claimed {
            Some(p) => enqueue_for(sh, p, obj),
            None => return,
        }
        if !all {
            return;
        }
    }
}

/// The neutral header, read through the displaced copy when the object is
/// locked.
pub(crate) fn read_header(lc: &Local, obj: &SyncObject) -> u64 {
    if let Some(rec) = lc.held_record(obj.addr()).filter(|p| !p.is_null()) {
        return r(rec).displaced();
    }
    let addr = obj.addr();
    let w = obj.header().word();
    loop {
        let h = w.load(Ordering::Acquire);
        if is_neutral(h) {
            return h;
        }
        let tail = displaced_tail(h).expect("reserved header tag");
        if let Some(d) = r(tail).read_displaced_for(addr) {
            // The copy is only meaningful if the tail was still current.
            if w.load(Ordering::Acquire) == h {
                return d;
            }
        }
        hint::spin_loop();
    }
}

pub(crate) fn identity_hash(lc: &Local, obj: &SyncObject) -> u32 {
    loop {
        let h = read_header(lc, obj);
        let ihash = ihash_of(h);
        if ihash != 0 {
            return ihash;
        }
        if let Ok(ihash) = obj.assign_identity_hash() {
            return ihash;
        }
    }
}
