//! Hashed synchronization buckets.
//!
//! Each bucket owns a small internal lock and a spine-and-rib chain of lock
//! records: one spine element per object represented in the bucket, with the
//! remaining records of that object hanging off it as ribs in arrival order.
//! With the fast path enabled a bucket can also hold a single record
//! installed by CAS, without the internal lock.

use std::hint;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicUsize, Ordering};

use crossbeam_utils::CachePadded;
use parking_lot::lock_api::RawMutex as _;

use crate::header::bucket_index;
use crate::park::{SpinPolicy, note_spins};
use crate::record::{LockRecord, RecordState};

/// Which lock protects each bucket chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnerLockKind {
    /// Test-and-set with bounded spinning, then futex parking.
    #[default]
    Tas,
    /// `parking_lot`'s word lock.
    ParkingLot,
}

/// Minimal test-and-set lock: 0 free, 1 held, 2 held with sleepers.
#[derive(Debug, Default)]
pub struct TasLock {
    state: AtomicU32,
}

impl TasLock {
    pub fn lock(&self, policy: SpinPolicy) {
        if self
            .state
            .compare_exchange(0, 1, Ordering::Acquire, Ordering::Relaxed)
            .is_ok()
        {
            return;
        }
        let mut spins = 0;
        while spins < policy.max_spins {
            if self.state.load(Ordering::Relaxed) == 0
                && self
                    .state
                    .compare_exchange(0, 1, Ordering::Acquire, Ordering::Relaxed)
                    .is_ok()
            {
                note_spins(spins);
                return;
            }
            hint::spin_loop();
            spins += 1;
        }
        note_spins(spins);
        while self.state.swap(2, Ordering::Acquire) != 0 {
            atomic_wait::wait(&self.state, 2);
        }
    }

    pub fn unlock(&self) {
        if self.state.swap(0, Ordering::Release) == 2 {
            atomic_wait::wake_one(&self.state);
        }
    }
}

enum InnerLock {
    Tas(TasLock),
    ParkingLot(parking_lot::RawMutex),
}

impl InnerLock {
    fn new(kind: InnerLockKind) -> Self {
        match kind {
            InnerLockKind::Tas => Self::Tas(TasLock::default()),
            InnerLockKind::ParkingLot => Self::ParkingLot(parking_lot::RawMutex::INIT),
        }
    }

    #[inline]
    fn lock(&self, policy: SpinPolicy) {
        match self {
            Self::Tas(l) => l.lock(policy),
            Self::ParkingLot(l) => l.lock(),
        }
    }

    #[inline]
    fn unlock(&self) {
        match self {
            Self::Tas(l) => l.unlock(),
            // Only called by the guard that locked it.
            Self::ParkingLot(l) => unsafe { l.unlock() },
        }
    }
}

const FAST_EMPTY: usize = 0;
const FAST_SINGLETON: usize = 1;
const FAST_DEVOLVED: usize = 2;

struct BucketInner {
    lock: InnerLock,
    /// Fast-path word: empty, a tagged singleton record, or devolved.
    fast: AtomicUsize,
    chain: AtomicPtr<LockRecord>,
}

pub(crate) struct Bucket(CachePadded<BucketInner>);

/// Fixed-size power-of-two table of buckets.
pub(crate) struct BucketTable {
    buckets: Box<[Bucket]>,
    salt: u64,
    fast_path: bool,
    policy: SpinPolicy,
}

impl BucketTable {
    pub(crate) fn new(
        nbuckets: usize,
        salt: u64,
        kind: InnerLockKind,
        fast_path: bool,
        policy: SpinPolicy,
    ) -> Self {
        assert!(
            nbuckets.is_power_of_two(),
            "bucket count must be a power of two"
        );
        let buckets = (0..nbuckets)
            .map(|_| {
                Bucket(CachePadded::new(BucketInner {
                    lock: InnerLock::new(kind),
                    fast: AtomicUsize::new(FAST_EMPTY),
                    chain: AtomicPtr::new(ptr::null_mut()),
                }))
            })
            .collect();
        Self {
            buckets,
            salt,
            fast_path,
            policy,
        }
    }

    #[inline]
    pub(crate) fn fast_path(&self) -> bool {
        self.fast_path
    }

    #[inline]
    pub(crate) fn bucket(&self, addr: usize) -> &Bucket {
        &self.buckets[bucket_index(addr, self.buckets.len(), self.salt)]
    }

    /// Locks the bucket for `addr`, bumping `counter`.
    pub(crate) fn lock(&self, addr: usize, counter: &mut u64) -> ChainGuard<'_> {
        *counter += 1;
        let b = self.bucket(addr);
        b.0.lock.lock(self.policy);
        let guard = ChainGuard {
            bucket: b,
            fast_path: self.fast_path,
        };
        if self.fast_path {
            guard.devolve();
        }
        guard
    }

    /// Installs `rec` as the bucket's only record if the bucket is empty.
    pub(crate) fn try_fast_insert(&self, addr: usize, rec: *mut LockRecord) -> bool {
        debug_assert!(self.fast_path);
        self.bucket(addr)
            .0
            .fast
            .compare_exchange(
                FAST_EMPTY,
                rec as usize | FAST_SINGLETON,
                Ordering::AcqRel,
                Ordering::Relaxed,
            )
            .is_ok()
    }

    /// Removes `rec` if it is still the installed singleton.
    pub(crate) fn try_fast_remove(&self, addr: usize, rec: *mut LockRecord) -> bool {
        debug_assert!(self.fast_path);
        self.bucket(addr)
            .0
            .fast
            .compare_exchange(
                rec as usize | FAST_SINGLETON,
                FAST_EMPTY,
                Ordering::AcqRel,
                Ordering::Relaxed,
            )
            .is_ok()
    }
}

/// Exclusive access to one bucket's chain.
pub(crate) struct ChainGuard<'a> {
    bucket: &'a Bucket,
    fast_path: bool,
}

impl Drop for ChainGuard<'_> {
    fn drop(&mut self) {
        if self.fast_path && self.is_empty() {
            self.bucket.0.fast.store(FAST_EMPTY, Ordering::Release);
        }
        self.bucket.0.lock.unlock();
    }
}

#[inline]
fn r<'a>(p: *mut LockRecord) -> &'a LockRecord {
    debug_assert!(!p.is_null());
    unsafe { &*p }
}

impl ChainGuard<'_> {
    /// Moves a fast-path singleton onto the chain and marks the bucket as
    /// lock-protected until the chain empties again.
    fn devolve(&self) {
        let fast = &self.bucket.0.fast;
        loop {
            let w = fast.load(Ordering::Acquire);
            match w {
                FAST_DEVOLVED => return,
                FAST_EMPTY => {
                    if fast
                        .compare_exchange(
                            FAST_EMPTY,
                            FAST_DEVOLVED,
                            Ordering::AcqRel,
                            Ordering::Relaxed,
                        )
                        .is_ok()
                    {
                        return;
                    }
                }
                tagged => {
                    if fast
                        .compare_exchange(
                            tagged,
                            FAST_DEVOLVED,
                            Ordering::AcqRel,
                            Ordering::Relaxed,
                        )
                        .is_ok()
                    {
                        self.append((tagged & !FAST_SINGLETON) as *mut LockRecord);
                        return;
                    }
                }
            }
        }
    }

    fn head(&self) -> *mut LockRecord {
        self.bucket.0.chain.load(Ordering::Relaxed)
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.head().is_null()
    }

    /// Returns `(previous spine, spine head)` for `obj`.
    fn find_spine(&self, obj: usize) -> Option<(*mut LockRecord, *mut LockRecord)> {
        let mut prev = ptr::null_mut();
        let mut cur = self.head();
        while !cur.is_null() {
            if r(cur).object() == obj {
                return Some((prev, cur));
            }
            prev = cur;
            cur = r(cur).spine_next.load(Ordering::Relaxed);
        }
        None
    }

    fn link_spine(&self, prev: *mut LockRecord, to: *mut LockRecord) {
        if prev.is_null() {
            self.bucket.0.chain.store(to, Ordering::Relaxed);
        } else {
            r(prev).spine_next.store(to, Ordering::Relaxed);
        }
    }

    /// Records of `obj` in chain order.
    pub(crate) fn group(&self, obj: usize) -> GroupIter<'_> {
        GroupIter {
            cur: self
                .find_spine(obj)
                .map_or(ptr::null_mut(), |(_, head)| head),
            _guard: std::marker::PhantomData,
        }
    }

    /// Appends `rec` at the tail of its object's group.
    pub(crate) fn append(&self, rec: *mut LockRecord) {
        let rr = r(rec);
        rr.rib_next.store(ptr::null_mut(), Ordering::Relaxed);
        match self.find_spine(rr.object()) {
            Some((_, head)) => {
                let mut tail = head;
                loop {
                    let next = r(tail).rib_next.load(Ordering::Relaxed);
                    if next.is_null() {
                        break;
                    }
                    tail = next;
                }
                r(tail).rib_next.store(rec, Ordering::Relaxed);
            }
            None => {
                rr.spine_next.store(self.head(), Ordering::Relaxed);
                self.bucket.0.chain.store(rec, Ordering::Relaxed);
            }
        }
    }

    /// Unlinks `rec` from its group. Returns whether it was present.
    pub(crate) fn remove(&self, rec: *mut LockRecord) -> bool {
        let Some((prev_spine, head)) = self.find_spine(r(rec).object()) else {
            return false;
        };
        if head == rec {
            let next = r(rec).rib_next.load(Ordering::Relaxed);
            let spine_next = r(rec).spine_next.load(Ordering::Relaxed);
            if next.is_null() {
                self.link_spine(prev_spine, spine_next);
            } else {
                r(next).spine_next.store(spine_next, Ordering::Relaxed);
                self.link_spine(prev_spine, next);
            }
            r(rec).rib_next.store(ptr::null_mut(), Ordering::Relaxed);
            return true;
        }
        let mut prev = head;
        loop {
            let cur = r(prev).rib_next.load(Ordering::Relaxed);
            if cur.is_null() {
                return false;
            }
            if cur == rec {
                r(prev)
                    .rib_next
                    .store(r(cur).rib_next.load(Ordering::Relaxed), Ordering::Relaxed);
                r(cur).rib_next.store(ptr::null_mut(), Ordering::Relaxed);
                return true;
            }
            prev = cur;
        }
    }

    pub(crate) fn move_to_tail(&self, rec: *mut LockRecord) {
        let present = self.remove(rec);
        debug_assert!(present);
        self.append(rec);
    }

    /// First record of `obj` in `state`, in chain order.
    pub(crate) fn first_in(&self, obj: usize, state: RecordState) -> Option<*mut LockRecord> {
        self.group(obj).find(|&p| r(p).state() == state)
    }

    /// Whether some record of `obj` owns or has been granted the monitor.
    pub(crate) fn has_owner(&self, obj: usize) -> bool {
        self.group(obj).any(|p| r(p).state().is_owner())
    }

    /// Detaches the whole group of `obj`, returning its head.
    pub(crate) fn take_group(&self, obj: usize) -> Option<*mut LockRecord> {
        let (prev, head) = self.find_spine(obj)?;
        self.link_spine(prev, r(head).spine_next.load(Ordering::Relaxed));
        r(head).spine_next.store(ptr::null_mut(), Ordering::Relaxed);
        Some(head)
    }

    /// Attaches an already rib-linked list as the group of its object.
    pub(crate) fn put_group(&self, head: *mut LockRecord) {
        debug_assert!(self.find_spine(r(head).object()).is_none());
        r(head).spine_next.store(self.head(), Ordering::Relaxed);
        self.bucket.0.chain.store(head, Ordering::Relaxed);
    }

    /// Total number of records on the chain.
    pub(crate) fn len(&self) -> usize {
        let mut n = 0;
        let mut spine = self.head();
        while !spine.is_null() {
            let mut rib = spine;
            while !rib.is_null() {
                n += 1;
                rib = r(rib).rib_next.load(Ordering::Relaxed);
            }
            spine = r(spine).spine_next.load(Ordering::Relaxed);
        }
        n
    }
}

pub(crate) struct GroupIter<'a> {
    cur: *mut LockRecord,
    _guard: std::marker::PhantomData<&'a ()>,
}

impl Iterator for GroupIter<'_> {
    type Item = *mut LockRecord;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cur.is_null() {
            return None;
        }
        let cur = self.cur;
        self.cur = r(cur).rib_next.load(Ordering::Relaxed);
        Some(cur)
    }
}
