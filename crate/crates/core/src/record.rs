//! Lock records and their thread-local free lists.
//!
//! Records are type-stable: once allocated by a pool they are only ever
//! recycled, never returned to the allocator until the pool itself is
//! dropped. Threads that read a record they do not own (handoff, header
//! chasing) may therefore observe a recycled record but never freed memory.

use std::ptr;
use std::sync::Mutex;
use std::sync::atomic::{
    AtomicBool, AtomicPtr, AtomicU32, AtomicU64, AtomicUsize, Ordering, fence,
};

use crate::park::ParkHandle;

/// Lifecycle state of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum RecordState {
    Free = 0,
    Owner = 1,
    EntryWait = 2,
    WaitSet = 3,
    Granted = 4,
    /// A waiter in the wait set claimed its own record after a timeout.
    TimedOut = 5,
}

impl RecordState {
    fn from_u32(v: u32) -> Self {
        match v {
            0 => Self::Free,
            1 => Self::Owner,
            2 => Self::EntryWait,
            3 => Self::WaitSet,
            4 => Self::Granted,
            5 => Self::TimedOut,
            _ => unreachable!("bad record state {v}"),
        }
    }

    /// Owner or about to become one.
    pub fn is_owner(self) -> bool {
        matches!(self, Self::Owner | Self::Granted)
    }
}

/// A per-acquisition node, one cache-line pair in size.
#[repr(C, align(128))]
#[derive(Debug)]
pub struct LockRecord {
    state: AtomicU32,
    pub(crate) authoritative: AtomicBool,
    pub(crate) outer_granted: AtomicBool,
    /// Set by a releasing head that parks until its successor links in.
    pub(crate) link_waiter: AtomicBool,
    pub(crate) owner: AtomicU64,
    pub(crate) object: AtomicUsize,
    /// Next spine element in a bucket chain (valid on spine heads only).
    pub(crate) spine_next: AtomicPtr<LockRecord>,
    /// Next record of the same object in a bucket chain or wait list.
    pub(crate) rib_next: AtomicPtr<LockRecord>,
    /// MCS successor link.
    pub(crate) next: AtomicPtr<LockRecord>,
    pub(crate) displaced: AtomicU64,
    /// Seqlock guarding `object` and `displaced` for foreign readers.
    seq: AtomicU64,
    /// Head of the CJM wait list while this record holds the monitor.
    pub(crate) wait_head: AtomicPtr<LockRecord>,
    pub(crate) park: AtomicPtr<ParkHandle>,
    /// Enqueue time in nanoseconds since the pool epoch.
    pub(crate) enqueued_at: AtomicU64,
}

const _: () = assert!(size_of::<LockRecord>() == 128);

impl LockRecord {
    fn new() -> Self {
        Self {
            state: AtomicU32::new(RecordState::Free as u32),
            authoritative: AtomicBool::new(false),
            outer_granted: AtomicBool::new(false),
            link_waiter: AtomicBool::new(false),
            owner: AtomicU64::new(0),
            object: AtomicUsize::new(0),
            spine_next: AtomicPtr::new(ptr::null_mut()),
            rib_next: AtomicPtr::new(ptr::null_mut()),
            next: AtomicPtr::new(ptr::null_mut()),
            displaced: AtomicU64::new(0),
            seq: AtomicU64::new(0),
            wait_head: AtomicPtr::new(ptr::null_mut()),
            park: AtomicPtr::new(ptr::null_mut()),
            enqueued_at: AtomicU64::new(0),
        }
    }

    #[inline]
    pub fn state(&self) -> RecordState {
        RecordState::from_u32(self.state.load(Ordering::Acquire))
    }

    #[inline]
    pub(crate) fn set_state(&self, s: RecordState) {
        self.state.store(s as u32, Ordering::Release);
    }

    #[inline]
    pub(crate) fn state_word(&self) -> &AtomicU32 {
        &self.state
    }

    pub(crate) fn cas_state(&self, from: RecordState, to: RecordState) -> bool {
        self.state
            .compare_exchange(from as u32, to as u32, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    #[inline]
    pub fn object(&self) -> usize {
        self.object.load(Ordering::Relaxed)
    }

    #[inline]
    pub fn owner(&self) -> u64 {
        self.owner.load(Ordering::Relaxed)
    }

    pub fn displaced(&self) -> u64 {
        self.displaced.load(Ordering::Acquire)
    }

    pub fn is_authoritative(&self) -> bool {
        self.authoritative.load(Ordering::Acquire)
    }

    /// Sets the record to `Granted` and returns the handle to wake its
    /// thread with. The handle is read first: once granted the record may be
    /// recycled by its owner.
    pub(crate) fn grant(&self) -> Waker {
        let park = self.park.load(Ordering::Acquire);
        self.set_state(RecordState::Granted);
        Waker(park)
    }

    /// The record's park handle, for waking it after a state change made by
    /// the caller.
    pub(crate) fn waker(&self) -> Waker {
        Waker(self.park.load(Ordering::Acquire))
    }

    fn begin_write(&self) -> u64 {
        let s = self.seq.load(Ordering::Relaxed);
        debug_assert!(s.is_multiple_of(2));
        self.seq.store(s + 1, Ordering::Relaxed);
        fence(Ordering::Release);
        s
    }

    fn end_write(&self, s: u64) {
        self.seq.store(s + 2, Ordering::Release);
    }

    /// Publishes a new `(object, displaced)` pair under the seqlock.
    pub(crate) fn publish(&self, object: usize, displaced: u64) {
        let s = self.begin_write();
        self.object.store(object, Ordering::Relaxed);
        self.displaced.store(displaced, Ordering::Relaxed);
        self.end_write(s);
    }

    /// Reads the displaced header if this record currently serves `object`.
    /// Returns `None` if the record is being rewritten, serves something else
    /// or has not published a header yet (a CJM displaced header always
    /// carries a nonzero identity hash, so zero means unpublished).
    pub(crate) fn read_displaced_for(&self, object: usize) -> Option<u64> {
        let s1 = self.seq.load(Ordering::Acquire);
        if !s1.is_multiple_of(2) {
            return None;
        }
        let o = self.object.load(Ordering::Relaxed);
        let d = self.displaced.load(Ordering::Relaxed);
        fence(Ordering::Acquire);
        let s2 = self.seq.load(Ordering::Relaxed);
        (s1 == s2 && o == object && d != 0).then_some(d)
    }

    /// Resets the record for a fresh acquisition.
    fn reset(&self, owner: u64, object: usize, park: *const ParkHandle) {
        self.publish(object, 0);
        self.owner.store(owner, Ordering::Relaxed);
        self.spine_next.store(ptr::null_mut(), Ordering::Relaxed);
        self.rib_next.store(ptr::null_mut(), Ordering::Relaxed);
        self.next.store(ptr::null_mut(), Ordering::Relaxed);
        self.wait_head.store(ptr::null_mut(), Ordering::Relaxed);
        self.authoritative.store(false, Ordering::Relaxed);
        self.outer_granted.store(false, Ordering::Relaxed);
        self.link_waiter.store(false, Ordering::Relaxed);
        self.enqueued_at.store(0, Ordering::Relaxed);
        self.park.store(park as *mut ParkHandle, Ordering::Relaxed);
        self.state
            .store(RecordState::EntryWait as u32, Ordering::Release);
    }

    fn retire(&self) {
        self.publish(0, 0);
        self.state
            .store(RecordState::Free as u32, Ordering::Release);
    }
}

/// Deferred unpark of a record's thread.
#[must_use]
pub(crate) struct Waker(*const ParkHandle);

impl Waker {
    pub(crate) fn wake(self) {
        // Park handles belong to the pool and outlive every record.
        unsafe { (*self.0).unpark() }
    }
}

/// Pool-wide record storage.
#[derive(Debug, Default)]
pub(crate) struct RecordArena {
    all: Mutex<Vec<usize>>,
    spare: Mutex<Vec<usize>>,
    allocated: AtomicUsize,
}

impl RecordArena {
    fn obtain(&self) -> *mut LockRecord {
        if let Some(rec) = self.spare.lock().unwrap().pop() {
            return rec as *mut LockRecord;
        }
        let rec = Box::into_raw(Box::new(LockRecord::new()));
        self.all.lock().unwrap().push(rec as usize);
        self.allocated.fetch_add(1, Ordering::Relaxed);
        rec
    }

    pub(crate) fn give_back(&self, recs: impl IntoIterator<Item = *mut LockRecord>) {
        self.spare
            .lock()
            .unwrap()
            .extend(recs.into_iter().map(|r| r as usize));
    }

    /// Records ever allocated by this pool; records are never freed, so this
    /// is the allocation high-water mark.
    pub(crate) fn allocated(&self) -> usize {
        self.allocated.load(Ordering::Relaxed)
    }

    pub(crate) fn spare(&self) -> usize {
        self.spare.lock().unwrap().len()
    }

    pub(crate) fn for_each(&self, mut f: impl FnMut(&LockRecord)) {
        for &rec in self.all.lock().unwrap().iter() {
            f(unsafe { &*(rec as *const LockRecord) });
        }
    }
}

impl Drop for RecordArena {
    fn drop(&mut self) {
        for &rec in self.all.get_mut().unwrap().iter() {
            drop(unsafe { Box::from_raw(rec as *mut LockRecord) });
        }
    }
}

/// A thread's stack of free records.
#[derive(Debug, Default)]
pub(crate) struct RecordCache {
    free: Vec<*mut LockRecord>,
    outstanding: usize,
}

impl RecordCache {
    pub(crate) fn alloc(
        &mut self,
        arena: &RecordArena,
        owner: u64,
        object: usize,
        park: *const ParkHandle,
    ) -> *mut LockRecord {
        let rec = self.free.pop().unwrap_or_else(|| arena.obtain());
        unsafe { (*rec).reset(owner, object, park) };
        self.outstanding += 1;
        rec
    }

    pub(crate) fn free(&mut self, rec: *mut LockRecord) {
        unsafe { (*rec).retire() };
        self.outstanding -= 1;
        self.free.push(rec);
    }

    pub(crate) fn outstanding(&self) -> usize {
        self.outstanding
    }

    pub(crate) fn free_len(&self) -> usize {
        self.free.len()
    }

    pub(crate) fn drain(&mut self) -> impl Iterator<Item = *mut LockRecord> + '_ {
        self.free.drain(..)
    }
}
