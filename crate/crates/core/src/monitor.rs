//! The monitor facade: one interface over every algorithm.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bucket::{BucketTable, InnerLockKind};
use crate::header::{SyncObject, process_salt};
use crate::park::{ParkHandle, SpinPolicy};
use crate::record::{LockRecord, RecordArena, RecordCache, RecordState};
use crate::{cjm, hashchains, hashchains3};

/// The monitor algorithm backing a pool of objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MonitorAlgo {
    HashChains,
    HashChainsFast,
    HashChains3,
    CjmFifo,
    CjmBy,
    NativeBaseline,
}

impl MonitorAlgo {
    pub const ALL: [MonitorAlgo; 6] = [
        MonitorAlgo::HashChains,
        MonitorAlgo::HashChainsFast,
        MonitorAlgo::HashChains3,
        MonitorAlgo::CjmFifo,
        MonitorAlgo::CjmBy,
        MonitorAlgo::NativeBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MonitorAlgo::HashChains => "HashChains",
            MonitorAlgo::HashChainsFast => "HashChainsFast",
            MonitorAlgo::HashChains3 => "HashChains3",
            MonitorAlgo::CjmFifo => "CJM-FIFO",
            MonitorAlgo::CjmBy => "CJM-By",
            MonitorAlgo::NativeBaseline => "pthreads",
        }
    }

    /// Whether grants follow strict queue order.
    pub fn is_fifo(self) -> bool {
        !matches!(self, MonitorAlgo::CjmBy | MonitorAlgo::NativeBaseline)
    }
}

impl fmt::Display for MonitorAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown monitor algorithm {0:?}")]
pub struct UnknownAlgo(pub String);

impl FromStr for MonitorAlgo {
    type Err = UnknownAlgo;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "hashchains" | "hashchain" | "hc" => MonitorAlgo::HashChains,
            "hashchainsfast" | "hcfast" => MonitorAlgo::HashChainsFast,
            "hashchains3" | "hashchain3" | "hc3" => MonitorAlgo::HashChains3,
            "cjmfifo" | "cjm" => MonitorAlgo::CjmFifo,
            "cjmby" => MonitorAlgo::CjmBy,
            "nativebaseline" | "native" | "pthreads" | "pthread" => MonitorAlgo::NativeBaseline,
            _ => return Err(UnknownAlgo(s.to_owned())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("current thread does not own the monitor")]
    IllegalMonitorState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitOutcome {
    Notified,
    TimedOut,
}

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub algo: MonitorAlgo,
    /// Bucket count for the hashed variants (and the CJM wait-set side
    /// table). Must be a power of two.
    pub buckets: usize,
    pub inner_lock: InnerLockKind,
    pub spin: SpinPolicy,
    /// CJM-By: how long the queue head tolerates bypass.
    pub patience: Duration,
    /// CJM-By: test-and-set attempts an arriving thread makes before queueing.
    pub barge_attempts: u32,
    /// Bucket hash salt; a per-process random value when `None`.
    pub salt: Option<u64>,
}

pub const DEFAULT_BUCKETS: usize = 4096;
pub const DEFAULT_PATIENCE: Duration = Duration::from_millis(1);

impl MonitorConfig {
    pub fn new(algo: MonitorAlgo) -> Self {
        Self {
            algo,
            buckets: DEFAULT_BUCKETS,
            inner_lock: InnerLockKind::default(),
            spin: SpinPolicy::from_env(),
            patience: DEFAULT_PATIENCE,
            barge_attempts: 1,
            salt: None,
        }
    }

    pub fn buckets(mut self, n: usize) -> Self {
        self.buckets = n;
        self
    }

    pub fn inner_lock(mut self, kind: InnerLockKind) -> Self {
        self.inner_lock = kind;
        self
    }

    pub fn spin(mut self, policy: SpinPolicy) -> Self {
        self.spin = policy;
        self
    }

    pub fn patience(mut self, patience: Duration) -> Self {
        self.patience = patience;
        self
    }

    pub fn barge_attempts(mut self, n: u32) -> Self {
        self.barge_attempts = n;
        self
    }

    pub fn salt(mut self, salt: u64) -> Self {
        self.salt = Some(salt);
        self
    }
}

pub(crate) struct Shared {
    pub(crate) config: MonitorConfig,
    pub(crate) table: BucketTable,
    pub(crate) arena: RecordArena,
    /// Number of CJM-FIFO wait sets parked in the side table.
    pub(crate) side_count: AtomicUsize,
    epoch: Instant,
    parks: Mutex<ParkPool>,
    next_id: AtomicU64,
}

#[derive(Default)]
struct ParkPool {
    #[allow(clippy::vec_box)] // handed out by address
    all: Vec<Box<ParkHandle>>,
    spare: Vec<*const ParkHandle>,
}

// The raw pointers in `spare` point into boxes owned by `all`.
unsafe impl Send for ParkPool {}

impl Shared {
    /// Nanoseconds since the pool was created.
    pub(crate) fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    pub(crate) fn epoch(&self) -> Instant {
        self.epoch
    }
}

/// A pool of monitors sharing one algorithm and configuration.
#[derive(Clone)]
pub struct Monitors {
    shared: Arc<Shared>,
}

/// Allocation counters for lock records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordStats {
    /// Records ever allocated; records are only recycled, so this is the
    /// high-water mark.
    pub allocated: usize,
    /// Records returned to the pool by threads that have finished.
    pub spare: usize,
}

/// Records of one object on its bucket chain, with the header, captured
/// under the bucket lock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainSnapshot {
    pub header: u64,
    pub records: Vec<(RecordState, u64)>,
    pub chain_len: usize,
}

impl ChainSnapshot {
    pub fn count(&self, state: RecordState) -> usize {
        self.records.iter().filter(|(s, _)| *s == state).count()
    }
}

impl Monitors {
    pub fn new(config: MonitorConfig) -> Self {
        let table = BucketTable::new(
            config.buckets,
            config.salt.unwrap_or_else(process_salt),
            config.inner_lock,
            config.algo == MonitorAlgo::HashChainsFast,
            config.spin,
        );
        Self {
            shared: Arc::new(Shared {
                config,
                table,
                arena: RecordArena::default(),
                side_count: AtomicUsize::new(0),
                epoch: Instant::now(),
                parks: Mutex::default(),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn with_algo(algo: MonitorAlgo) -> Self {
        Self::new(MonitorConfig::new(algo))
    }

    pub fn algo(&self) -> MonitorAlgo {
        self.shared.config.algo
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.shared.config
    }

    /// Creates the calling thread's context. Contexts are not `Send`.
    pub fn context(&self) -> ThreadContext {
        let park = {
            let mut pool = self.shared.parks.lock().unwrap();
            match pool.spare.pop() {
                Some(p) => p,
                None => {
                    let h = Box::new(ParkHandle::new());
                    let p = &*h as *const ParkHandle;
                    pool.all.push(h);
                    p
                }
            }
        };
        ThreadContext {
            local: Local {
                id: self.shared.next_id.fetch_add(1, Ordering::Relaxed),
                park,
                records: RecordCache::default(),
                held: Vec::new(),
                stats: ThreadStats::default(),
            },
            shared: self.shared.clone(),
        }
    }

    pub fn record_stats(&self) -> RecordStats {
        RecordStats {
            allocated: self.shared.arena.allocated(),
            spare: self.shared.arena.spare(),
        }
    }

    /// Snapshot of `obj`'s bucket chain and header, taken under the bucket
    /// lock.
    pub fn chain_snapshot(&self, obj: &SyncObject) -> ChainSnapshot {
        let addr = obj.addr();
        let mut ignored = 0;
        let guard = self.shared.table.lock(addr, &mut ignored);
        let records = guard
            .group(addr)
            .map(|p| {
                let rec = unsafe { &*p };
                (rec.state(), rec.owner())
            })
            .collect();
        ChainSnapshot {
            header: obj.header().load(),
            records,
            chain_len: guard.len(),
        }
    }

    /// Number of records currently flagged as holding `obj`'s authoritative
    /// displaced header (CJM).
    pub fn authoritative_records(&self, obj: &SyncObject) -> usize {
        let mut n = 0;
        self.shared.arena.for_each(|rec| {
            if rec.is_authoritative() && rec.object() == obj.addr() {
                n += 1;
            }
        });
        n
    }
}

impl fmt::Debug for Monitors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Monitors")
            .field("config", &self.shared.config)
            .finish()
    }
}

/// Per-thread operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ThreadStats {
    /// Bucket inner-lock acquisitions.
    pub bucket_locks: u64,
    /// Successful header (or outer indicator) CAS fast paths.
    pub header_cas: u64,
    /// Successful bucket singleton CAS fast paths.
    pub fast_cas: u64,
    /// Acquisitions that had to wait for a grant.
    pub contended: u64,
    /// Direct handoffs performed at release.
    pub handoffs: u64,
}

pub(crate) struct Held {
    obj: usize,
    rec: *mut LockRecord,
    depth: u32,
}

pub(crate) struct Local {
    pub(crate) id: u64,
    park: *const ParkHandle,
    pub(crate) records: RecordCache,
    held: Vec<Held>,
    pub(crate) stats: ThreadStats,
}

impl Local {
    #[inline]
    pub(crate) fn park(&self) -> &ParkHandle {
        unsafe { &*self.park }
    }

    #[inline]
    pub(crate) fn alloc(&mut self, shared: &Shared, obj: usize) -> *mut LockRecord {
        self.records.alloc(&shared.arena, self.id, obj, self.park)
    }

    #[inline]
    pub(crate) fn free(&mut self, rec: *mut LockRecord) {
        self.records.free(rec);
    }

    #[inline]
    fn held_index(&self, obj: usize) -> Option<usize> {
        self.held.iter().rposition(|h| h.obj == obj)
    }

    pub(crate) fn held_record(&self, obj: usize) -> Option<*mut LockRecord> {
        self.held_index(obj).map(|i| self.held[i].rec)
    }
}

/// A thread's handle on a [`Monitors`] pool.
///
/// Holds the thread's free list of lock records, the list of monitors it
/// currently owns and its parking handle.
pub struct ThreadContext {
    shared: Arc<Shared>,
    local: Local,
}

impl ThreadContext {
    pub fn id(&self) -> u64 {
        self.local.id
    }

    pub fn algo(&self) -> MonitorAlgo {
        self.shared.config.algo
    }

    pub fn enter(&mut self, obj: &SyncObject) {
        let addr = obj.addr();
        if let Some(i) = self.local.held_index(addr) {
            self.local.held[i].depth += 1;
            return;
        }
        let (sh, lc) = (&*self.shared, &mut self.local);
        let rec = match sh.config.algo {
            MonitorAlgo::HashChains | MonitorAlgo::HashChainsFast => {
                hashchains::acquire(sh, lc, obj)
            }
            MonitorAlgo::HashChains3 => hashchains3::acquire(sh, lc, obj),
            MonitorAlgo::CjmFifo => cjm::acquire_fifo(sh, lc, obj),
            MonitorAlgo::CjmBy => cjm::acquire_by(sh, lc, obj),
            MonitorAlgo::NativeBaseline => {
                obj.native.lock();
                std::ptr::null_mut()
            }
        };
        self.local.held.push(Held {
            obj: addr,
            rec,
            depth: 1,
        });
    }

    pub fn exit(&mut self, obj: &SyncObject) -> Result<(), MonitorError> {
        let i = self
            .local
            .held_index(obj.addr())
            .ok_or(MonitorError::IllegalMonitorState)?;
        let held = &mut self.local.held[i];
        if held.depth > 1 {
            held.depth -= 1;
            return Ok(());
        }
        let rec = self.local.held.remove(i).rec;
        let (sh, lc) = (&*self.shared, &mut self.local);
        match sh.config.algo {
            MonitorAlgo::HashChains | MonitorAlgo::HashChainsFast => {
                hashchains::release(sh, lc, obj, rec)
            }
            MonitorAlgo::HashChains3 => hashchains3::release(sh, lc, obj),
            MonitorAlgo::CjmFifo => cjm::release_fifo(sh, lc, obj, rec),
            MonitorAlgo::CjmBy => cjm::release_by(obj),
            MonitorAlgo::NativeBaseline => obj.native.unlock(),
        }
        Ok(())
    }

    /// Releases the monitor fully, waits for a notification (or the
    /// timeout) and re-acquires it at the previous nesting depth.
    pub fn wait(
        &mut self,
        obj: &SyncObject,
        timeout: Option<Duration>,
    ) -> Result<WaitOutcome, MonitorError> {
        let i = self
            .local
            .held_index(obj.addr())
            .ok_or(MonitorError::IllegalMonitorState)?;
        let Held { rec, depth, .. } = self.local.held.remove(i);
        let deadline = timeout.map(|t| Instant::now() + t);
        let (sh, lc) = (&*self.shared, &mut self.local);
        let (rec, outcome) = match sh.config.algo {
            MonitorAlgo::HashChains | MonitorAlgo::HashChainsFast => {
                hashchains::wait(sh, lc, obj, rec, deadline)
            }
            MonitorAlgo::HashChains3 => hashchains3::wait(sh, lc, obj, deadline),
            MonitorAlgo::CjmFifo => cjm::wait_fifo(sh, lc, obj, rec, deadline),
            MonitorAlgo::CjmBy => cjm::wait_by(sh, lc, obj, deadline),
            MonitorAlgo::NativeBaseline => {
                let notified = obj.native.wait(deadline);
                (
                    rec,
                    if notified {
                        WaitOutcome::Notified
                    } else {
                        WaitOutcome::TimedOut
                    },
                )
            }
        };
        self.local.held.push(Held {
            obj: obj.addr(),
            rec,
            depth,
        });
        Ok(outcome)
    }

    pub fn notify(&mut self, obj: &SyncObject) -> Result<(), MonitorError> {
        self.notify_impl(obj, false)
    }

    pub fn notify_all(&mut self, obj: &SyncObject) -> Result<(), MonitorError> {
        self.notify_impl(obj, true)
    }

    fn notify_impl(&mut self, obj: &SyncObject, all: bool) -> Result<(), MonitorError> {
        let rec = self
            .local
            .held_record(obj.addr())
            .ok_or(MonitorError::IllegalMonitorState)?;
        let (sh, lc) = (&*self.shared, &mut self.local);
        match sh.config.algo {
            MonitorAlgo::HashChains | MonitorAlgo::HashChainsFast => {
                hashchains::notify(sh, lc, obj, all)
            }
            MonitorAlgo::HashChains3 => hashchains3::notify(sh, lc, obj, all),
            MonitorAlgo::CjmFifo => cjm::notify_fifo(sh, lc, obj, rec, all),
            MonitorAlgo::CjmBy => cjm::notify_by(sh, lc, obj, all),
            MonitorAlgo::NativeBaseline => obj.native.notify(all),
        }
        Ok(())
    }

    pub fn holds(&self, obj: &SyncObject) -> bool {
        self.local.held_index(obj.addr()).is_some()
    }

    /// Current nesting depth on `obj` (0 when not held).
    pub fn hold_depth(&self, obj: &SyncObject) -> u32 {
        self.local
            .held_index(obj.addr())
            .map_or(0, |i| self.local.held[i].depth)
    }

    /// Owner ids of the threads queued for `obj`, in the order they will be
    /// granted the monitor. Only the owner may ask, and only the FIFO
    /// variants keep such an order; `None` otherwise. Threads still between
    /// announcing themselves and linking in may be missing.
    pub fn entry_queue(&self, obj: &SyncObject) -> Option<Vec<u64>> {
        let rec = self.local.held_record(obj.addr())?;
        let addr = obj.addr();
        match self.shared.config.algo {
            MonitorAlgo::HashChains | MonitorAlgo::HashChainsFast | MonitorAlgo::HashChains3 => {
                let mut ignored = 0;
                let g = self.shared.table.lock(addr, &mut ignored);
                Some(
                    g.group(addr)
                        .map(|p| unsafe { &*p })
                        .filter(|r| r.state() == RecordState::EntryWait)
                        .map(|r| r.owner())
                        .collect(),
                )
            }
            MonitorAlgo::CjmFifo => Some(cjm::queued_owners(rec)),
            MonitorAlgo::CjmBy | MonitorAlgo::NativeBaseline => None,
        }
    }

    /// Number of distinct monitors currently held.
    pub fn held_count(&self) -> usize {
        self.local.held.len()
    }

    /// The object's identity hash, assigning one if necessary.
    pub fn identity_hash(&mut self, obj: &SyncObject) -> u32 {
        match self.shared.config.algo {
            MonitorAlgo::CjmFifo | MonitorAlgo::CjmBy => cjm::identity_hash(&self.local, obj),
            _ => obj
                .assign_identity_hash()
                .expect("hashed monitors never displace the header"),
        }
    }

    /// The object's neutral header word as of some instant during the call.
    /// For CJM this follows the displaced header when the object is locked.
    pub fn read_header(&self, obj: &SyncObject) -> u64 {
        match self.shared.config.algo {
            MonitorAlgo::CjmFifo | MonitorAlgo::CjmBy => cjm::read_header(&self.local, obj),
            _ => obj.header().load(),
        }
    }

    pub fn stats(&self) -> ThreadStats {
        self.local.stats
    }

    /// How often this thread's park handle actually blocked.
    pub fn park_count(&self) -> u64 {
        self.local.park().park_count()
    }

    /// Records taken from the free list and not yet returned.
    pub fn outstanding_records(&self) -> usize {
        self.local.records.outstanding()
    }

    pub fn free_records(&self) -> usize {
        self.local.records.free_len()
    }
}

impl Drop for ThreadContext {
    fn drop(&mut self) {
        debug_assert!(
            self.local.held.is_empty() || std::thread::panicking(),
            "thread context dropped while holding {} monitors",
            self.local.held.len()
        );
        self.shared.arena.give_back(self.local.records.drain());
        self.shared
            .parks
            .lock()
            .unwrap()
            .spare
            .push(self.local.park);
    }
}

impl fmt::Debug for ThreadContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThreadContext")
            .field("id", &self.local.id)
            .field("held", &self.local.held.len())
            .field("stats", &self.local.stats)
            .finish()
    }
}
