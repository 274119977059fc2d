//! Java-style monitors over emulated object headers.
//!
//! A [`Monitors`] pool runs one of several monitor algorithms over
//! [`SyncObject`]s. Threads operate through a per-thread [`ThreadContext`],
//! which provides reentrant `enter`/`exit`, `wait` with an optional timeout,
//! `notify`/`notify_all` and identity hashing.
//!
//! ```
//! use monitors::{MonitorAlgo, Monitors, SyncObject};
//!
//! let pool = Monitors::with_algo(MonitorAlgo::CjmFifo);
//! let obj = SyncObject::new(7);
//! let mut cx = pool.context();
//! cx.enter(&obj);
//! cx.enter(&obj);
//! let hash = cx.identity_hash(&obj);
//! cx.exit(&obj).unwrap();
//! cx.exit(&obj).unwrap();
//! assert_eq!(cx.identity_hash(&obj), hash);
//! assert!(cx.exit(&obj).is_err());
//! ```

mod bucket;
mod cjm;
mod hashchains;
mod hashchains3;
pub mod header;
mod monitor;
mod native;
pub mod park;
mod record;

pub use bucket::{InnerLockKind, TasLock};
pub use header::{
    Header, HeaderError, HeaderMode, LockBits, NeutralHeader, ObjectHeader, SyncObject,
};
pub use monitor::{
    ChainSnapshot, DEFAULT_BUCKETS, DEFAULT_PATIENCE, MonitorAlgo, MonitorConfig, MonitorError,
    Monitors, RecordStats, ThreadContext, ThreadStats, UnknownAlgo, WaitOutcome,
};
pub use park::{DEFAULT_MAX_SPINS, ParkHandle, SpinPolicy, spin_high_water};
pub use record::RecordState;
