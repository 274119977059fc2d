//! Emulated heap objects and their 64-bit header word.
//!
//! Layout of the header word (bit 0 is least significant):
//!
//! ```text
//!  63 62 | 61..58 | 57..36 | 35..5 | 4  3  2 | 1 0
//!  rsvd  |  age   | klass  | ihash | I  W  L | tag
//! ```
//!
//! `tag` is `00` for a neutral header and `01` when the word has been
//! displaced by a CJM monitor, in which case bits 63..2 (together with the
//! zero low bits of a 128-byte aligned record) hold the address of the tail
//! lock record. Tags `10` and `11` are reserved and never produced. `L`, `W`
//! and `I` are the Locked, WaitersExist and Impatient bits used only by
//! HashChains+3. Bits 63..62 are reserved and always zero.

use std::hash::{BuildHasher, Hasher, RandomState};
use std::mem::offset_of;
use std::sync::OnceLock;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU8, AtomicU64, Ordering};

use thiserror::Error;

use crate::native::NativeMonitor;
use crate::record::LockRecord;

const TAG_MASK: u64 = 0b11;
const TAG_NEUTRAL: u64 = 0b00;
const TAG_DISPLACED: u64 = 0b01;

const IHASH_SHIFT: u32 = 5;
const IHASH_BITS: u32 = 31;
const KLASS_SHIFT: u32 = 36;
const KLASS_BITS: u32 = 22;
const AGE_SHIFT: u32 = 58;
const AGE_BITS: u32 = 4;
const RESERVED_MASK: u64 = 0b11 << 62;

pub const IHASH_MASK: u64 = ((1 << IHASH_BITS) - 1) << IHASH_SHIFT;
pub const MAX_KLASS: u32 = (1 << KLASS_BITS) - 1;
pub const MAX_AGE: u8 = (1 << AGE_BITS) - 1;
pub const MAX_IHASH: u32 = (1 << IHASH_BITS) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum HeaderError {
    #[error("reserved header tag {tag:#04b} in word {raw:#018x}")]
    ReservedTag { raw: u64, tag: u64 },
    #[error("reserved header bits set in word {raw:#018x}")]
    ReservedBits { raw: u64 },
    #[error("header word {raw:#018x} is displaced")]
    Displaced { raw: u64 },
}

/// The three synchronization bits used by HashChains+3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct LockBits(u8);

impl LockBits {
    pub const NONE: Self = Self(0);
    pub const LOCKED: Self = Self(1 << 0);
    pub const WAITERS_EXIST: Self = Self(1 << 1);
    pub const IMPATIENT: Self = Self(1 << 2);

    const SHIFT: u32 = 2;
    const MASK: u64 = 0b111 << Self::SHIFT;

    pub const fn from_bits(bits: u8) -> Self {
        Self(bits & 0b111)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn contains(self, other: Self) -> bool {
        self.0 & other.0 == other.0
    }

    pub const fn with(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub const fn without(self, other: Self) -> Self {
        Self(self.0 & !other.0)
    }

    /// Word-level mask of these bits inside a header.
    pub const fn word_mask(self) -> u64 {
        (self.0 as u64) << Self::SHIFT
    }
}

/// Field view of a neutral header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct NeutralHeader {
    pub ihash: u32,
    pub klass: u32,
    pub age: u8,
    pub lock_bits: LockBits,
}

impl NeutralHeader {
    pub fn new(klass: u32) -> Self {
        assert!(
            klass <= MAX_KLASS,
            "klass {klass} does not fit in {KLASS_BITS} bits"
        );
        Self {
            klass,
            ..Self::default()
        }
    }

    pub fn encode(&self) -> u64 {
        debug_assert!(self.ihash <= MAX_IHASH);
        debug_assert!(self.klass <= MAX_KLASS);
        debug_assert!(self.age <= MAX_AGE);
        TAG_NEUTRAL
            | ((self.lock_bits.0 as u64) << LockBits::SHIFT)
            | ((self.ihash as u64) << IHASH_SHIFT)
            | ((self.klass as u64) << KLASS_SHIFT)
            | ((self.age as u64) << AGE_SHIFT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaderMode {
    Neutral,
    DisplacedCjm,
}

/// A decoded header word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Header {
    Neutral(NeutralHeader),
    /// The word references the tail lock record of a CJM queue.
    Displaced {
        tail: usize,
    },
}

impl Header {
    pub fn mode(&self) -> HeaderMode {
        match self {
            Header::Neutral(_) => HeaderMode::Neutral,
            Header::Displaced { .. } => HeaderMode::DisplacedCjm,
        }
    }

    pub fn decode(raw: u64) -> Result<Self, HeaderError> {
        match raw & TAG_MASK {
            TAG_NEUTRAL => {
                if raw & RESERVED_MASK != 0 {
                    return Err(HeaderError::ReservedBits { raw });
                }
                Ok(Header::Neutral(NeutralHeader {
                    ihash: field(raw, IHASH_SHIFT, IHASH_BITS) as u32,
                    klass: field(raw, KLASS_SHIFT, KLASS_BITS) as u32,
                    age: field(raw, AGE_SHIFT, AGE_BITS) as u8,
                    lock_bits: LockBits(((raw & LockBits::MASK) >> LockBits::SHIFT) as u8),
                }))
            }
            TAG_DISPLACED => Ok(Header::Displaced {
                tail: (raw & !TAG_MASK) as usize,
            }),
            tag => Err(HeaderError::ReservedTag { raw, tag }),
        }
    }

    pub fn encode(&self) -> u64 {
        match self {
            Header::Neutral(fields) => fields.encode(),
            Header::Displaced { tail } => {
                debug_assert_eq!(*tail as u64 & TAG_MASK, 0);
                *tail as u64 | TAG_DISPLACED
            }
        }
    }
}

#[inline]
fn field(raw: u64, shift: u32, bits: u32) -> u64 {
    (raw >> shift) & ((1 << bits) - 1)
}

#[inline]
pub(crate) fn is_neutral(raw: u64) -> bool {
    raw & TAG_MASK == TAG_NEUTRAL
}

#[inline]
pub(crate) fn ihash_of(raw: u64) -> u32 {
    field(raw, IHASH_SHIFT, IHASH_BITS) as u32
}

#[inline]
pub(crate) fn with_ihash(raw: u64, ihash: u32) -> u64 {
    (raw & !IHASH_MASK) | ((ihash as u64) << IHASH_SHIFT)
}

#[inline]
pub(crate) fn displaced_word(record: *const LockRecord) -> u64 {
    record as u64 | TAG_DISPLACED
}

#[inline]
pub(crate) fn displaced_tail(raw: u64) -> Option<*mut LockRecord> {
    (raw & TAG_MASK == TAG_DISPLACED).then_some((raw & !TAG_MASK) as *mut LockRecord)
}

/// The atomic header word of an object.
#[repr(transparent)]
#[derive(Debug)]
pub struct ObjectHeader {
    raw: AtomicU64,
}

impl ObjectHeader {
    pub fn new(raw: u64) -> Self {
        Self {
            raw: AtomicU64::new(raw),
        }
    }

    #[inline]
    pub fn load(&self) -> u64 {
        self.raw.load(Ordering::Acquire)
    }

    pub fn decode(&self) -> Result<Header, HeaderError> {
        Header::decode(self.load())
    }

    #[inline]
    pub(crate) fn word(&self) -> &AtomicU64 {
        &self.raw
    }
}

/// Per-object state for the bypass (Fissile) variant of CJM. It lives in the
/// same cache line as the header word.
#[derive(Debug, Default)]
pub(crate) struct BypassCell {
    /// Outer test-and-set indicator; 1 while some thread owns the monitor.
    pub(crate) outer: AtomicU8,
    /// Set by the queue head once it has waited longer than its patience.
    pub(crate) impatient: AtomicBool,
    /// Record of the queue head competing for `outer`, or null.
    pub(crate) standby: AtomicPtr<LockRecord>,
}

const LEAD_BYTES: usize = 56 - size_of::<BypassCell>();
pub const PAYLOAD_BYTES: usize = 64;

/// An emulated heap object.
///
/// The header word occupies the last eight bytes of the object's first cache
/// line; everything else the object carries begins on the following line.
/// An object must not move while any monitor operation on it is in flight,
/// which borrowing already guarantees.
#[repr(C, align(64))]
pub struct SyncObject {
    pub(crate) bypass: BypassCell,
    _lead: [u8; LEAD_BYTES],
    header: ObjectHeader,
    payload: [u8; PAYLOAD_BYTES],
    pub(crate) native: NativeMonitor,
}

const _: () = assert!(offset_of!(SyncObject, header) == 56);
const _: () = assert!(offset_of!(SyncObject, payload) == 64);

impl SyncObject {
    pub fn new(klass: u32) -> Self {
        Self::with_header(NeutralHeader::new(klass))
    }

    pub fn with_header(fields: NeutralHeader) -> Self {
        Self {
            bypass: BypassCell::default(),
            _lead: [0; LEAD_BYTES],
            header: ObjectHeader::new(fields.encode()),
            payload: [0; PAYLOAD_BYTES],
            native: NativeMonitor::new(),
        }
    }

    #[inline]
    pub fn header(&self) -> &ObjectHeader {
        &self.header
    }

    /// Stable identity of the object, used for hashing and chain matching.
    #[inline]
    pub fn addr(&self) -> usize {
        self as *const Self as usize
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Byte offset of the header word from the start of its cache line.
    pub fn header_line_offset(&self) -> usize {
        (&self.header as *const ObjectHeader as usize) % 64
    }

    /// Assigns the identity hash if the header is neutral and has none yet.
    ///
    /// Returns [`HeaderError::Displaced`] when the header is currently owned by
    /// a CJM monitor; callers must then use the CJM read protocol instead.
    pub fn assign_identity_hash(&self) -> Result<u32, HeaderError> {
        let word = self.header.word();
        let mut raw = word.load(Ordering::Acquire);
        let mut fresh = 0;
        loop {
            match Header::decode(raw)? {
                Header::Displaced { .. } => return Err(HeaderError::Displaced { raw }),
                Header::Neutral(fields) if fields.ihash != 0 => return Ok(fields.ihash),
                Header::Neutral(_) => {}
            }
            if fresh == 0 {
                fresh = next_identity_hash();
            }
            match word.compare_exchange_weak(
                raw,
                with_ihash(raw, fresh),
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return Ok(fresh),
                Err(seen) => raw = seen,
            }
        }
    }
}

impl std::fmt::Debug for SyncObject {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyncObject")
            .field("addr", &format_args!("{:#x}", self.addr()))
            .field("header", &format_args!("{:#018x}", self.header.load()))
            .finish()
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn random_seed() -> u64 {
    RandomState::new().build_hasher().finish()
}

/// Per-process salt for the bucket hash.
pub fn process_salt() -> u64 {
    static SALT: OnceLock<u64> = OnceLock::new();
    *SALT.get_or_init(random_seed)
}

/// Maps an object address to a bucket in `[0, nbuckets)`.
///
/// `nbuckets` must be a power of two.
#[inline]
pub fn bucket_index(addr: usize, nbuckets: usize, salt: u64) -> usize {
    debug_assert!(nbuckets.is_power_of_two());
    if nbuckets <= 1 {
        return 0;
    }
    let mut key = addr as u64 ^ salt;
    key ^= key >> 32;
    (key.wrapping_mul(GOLDEN) >> (64 - nbuckets.trailing_zeros())) as usize
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws the next identity hash from the process-wide stream. Never zero.
pub fn next_identity_hash() -> u32 {
    static STATE: OnceLock<AtomicU64> = OnceLock::new();
    let state = STATE.get_or_init(|| AtomicU64::new(random_seed()));
    loop {
        let h = (splitmix64(state.fetch_add(GOLDEN, Ordering::Relaxed)) & MAX_IHASH as u64) as u32;
        if h != 0 {
            return h;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fresh_object_is_neutral_unhashed_unlocked() {
        let obj = SyncObject::new(7);
        match obj.header().decode().unwrap() {
            Header::Neutral(f) => {
                assert_eq!(f.ihash, 0);
                assert_eq!(f.klass, 7);
                assert!(!f.lock_bits.contains(LockBits::LOCKED));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn neutral_fields_round_trip() {
        let fields = NeutralHeader {
            ihash: 12345,
            klass: 7,
            age: 3,
            lock_bits: LockBits::NONE,
        };
        let raw = fields.encode();
        assert_eq!(Header::decode(raw).unwrap(), Header::Neutral(fields));
    }

    #[test]
    fn reserved_tags_are_rejected() {
        assert!(matches!(
            Header::decode(0b10),
            Err(HeaderError::ReservedTag { tag: 0b10, .. })
        ));
        assert!(matches!(
            Header::decode(0b11),
            Err(HeaderError::ReservedTag { tag: 0b11, .. })
        ));
        assert!(matches!(
            Header::decode(1 << 63),
            Err(HeaderError::ReservedBits { .. })
        ));
    }

    #[test]
    fn displaced_word_carries_tail() {
        let tail = 0x7f00_dead_be80usize;
        let raw = Header::Displaced { tail }.encode();
        assert_eq!(Header::decode(raw).unwrap(), Header::Displaced { tail });
        assert_eq!(displaced_tail(raw), Some(tail as *mut LockRecord));
        assert_eq!(displaced_tail(NeutralHeader::new(1).encode()), None);
    }

    #[test]
    fn header_ends_first_cache_line() {
        let objs: Vec<SyncObject> = (0..4).map(SyncObject::new).collect();
        for obj in &objs {
            assert_eq!(obj.header_line_offset(), 56);
            assert_eq!(obj.payload().as_ptr() as usize % 64, 0);
        }
    }

    #[test]
    fn identity_hash_is_idempotent_and_nonzero() {
        let obj = SyncObject::new(1);
        let a = obj.assign_identity_hash().unwrap();
        let b = obj.assign_identity_hash().unwrap();
        assert_ne!(a, 0);
        assert_eq!(a, b);
        let other = SyncObject::new(1);
        assert_ne!(other.assign_identity_hash().unwrap(), 0);
    }

    #[test]
    fn identity_hash_refused_while_displaced() {
        let obj = SyncObject::new(1);
        obj.header().word().store(
            displaced_word(0x1000 as *const LockRecord),
            Ordering::Relaxed,
        );
        assert!(matches!(
            obj.assign_identity_hash(),
            Err(HeaderError::Displaced { .. })
        ));
    }

    #[test]
    fn single_bucket_always_zero() {
        for addr in [0usize, 64, 0xdead_beef, usize::MAX] {
            assert_eq!(bucket_index(addr, 1, 0x1234), 0);
        }
    }

    #[test]
    fn bucket_index_is_deterministic() {
        let salt = 0xfeed_f00d;
        assert_eq!(
            bucket_index(0x1000, 4096, salt),
            bucket_index(0x1000, 4096, salt)
        );
    }

    /// Dispersion check over a synthetic heap of 64-byte spaced objects, for a
    /// handful of salts including zero.
    #[test]
    fn bucket_dispersion_within_three_times_mean() {
        const N: usize = 100_000;
        const BUCKETS: usize = 4096;
        for salt in [
            0u64,
            1,
            0x5555_5555_5555_5555,
            process_salt(),
            0xdead_beef_cafe_babe,
        ] {
            for base in [0x1000usize, 0x7f12_3456_7000] {
                let mut load = vec![0u32; BUCKETS];
                for i in 0..N {
                    load[bucket_index(base + i * 64, BUCKETS, salt)] += 1;
                }
                let mean = N as f64 / BUCKETS as f64;
                let max = *load.iter().max().unwrap() as f64;
                assert!(
                    max <= 3.0 * mean,
                    "salt {salt:#x} base {base:#x}: max {max} mean {mean}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn neutral_round_trip(ihash in 0..=MAX_IHASH, klass in 0..=MAX_KLASS,
                              age in 0..=MAX_AGE, bits in 0u8..8) {
            let fields = NeutralHeader { ihash, klass, age, lock_bits: LockBits::from_bits(bits) };
            let raw = fields.encode();
            prop_assert_eq!(Header::decode(raw).unwrap(), Header::Neutral(fields));
            prop_assert_eq!(Header::decode(raw).unwrap().encode(), raw);
        }

        #[test]
        fn decode_encode_bit_exact(raw in any::<u64>()) {
            if let Ok(h) = Header::decode(raw) {
                prop_assert_eq!(h.encode(), raw);
            }
        }

        #[test]
        fn bucket_index_in_range(addr in any::<usize>(), shift in 0u32..16, salt in any::<u64>()) {
            let n = 1usize << shift;
            prop_assert!(bucket_index(addr, n, salt) < n);
        }
    }
}
