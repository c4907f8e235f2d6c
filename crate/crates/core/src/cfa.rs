// SPDX-License-Identifier: Apache-2.0

//! Bounded control-flow log with repetition compression.
//!
//! Entries are big-endian 32-bit words:
//!
//! ```text
//! 0aaa_aaaa ...   destination address (31 bits)
//! 10nn_nnnn ...   static loop limit for the preceding address (30 bits)
//! 110n_nnnn ...   previous destination repeated n more times (29 bits)
//! 111n_nnnn ...   previous two destinations repeated n more times
//! ```
//!
//! A static-loop limit `n` replaces its address with `max(n, 1) - 1` copies
//! of it: one per back-edge traversal of the loop.

use thiserror::Error;

pub const ENTRY_BYTES: usize = 4;
pub const ADDR_MAX: u32 = 0x7FFF_FFFF;
pub const STATIC_LIMIT_MAX: u32 = (1 << 30) - 1;
pub const REPEAT_MAX: u32 = (1 << 29) - 1;
/// Default log capacity.
pub const DEFAULT_LOG_MAX: usize = 50 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entry {
    Addr(u32),
    StaticLimit(u32),
    Repeat(u32),
    RepeatPair(u32),
}

impl Entry {
    pub fn encode(self) -> u32 {
        match self {
            Entry::Addr(a) => a & ADDR_MAX,
            Entry::StaticLimit(n) => 0x8000_0000 | (n & STATIC_LIMIT_MAX),
            Entry::Repeat(n) => 0xC000_0000 | (n & REPEAT_MAX),
            Entry::RepeatPair(n) => 0xE000_0000 | (n & REPEAT_MAX),
        }
    }

    pub fn decode(w: u32) -> Entry {
        match w >> 29 {
            0..=3 => Entry::Addr(w),
            4 | 5 => Entry::StaticLimit(w & STATIC_LIMIT_MAX),
            6 => Entry::Repeat(w & REPEAT_MAX),
            _ => Entry::RepeatPair(w & REPEAT_MAX),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CfaError {
    #[error("control-flow engine is inactive")]
    InactiveEngine,
    #[error("address {0:#x} does not fit an entry")]
    AddressTooLarge(u32),
    #[error("static loop limit {0} does not fit an entry")]
    LimitTooLarge(u32),
    #[error("malformed log at entry {0}")]
    MalformedLog(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendResult {
    Ok,
    /// Appending would exceed capacity; nothing was recorded.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum Pending {
    #[default]
    None,
    /// Last destination repeated `count` times so far.
    Single { count: u32 },
    /// Last two destinations repeated `count` times; `half` when the first
    /// of the next repetition has been seen.
    Pair { count: u32, half: bool },
}

/// Last two destinations of the decompressed stream, oldest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Tail {
    prev: Option<u32>,
    last: Option<u32>,
}

impl Tail {
    fn push(&mut self, a: u32) {
        self.prev = self.last;
        self.last = Some(a);
    }
}

/// Size of [`CfLog::state_bytes`].
pub const STATE_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfLog {
    buf: Vec<u8>,
    capacity: usize,
    pending: Pending,
    tail: Tail,
}

impl CfLog {
    pub fn new(capacity: usize) -> CfLog {
        CfLog {
            buf: Vec::new(),
            capacity: capacity - capacity % ENTRY_BYTES,
            pending: Pending::None,
            tail: Tail::default(),
        }
    }

    /// Written bytes (`Log_size`); excludes repetitions not yet flushed.
    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty() && self.pending == Pending::None
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

    fn pending_bytes(p: Pending) -> usize {
        match p {
            Pending::None => 0,
            Pending::Single { .. } => ENTRY_BYTES,
            Pending::Pair { count, half } => (usize::from(count > 0) + usize::from(half)) * ENTRY_BYTES,
        }
    }

    /// Bytes the log will occupy once flushed.
    pub fn committed_len(&self) -> usize {
        self.buf.len() + Self::pending_bytes(self.pending)
    }

    fn write(&mut self, e: Entry) {
        self.buf.extend_from_slice(&e.encode().to_be_bytes());
    }

    /// Next state and the addresses it forces out when `d` is appended.
    fn transition(&self, d: u32) -> (Pending, Tail, Vec<Entry>) {
        let mut out = Vec::new();
        let mut tail = self.tail;
        match self.pending {
            Pending::Single { count } if Some(d) == tail.last && count < REPEAT_MAX => {
                return (Pending::Single { count: count + 1 }, tail, out);
            }
            Pending::Pair { count, half: false } if Some(d) == tail.prev => {
                return (Pending::Pair { count, half: true }, tail, out);
            }
            Pending::Pair { count, half: true } if Some(d) == tail.last && count < REPEAT_MAX => {
                return (Pending::Pair { count: count + 1, half: false }, tail, out);
            }
            Pending::None => {}
            Pending::Single { count } => {
                out.push(Entry::Repeat(count));
                let a = tail.last.expect("repeat has a destination");
                tail.prev = Some(a);
            }
            Pending::Pair { count, half } => {
                if count > 0 {
                    out.push(Entry::RepeatPair(count));
                }
                if half {
                    let a = tail.prev.expect("pair has two destinations");
                    out.push(Entry::Addr(a));
                    tail.push(a);
                }
            }
        }
        if Some(d) == tail.last {
            (Pending::Single { count: 1 }, tail, out)
        } else if tail.prev.is_some() && Some(d) == tail.prev {
            (Pending::Pair { count: 0, half: true }, tail, out)
        } else {
            out.push(Entry::Addr(d));
            tail.push(d);
            (Pending::None, tail, out)
        }
    }

    pub fn append(&mut self, d: u32) -> Result<AppendResult, CfaError> {
        if d > ADDR_MAX {
            return Err(CfaError::AddressTooLarge(d));
        }
        let (pending, tail, out) = self.transition(d);
        if self.buf.len() + out.len() * ENTRY_BYTES + Self::pending_bytes(pending) > self.capacity {
            return Ok(AppendResult::Full);
        }
        for e in out {
            self.write(e);
        }
        self.pending = pending;
        self.tail = tail;
        Ok(AppendResult::Ok)
    }

    /// Records a static loop: its header and limit as two entries.
    pub fn log_static_loop(&mut self, dest: u32, limit: u32) -> Result<AppendResult, CfaError> {
        if dest > ADDR_MAX {
            return Err(CfaError::AddressTooLarge(dest));
        }
        if limit > STATIC_LIMIT_MAX {
            return Err(CfaError::LimitTooLarge(limit));
        }
        if self.committed_len() + 2 * ENTRY_BYTES > self.capacity {
            return Ok(AppendResult::Full);
        }
        self.flush();
        self.write(Entry::Addr(dest));
        self.write(Entry::StaticLimit(limit));
        for _ in 0..(limit.max(1) - 1).min(2) {
            self.tail.push(dest);
        }
        Ok(AppendResult::Ok)
    }

    /// Writes out pending repetitions so the bytes decompress on their own.
    pub fn flush(&mut self) {
        match self.pending {
            Pending::None => {}
            Pending::Single { count } => {
                self.write(Entry::Repeat(count));
                self.tail.prev = self.tail.last;
            }
            Pending::Pair { count, half } => {
                if count > 0 {
                    self.write(Entry::RepeatPair(count));
                }
                if half {
                    let a = self.tail.prev.expect("pair has two destinations");
                    self.write(Entry::Addr(a));
                    self.tail.push(a);
                }
            }
        }
        self.pending = Pending::None;
    }

    /// Empties the log after its contents have been reported.
    pub fn clear(&mut self) {
        self.buf.clear();
        self.pending = Pending::None;
        self.tail = Tail::default();
    }

    /// Compression state, for persistence alongside [`CfLog::bytes`].
    pub fn state_bytes(&self) -> [u8; STATE_BYTES] {
        let (tag, count, half) = match self.pending {
            Pending::None => (0u8, 0, false),
            Pending::Single { count } => (1, count, false),
            Pending::Pair { count, half } => (2, count, half),
        };
        let flags = tag
            | u8::from(half) << 2
            | u8::from(self.tail.prev.is_some()) << 3
            | u8::from(self.tail.last.is_some()) << 4;
        let mut s = [0u8; STATE_BYTES];
        s[0] = flags;
        s[4..8].copy_from_slice(&count.to_be_bytes());
        s[8..12].copy_from_slice(&self.tail.prev.unwrap_or(0).to_be_bytes());
        s[12..16].copy_from_slice(&self.tail.last.unwrap_or(0).to_be_bytes());
        s
    }

    pub fn restore(capacity: usize, bytes: &[u8], state: &[u8; STATE_BYTES]) -> CfLog {
        let word = |i: usize| u32::from_be_bytes(state[i..i + 4].try_into().unwrap());
        let flags = state[0];
        let count = word(4);
        let pending = match flags & 3 {
            1 => Pending::Single { count },
            2 => Pending::Pair { count, half: flags & 4 != 0 },
            _ => Pending::None,
        };
        let tail = Tail { prev: (flags & 8 != 0).then(|| word(8)), last: (flags & 16 != 0).then(|| word(12)) };
        let mut log = CfLog::new(capacity);
        log.buf = bytes.to_vec();
        log.pending = pending;
        log.tail = tail;
        log
    }
}

/// Log plus the active flag gating appends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfaEngine {
    pub log: CfLog,
    pub active: bool,
}

impl CfaEngine {
    pub fn new(capacity: usize) -> Self {
        CfaEngine { log: CfLog::new(capacity), active: false }
    }

    pub fn append(&mut self, d: u32) -> Result<AppendResult, CfaError> {
        if !self.active {
            return Err(CfaError::InactiveEngine);
        }
        self.log.append(d)
    }

    pub fn log_static_loop(&mut self, dest: u32, limit: u32) -> Result<AppendResult, CfaError> {
        if !self.active {
            return Err(CfaError::InactiveEngine);
        }
        self.log.log_static_loop(dest, limit)
    }
}

pub fn entries(bytes: &[u8]) -> Result<Vec<Entry>, CfaError> {
    if !bytes.len().is_multiple_of(ENTRY_BYTES) {
        return Err(CfaError::MalformedLog(bytes.len() / ENTRY_BYTES));
    }
    Ok(bytes.chunks_exact(ENTRY_BYTES).map(|c| Entry::decode(u32::from_be_bytes([c[0], c[1], c[2], c[3]]))).collect())
}

/// Expands a log into its destination sequence.
pub fn decompress(bytes: &[u8]) -> Result<Vec<u32>, CfaError> {
    let mut out: Vec<u32> = Vec::new();
    let mut prev_addr = false;
    for (i, e) in entries(bytes)?.into_iter().enumerate() {
        match e {
            Entry::Addr(a) => out.push(a),
            Entry::StaticLimit(n) => {
                if !prev_addr {
                    return Err(CfaError::MalformedLog(i));
                }
                let a = out.pop().expect("checked above");
                out.extend(std::iter::repeat_n(a, n.max(1) as usize - 1));
            }
            Entry::Repeat(n) => {
                let Some(&a) = out.last() else { return Err(CfaError::MalformedLog(i)) };
                out.extend(std::iter::repeat_n(a, n as usize));
            }
            Entry::RepeatPair(n) => {
                if out.len() < 2 {
                    return Err(CfaError::MalformedLog(i));
                }
                let (x, y) = (out[out.len() - 2], out[out.len() - 1]);
                for _ in 0..n {
                    out.push(x);
                    out.push(y);
                }
            }
        }
        prev_addr = matches!(e, Entry::Addr(_));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u32 = 0x100;
    const B: u32 = 0x104;

    fn log_of(seq: &[u32]) -> CfLog {
        let mut log = CfLog::new(DEFAULT_LOG_MAX);
        for &d in seq {
            assert_eq!(log.append(d), Ok(AppendResult::Ok));
        }
        log.flush();
        log
    }

    #[test]
    fn alternating_pair_compresses_to_three_entries() {
        let log = log_of(&[A, B, A, B, A, B]);
        assert_eq!(log.len(), 12);
        assert_eq!(entries(log.bytes()).unwrap(), vec![Entry::Addr(A), Entry::Addr(B), Entry::RepeatPair(2)]);
        assert_eq!(decompress(log.bytes()).unwrap(), vec![A, B, A, B, A, B]);
    }

    #[test]
    fn distinct_transfers_take_four_bytes_each() {
        let seq: Vec<u32> = (0..2051).map(|i| (i % 3) * 4 + 0x200).collect();
        let log = log_of(&seq);
        assert_eq!(log.len(), 8204);
    }

    #[test]
    fn full_leaves_log_unchanged() {
        let mut log = CfLog::new(8);
        assert_eq!(log.append(A), Ok(AppendResult::Ok));
        assert_eq!(log.append(B), Ok(AppendResult::Ok));
        let before = log.clone();
        assert_eq!(log.append(0x108), Ok(AppendResult::Full));
        assert_eq!(log, before);
    }

    #[test]
    fn static_loop_two_entries() {
        let mut log = CfLog::new(64);
        log.log_static_loop(0x100, 5).unwrap();
        assert_eq!(entries(log.bytes()).unwrap(), vec![Entry::Addr(0x100), Entry::StaticLimit(5)]);
        assert_eq!(decompress(log.bytes()).unwrap(), vec![0x100; 4]);
        log.log_static_loop(0x200, 0).unwrap();
        assert_eq!(log.len(), 16);
        assert_eq!(decompress(log.bytes()).unwrap(), vec![0x100; 4]);
    }

    #[test]
    fn single_address_is_identity() {
        assert_eq!(decompress(log_of(&[A]).bytes()).unwrap(), vec![A]);
    }

    #[test]
    fn leading_record_is_malformed() {
        let bytes = Entry::Repeat(3).encode().to_be_bytes();
        assert_eq!(decompress(&bytes), Err(CfaError::MalformedLog(0)));
        let bytes = Entry::StaticLimit(3).encode().to_be_bytes();
        assert_eq!(decompress(&bytes), Err(CfaError::MalformedLog(0)));
    }

    #[test]
    fn inactive_engine_rejects() {
        let mut e = CfaEngine::new(64);
        assert_eq!(e.append(A), Err(CfaError::InactiveEngine));
    }

    #[test]
    fn state_roundtrip() {
        let mut log = CfLog::new(64);
        for d in [A, B, A] {
            log.append(d).unwrap();
        }
        let restored = CfLog::restore(64, log.bytes(), &log.state_bytes());
        assert_eq!(restored, log);
    }

    proptest::proptest! {
        #[test]
        fn append_then_decompress_is_identity(
            seq in proptest::collection::vec(0u32..4, 0..200),
            loops in proptest::collection::vec((0usize..200, 0u32..6), 0..4),
        ) {
            let mut log = CfLog::new(DEFAULT_LOG_MAX);
            let mut expected = Vec::new();
            for (i, &d) in seq.iter().enumerate() {
                for &(at, limit) in &loops {
                    if at == i {
                        log.log_static_loop(0x900, limit).unwrap();
                        expected.extend(std::iter::repeat_n(0x900, limit.max(1) as usize - 1));
                    }
                }
                log.append(0x100 + d * 4).unwrap();
                expected.push(0x100 + d * 4);
            }
            log.flush();
            proptest::prop_assert_eq!(decompress(log.bytes()).unwrap(), expected);
        }

        #[test]
        fn full_fires_exactly_at_capacity(seq in proptest::collection::vec(0u32..6, 1..200), cap in 1usize..40) {
            let mut log = CfLog::new(cap * 4);
            for &d in &seq {
                let before = log.clone();
                let committed = log.committed_len();
                match log.append(0x100 + d * 4).unwrap() {
                    AppendResult::Full => {
                        proptest::prop_assert_eq!(&log, &before);
                        proptest::prop_assert!(committed + 4 > cap * 4);
                        break;
                    }
                    AppendResult::Ok => proptest::prop_assert!(log.committed_len() <= cap * 4),
                }
            }
        }
    }
}
