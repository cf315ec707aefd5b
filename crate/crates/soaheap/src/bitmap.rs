//! Hierarchical bitmap of 64-bit containers.
//!
//! Level 0 holds one bit per index. Every higher level holds one summary bit
//! per container of the level below; the topmost level is a single word.
//! Summary bits are only eventually consistent: they are updated after the
//! container they describe, so concurrent readers may observe a stale mix.
//! At quiescent points every summary bit equals the OR of its container.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use crossbeam_utils::Backoff;
use rayon::prelude::*;

const BITS: usize = 64;

pub struct HierBitmap {
    num_bits: usize,
    levels: Vec<Box<[AtomicU64]>>,
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(BITS).max(1)
}

/// Index of the `n`-th (0-based) set bit of `word`.
pub fn nth_set_bit(word: u64, n: u32) -> Option<u32> {
    let mut w = word;
    for _ in 0..n {
        if w == 0 {
            return None;
        }
        w &= w - 1;
    }
    if w == 0 {
        None
    } else {
        Some(w.trailing_zeros())
    }
}

/// Mask of the lowest `k` set bits of `word`.
pub fn lowest_set_bits(word: u64, k: u32) -> u64 {
    if k == 0 {
        return 0;
    }
    match nth_set_bit(word, k - 1) {
        Some(63) => word,
        Some(i) => word & ((1u64 << (i + 1)) - 1),
        None => word,
    }
}

fn rotation(seed: u64, level: usize) -> u32 {
    ((seed >> ((6 * level) % 60)) & 63) as u32
}

impl HierBitmap {
    pub fn new(num_bits: usize) -> Self {
        let mut levels = Vec::new();
        let mut n = num_bits;
        loop {
            let words = words_for(n);
            levels.push((0..words).map(|_| AtomicU64::new(0)).collect::<Box<[_]>>());
            if words == 1 {
                break;
            }
            n = words;
        }
        HierBitmap { num_bits, levels }
    }

    /// Bitmap with every valid bit set and consistent summaries.
    pub fn new_full(num_bits: usize) -> Self {
        let bm = Self::new(num_bits);
        let mut n = num_bits;
        for level in &bm.levels {
            for (w, word) in level.iter().enumerate() {
                let lo = w * BITS;
                let count = n.saturating_sub(lo).min(BITS);
                let v = if count == BITS { u64::MAX } else { (1u64 << count) - 1 };
                word.store(v, Ordering::Relaxed);
            }
            n = level.len();
        }
        bm
    }

    pub fn len(&self) -> usize {
        self.num_bits
    }

    pub fn is_empty(&self) -> bool {
        self.num_bits == 0
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn get(&self, pos: usize) -> bool {
        debug_assert!(pos < self.num_bits, "bit {pos} out of range");
        self.levels[0][pos / BITS].load(Ordering::Acquire) & (1 << (pos % BITS)) != 0
    }

    /// Sets or clears `pos`. Returns true iff this call changed the bit.
    pub fn try_write(&self, pos: usize, value: bool) -> bool {
        debug_assert!(pos < self.num_bits, "bit {pos} out of range");
        self.try_write_at(0, pos, value)
    }

    /// Spins until `pos` was changed to `value` by this call.
    pub fn write(&self, pos: usize, value: bool) {
        debug_assert!(pos < self.num_bits, "bit {pos} out of range");
        self.write_at(0, pos, value)
    }

    fn try_write_at(&self, level: usize, pos: usize, value: bool) -> bool {
        let word = &self.levels[level][pos / BITS];
        let mask = 1u64 << (pos % BITS);
        let has_parent = level + 1 < self.levels.len();
        if value {
            let prev = word.fetch_or(mask, Ordering::AcqRel);
            if prev & mask != 0 {
                return false;
            }
            if prev == 0 && has_parent {
                self.write_at(level + 1, pos / BITS, true);
            }
        } else {
            let prev = word.fetch_and(!mask, Ordering::AcqRel);
            if prev & mask == 0 {
                return false;
            }
            if prev == mask && has_parent {
                self.write_at(level + 1, pos / BITS, false);
            }
        }
        true
    }

    fn write_at(&self, level: usize, pos: usize, value: bool) {
        let backoff = Backoff::new();
        while !self.try_write_at(level, pos, value) {
            backoff.snooze();
            if backoff.is_completed() {
                std::thread::yield_now();
            }
        }
    }

    /// Top-down search for a set bit. Each level's word is rotated by a
    /// seed-derived amount first so that concurrent callers spread out.
    /// May fail spuriously while summaries lag behind their containers.
    pub fn try_find_set(&self, seed: u64) -> Option<usize> {
        let mut idx = 0usize;
        for level in (0..self.levels.len()).rev() {
            let words = &self.levels[level];
            if idx >= words.len() {
                return None;
            }
            let w = words[idx].load(Ordering::Acquire);
            if w == 0 {
                return None;
            }
            let rot = rotation(seed, level);
            let bit = (w.rotate_right(rot).trailing_zeros() + rot) % 64;
            idx = idx * BITS + bit as usize;
        }
        (idx < self.num_bits).then_some(idx)
    }

    /// Finds a set bit and clears it; the returned position was cleared by
    /// this caller. Fails once the hierarchy reports no candidate.
    pub fn claim_any(&self, seed: u64) -> Option<usize> {
        let mut s = seed;
        loop {
            let pos = self.try_find_set(s)?;
            if self.try_write(pos, false) {
                return Some(pos);
            }
            s = crate::mix64(s.wrapping_add(0x9e37_79b9_7f4a_7c15));
        }
    }

    /// Number of set level-0 bits. Exact only when quiescent.
    pub fn count(&self) -> usize {
        self.levels[0].iter().map(|w| w.load(Ordering::Relaxed).count_ones() as usize).sum()
    }

    /// Level-0 words whose summary bit is set, in ascending order.
    fn nonzero_words(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let top = self.levels.len() - 1;
        self.collect_words(top, 0, &mut out);
        out
    }

    fn collect_words(&self, level: usize, idx: usize, out: &mut Vec<usize>) {
        let mut w = self.levels[level][idx].load(Ordering::Acquire);
        while w != 0 {
            let bit = w.trailing_zeros() as usize;
            w &= w - 1;
            let child = idx * BITS + bit;
            if level == 0 {
                // `child` is a bit position here; the caller wants word idx.
                out.push(idx);
                return;
            }
            if level == 1 {
                out.push(child);
            } else {
                self.collect_words(level - 1, child, out);
            }
        }
    }

    /// All set positions, in unspecified order. Requires quiescence.
    ///
    /// Containers are visited through the summary levels only; results are
    /// written through a shared cursor, so the order depends on scheduling
    /// when run inside a multi-threaded pool.
    pub fn indices(&self) -> Vec<usize> {
        let words = self.nonzero_words();
        let total: usize = words.iter().map(|&w| self.levels[0][w].load(Ordering::Relaxed).count_ones() as usize).sum();
        let out: Vec<AtomicUsize> = (0..total).map(|_| AtomicUsize::new(0)).collect();
        let cursor = AtomicUsize::new(0);
        words.par_iter().for_each(|&wi| {
            let mut w = self.levels[0][wi].load(Ordering::Relaxed);
            let base = cursor.fetch_add(w.count_ones() as usize, Ordering::Relaxed);
            let mut k = base;
            while w != 0 {
                out[k].store(wi * BITS + w.trailing_zeros() as usize, Ordering::Relaxed);
                w &= w - 1;
                k += 1;
            }
        });
        out.into_iter().map(AtomicUsize::into_inner).collect()
    }

    /// All set positions in ascending order. Requires quiescence.
    pub fn indices_sorted(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for wi in self.nonzero_words() {
            let mut w = self.levels[0][wi].load(Ordering::Relaxed);
            while w != 0 {
                out.push(wi * BITS + w.trailing_zeros() as usize);
                w &= w - 1;
            }
        }
        out
    }

    /// Raw level-0 word, for sequential scans.
    pub fn word(&self, index: usize) -> u64 {
        self.levels[0][index].load(Ordering::Acquire)
    }

    pub fn num_words(&self) -> usize {
        self.levels[0].len()
    }

    /// Summary bits that disagree with their containers, as (level, bit).
    pub fn consistency_violations(&self) -> Vec<(usize, usize)> {
        let mut bad = Vec::new();
        for level in 1..self.levels.len() {
            let below = &self.levels[level - 1];
            for (wi, word) in self.levels[level].iter().enumerate() {
                let w = word.load(Ordering::Acquire);
                for bit in 0..BITS {
                    let child = wi * BITS + bit;
                    let expect = child < below.len() && below[child].load(Ordering::Acquire) != 0;
                    if expect != (w & (1 << bit) != 0) {
                        bad.push((level, child));
                    }
                }
            }
        }
        let tail = self.num_bits % BITS;
        if tail != 0 || self.num_bits == 0 {
            let last = self.levels[0].len() - 1;
            let w = self.levels[0][last].load(Ordering::Acquire);
            if w >> tail != 0 {
                bad.push((0, self.num_bits));
            }
        }
        bad
    }

    /// One line of hex words per level, level 0 first.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (l, level) in self.levels.iter().enumerate() {
            let _ = write!(s, "L{l}:");
            for w in level.iter() {
                let _ = write!(s, " {:016x}", w.load(Ordering::Relaxed));
            }
            s.push('\n');
        }
        s
    }
}

impl std::fmt::Debug for HierBitmap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HierBitmap")
            .field("num_bits", &self.num_bits)
            .field("levels", &self.levels.len())
            .field("count", &self.count())
            .finish()
    }
}
