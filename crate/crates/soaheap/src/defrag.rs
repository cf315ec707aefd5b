//! In-place compaction by merging candidate blocks.
//!
//! A pass takes the sorted candidates R of one type (blocks at most
//! n/(n+1) full). The first B = r/(n+1) are sources; source i empties into
//! targets R[i + k·B] for k in 1..=n. Objects are copied first, then each
//! source's data segment is overwritten with forwarding handles, then every
//! reference field that may point at the type is rewritten, and finally
//! the block states are updated. All of it requires an exclusive phase.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::bitmap::nth_set_bit;
use crate::heap::{Handle, ALL};
use crate::registry::TypeId;
use crate::Allocator;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefragPlan {
    pub type_id: TypeId,
    pub n: usize,
    /// Sorted candidate blocks.
    pub r: Vec<usize>,
    /// Number of source blocks.
    pub b: usize,
}

impl DefragPlan {
    /// Plans a pass over `candidates` (sorted), or `None` if fewer than
    /// n+1 candidates exist.
    pub fn from_candidates(type_id: TypeId, n: usize, candidates: Vec<usize>) -> Option<DefragPlan> {
        debug_assert!(candidates.windows(2).all(|w| w[0] < w[1]));
        if candidates.len() < n + 1 {
            return None;
        }
        let b = candidates.len() / (n + 1);
        Some(DefragPlan { type_id, n, r: candidates, b })
    }

    pub fn sources(&self) -> &[usize] {
        &self.r[..self.b]
    }

    pub fn targets(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (1..=self.n).map(move |k| self.r[i + k * self.b])
    }

    /// First block index that is not a source.
    pub fn source_limit(&self) -> usize {
        self.r[self.b]
    }

    pub fn is_source(&self, block: usize) -> bool {
        self.sources().binary_search(&block).is_ok()
    }
}

/// Where a pass moved objects.
#[derive(Debug, Clone, Default)]
pub struct Relocation {
    /// Per source: (old slot, new handle).
    pub moves: Vec<Vec<(usize, Handle)>>,
    /// Target block → mask of slots that received objects.
    pub filled: Vec<(usize, u64)>,
}

impl Relocation {
    pub fn moved(&self) -> usize {
        self.moves.iter().map(Vec::len).sum()
    }

    fn filled_mask(&self, block: usize) -> u64 {
        self.filled.binary_search_by_key(&block, |&(b, _)| b).map_or(0, |i| self.filled[i].1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassRecord {
    pub type_id: TypeId,
    pub candidates_before: usize,
    pub candidates_after: usize,
    pub moved: usize,
    pub rewritten: usize,
    pub copy_time: Duration,
    pub rewrite_time: Duration,
    pub duration: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DefragReport {
    pub passes: Vec<PassRecord>,
}

impl DefragReport {
    pub fn moved(&self) -> usize {
        self.passes.iter().map(|p| p.moved).sum()
    }

    pub fn rewritten(&self) -> usize {
        self.passes.iter().map(|p| p.rewritten).sum()
    }
}

/// Candidate-count threshold for the "after massive deallocations" policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum K2 {
    Absolute(usize),
    /// Fraction of the heap's block count.
    Fraction(f64),
}

/// Continuous estimate of the passes needed to go from `d` candidates down
/// to `k1`. Each pass frees floor(c/(n+1)) sources, so rounding can push
/// the real count past it when k1 > 0.
pub fn pass_bound(d: usize, k1: usize, n: usize) -> usize {
    let k = k1.max(1);
    if d <= k {
        return 0;
    }
    let ratio = (d as f64) / (k as f64);
    let base = (n as f64 + 1.0) / n as f64;
    (ratio.ln() / base.ln() - 1e-9).ceil() as usize
}

impl Allocator {
    pub fn plan_pass(&self, t: TypeId) -> Option<DefragPlan> {
        let plan = DefragPlan::from_candidates(t, self.defrag_n(), self.state(t).defrag.indices_sorted())?;
        if cfg!(debug_assertions) {
            let st = self.state(t);
            for &b in &plan.r {
                let fill = self.heap().live_slots(b).count_ones() as usize;
                debug_assert!(fill <= st.threshold, "candidate {b} has fill {fill}");
            }
        }
        Some(plan)
    }

    /// Copies every live object of each source into free slots of its
    /// targets, in order: the k-th live object goes to the k-th free slot
    /// counted across the targets. Target allocation words are untouched.
    pub fn copy_objects(&self, plan: &DefragPlan) -> Relocation {
        let heap = self.heap();
        let cap = self.state(plan.type_id).capacity;
        let t = plan.type_id;
        let moves: Vec<Vec<(usize, Handle)>> = self.install(|| {
            (0..plan.b)
                .into_par_iter()
                .map(|i| {
                    let src = plan.r[i];
                    let targets: Vec<(usize, u64)> = plan.targets(i).map(|tb| (tb, !heap.alloc_bitmap(tb))).collect();
                    let mut live = heap.live_slots(src);
                    let mut out = Vec::with_capacity(live.count_ones() as usize);
                    let mut s_loc = 0u32;
                    while live != 0 {
                        let s_oid = live.trailing_zeros() as usize;
                        live &= live - 1;
                        let mut t_loc = s_loc;
                        let mut dest = None;
                        for &(tb, free) in &targets {
                            let fc = free.count_ones();
                            if t_loc < fc {
                                dest = Some((tb, nth_set_bit(free, t_loc).unwrap() as usize));
                                break;
                            }
                            t_loc -= fc;
                        }
                        let (tb, t_oid) = dest.expect("targets have room for every source object");
                        let new = Handle::encode(t, cap, tb, t_oid);
                        heap.copy_object(Handle::encode(t, cap, src, s_oid), new);
                        out.push((s_oid, new));
                        s_loc += 1;
                    }
                    out
                })
                .collect()
        });
        let mut filled: Vec<(usize, u64)> = Vec::new();
        for m in &moves {
            for &(_, h) in m {
                match filled.binary_search_by_key(&h.block(), |&(b, _)| b) {
                    Ok(i) => filled[i].1 |= 1 << h.slot(),
                    Err(i) => filled.insert(i, (h.block(), 1 << h.slot())),
                }
            }
        }
        Relocation { moves, filled }
    }

    /// Overwrites each source slot that held an object with its new handle.
    pub fn place_forwarding(&self, plan: &DefragPlan, reloc: &Relocation) {
        for (i, m) in reloc.moves.iter().enumerate() {
            let src = plan.r[i];
            for &(slot, h) in m {
                self.heap().set_forwarding(src, slot, h);
            }
        }
    }

    /// Follows a forwarding entry if `h` points into a source block.
    pub fn rewrite_handle(&self, h: Handle, plan: &DefragPlan) -> Handle {
        if h.is_null() || h.type_id() != plan.type_id {
            return h;
        }
        let b = h.block();
        if b < plan.source_limit() && self.state(plan.type_id).defrag.get(b) {
            self.heap().forwarding(b, h.slot())
        } else {
            h
        }
    }

    /// Rewrites every stored reference that may point at the planned type.
    /// Returns the number of fields changed.
    pub fn rewrite_heap(&self, plan: &DefragPlan, reloc: &Relocation) -> usize {
        let scan = self.registry().reference_bearing_scan_set(plan.type_id).expect("planned type is registered");
        let heap = self.heap();
        let mut total = 0;
        for (holder, field) in scan {
            let st = self.state(holder);
            let blocks = st.allocated.indices_sorted();
            let same = holder == plan.type_id;
            total += self.install(|| {
                blocks
                    .par_iter()
                    .map(|&b| {
                        if same && plan.is_source(b) {
                            return 0;
                        }
                        let mut slots = heap.live_slots(b);
                        if same {
                            slots |= reloc.filled_mask(b);
                        }
                        let mut n = 0;
                        while slots != 0 {
                            let h = Handle::encode(holder, st.capacity, b, slots.trailing_zeros() as usize);
                            slots &= slots - 1;
                            let cur = heap.get_raw::<Handle>(h, field);
                            let new = self.rewrite_handle(cur, plan);
                            if new != cur {
                                heap.set_raw(h, field, new);
                                n += 1;
                            }
                        }
                        n
                    })
                    .sum::<usize>()
            });
        }
        total
    }

    /// Publishes the moved objects in the targets and frees the sources.
    pub fn finalize_pass(&self, plan: &DefragPlan, reloc: &Relocation) {
        let st = self.state(plan.type_id);
        let heap = self.heap();
        for &(b, mask) in &reloc.filled {
            let word = heap.alloc_bitmap(b);
            debug_assert_eq!(word & mask, 0);
            let after = word | mask;
            heap.store_alloc_bitmap(b, after);
            let fill = (after & !st.padding).count_ones() as usize;
            if fill > st.threshold {
                st.defrag.write(b, false);
            }
            if after == ALL {
                st.active.write(b, false);
            }
        }
        for &b in plan.sources() {
            heap.store_alloc_bitmap(b, ALL);
            st.defrag.write(b, false);
            st.active.write(b, false);
            st.allocated.write(b, false);
            self.free.write(b, true);
        }
    }

    /// One full pass. Returns `None` if no plan exists.
    pub fn defrag_pass(&self, t: TypeId) -> Option<PassRecord> {
        let start = Instant::now();
        let plan = self.plan_pass(t)?;
        let before = plan.r.len();
        let reloc = self.copy_objects(&plan);
        self.place_forwarding(&plan, &reloc);
        let copy_time = start.elapsed();
        let rw_start = Instant::now();
        let rewritten = self.rewrite_heap(&plan, &reloc);
        let rewrite_time = rw_start.elapsed();
        self.finalize_pass(&plan, &reloc);
        Some(PassRecord {
            type_id: t,
            candidates_before: before,
            candidates_after: self.state(t).defrag.count(),
            moved: reloc.moved(),
            rewritten,
            copy_time,
            rewrite_time,
            duration: start.elapsed(),
        })
    }

    /// Runs passes while more than `k1` candidates remain and a plan exists.
    pub fn defragment(&self, t: TypeId, k1: usize) -> DefragReport {
        let mut report = DefragReport::default();
        while self.state(t).defrag.count() > k1 {
            match self.defrag_pass(t) {
                Some(p) => report.passes.push(p),
                None => break,
            }
        }
        report
    }

    pub fn candidate_count(&self, t: TypeId) -> usize {
        self.state(t).defrag.count()
    }

    /// True once the candidate count reaches k2·n/(n+1).
    pub fn should_defrag(&self, t: TypeId, k2: K2) -> bool {
        let n = self.defrag_n() as f64;
        let k2 = match k2 {
            K2::Absolute(k) => k as f64,
            K2::Fraction(f) => f * self.num_blocks() as f64,
        };
        let c = self.candidate_count(t);
        c > 0 && c as f64 >= k2 * n / (n + 1.0)
    }
}
