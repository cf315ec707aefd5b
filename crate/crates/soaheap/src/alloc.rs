//! Allocation and deallocation over the per-type block state bitmaps.
//!
//! Every block is in the global `free` bitmap or in `allocated[T]` for
//! exactly one type. Allocated blocks with a free slot are `active[T]`;
//! those filled at most n/(n+1) are also `defrag[T]` candidates. The
//! bitmaps are updated with spinning writes whose set/clear pairs may
//! arrive in either order, so they only agree with the blocks at
//! quiescent points.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crossbeam_utils::Backoff;

use crate::bitmap::HierBitmap;
use crate::error::{AllocError, AuditError};
use crate::heap::{defrag_threshold, padding_mask, Handle, Heap, Invalidation, ALL};
use crate::mix64;
use crate::registry::{Registry, TypeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OomPolicy {
    /// Fail after `oom_misses` consecutive rounds without any free or
    /// active block.
    Error,
    /// Keep retrying until memory shows up.
    Spin,
}

#[derive(Debug, Clone)]
pub struct AllocConfig {
    /// Active-block lookups before a new block is claimed.
    pub retries: usize,
    /// Defrag factor n: a source block merges into n targets.
    pub defrag_n: usize,
    pub oom: OomPolicy,
    pub oom_misses: usize,
    /// Worker threads for phase operations.
    pub workers: usize,
    /// Accumulate time spent in allocate/deallocate (see `take_timings`).
    pub timing: bool,
}

impl Default for AllocConfig {
    fn default() -> Self {
        AllocConfig {
            retries: 5,
            defrag_n: 1,
            oom: OomPolicy::Error,
            oom_misses: 3,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            timing: false,
        }
    }
}

pub(crate) struct TypeState {
    pub allocated: HierBitmap,
    pub active: HierBitmap,
    pub defrag: HierBitmap,
    pub capacity: usize,
    pub padding: u64,
    pub threshold: usize,
}

pub struct Allocator {
    registry: Arc<Registry>,
    heap: Heap,
    pub(crate) free: HierBitmap,
    states: Vec<Option<TypeState>>,
    config: AllocConfig,
    pub(crate) pool: rayon::ThreadPool,
    pub(crate) phase: AtomicU64,
    timers: [AtomicU64; 4],
}

/// Call counts and accumulated wall time of allocate/deallocate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Timings {
    pub allocs: u64,
    pub alloc_ns: u64,
    pub deallocs: u64,
    pub dealloc_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeStats {
    pub type_id: TypeId,
    pub name: String,
    pub capacity: usize,
    pub allocated_blocks: usize,
    pub active_blocks: usize,
    pub defrag_blocks: usize,
    pub used_slots: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub num_blocks: usize,
    pub free_blocks: usize,
    pub types: Vec<TypeStats>,
    pub fragmentation: f64,
}

impl Stats {
    pub fn used_slots(&self) -> usize {
        self.types.iter().map(|t| t.used_slots).sum()
    }

    pub fn of(&self, t: TypeId) -> Option<&TypeStats> {
        self.types.iter().find(|s| s.type_id == t)
    }
}

type Op<'a> = (&'a HierBitmap, usize, bool);

/// Applies bitmap updates with try-writes, round robin, until all landed.
/// Updates to the same bit keep their order. No fixed order across
/// different bits is needed, which is what keeps deallocation deadlock-free.
fn apply_pending(ops: &mut Vec<Op<'_>>) {
    let backoff = Backoff::new();
    while !ops.is_empty() {
        let mut done = vec![false; ops.len()];
        let mut progress = false;
        for i in 0..ops.len() {
            let (bm, pos, v) = ops[i];
            let blocked = ops[..i].iter().zip(&done).any(|(o, d)| !d && std::ptr::eq(o.0, bm) && o.1 == pos);
            if !blocked && bm.try_write(pos, v) {
                done[i] = true;
                progress = true;
            }
        }
        let mut it = done.iter();
        ops.retain(|_| !it.next().unwrap());
        if !progress {
            if backoff.is_completed() {
                std::thread::yield_now();
            } else {
                backoff.snooze();
            }
        }
    }
}

impl Allocator {
    pub fn new(registry: Registry, config: AllocConfig) -> Result<Allocator, AllocError> {
        let plan = *registry.plan().ok_or(AllocError::NotFrozen)?;
        if config.retries == 0 || config.defrag_n == 0 || config.workers == 0 {
            return Err(AllocError::Config("retries, defrag_n and workers must be ≥ 1".into()));
        }
        let m = plan.num_blocks;
        let mut states: Vec<Option<TypeState>> = (0..256).map(|_| None).collect();
        for t in registry.concrete_types() {
            let cap = t.block_capacity;
            states[t.type_id as usize] = Some(TypeState {
                allocated: HierBitmap::new(m),
                active: HierBitmap::new(m),
                defrag: HierBitmap::new(m),
                capacity: cap,
                padding: padding_mask(cap),
                threshold: defrag_threshold(cap, config.defrag_n),
            });
        }
        let registry = Arc::new(registry);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .thread_name(|i| format!("soaheap-worker-{i}"))
            .build()
            .map_err(|e| AllocError::Pool(e.to_string()))?;
        Ok(Allocator {
            heap: Heap::new(registry.clone(), config.defrag_n),
            registry,
            free: HierBitmap::new_full(m),
            states,
            config,
            pool,
            phase: AtomicU64::new(0),
            timers: Default::default(),
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn heap(&self) -> &Heap {
        &self.heap
    }

    pub fn config(&self) -> &AllocConfig {
        &self.config
    }

    pub fn workers(&self) -> usize {
        self.config.workers
    }

    pub fn defrag_n(&self) -> usize {
        self.config.defrag_n
    }

    pub fn num_blocks(&self) -> usize {
        self.heap.num_blocks()
    }

    pub(crate) fn state(&self, t: TypeId) -> &TypeState {
        self.states[t as usize].as_ref().unwrap_or_else(|| panic!("type {t} is not allocatable"))
    }

    pub fn free_bitmap(&self) -> &HierBitmap {
        &self.free
    }

    pub fn allocated_bitmap(&self, t: TypeId) -> &HierBitmap {
        &self.state(t).allocated
    }

    pub fn active_bitmap(&self, t: TypeId) -> &HierBitmap {
        &self.state(t).active
    }

    pub fn defrag_bitmap(&self, t: TypeId) -> &HierBitmap {
        &self.state(t).defrag
    }

    pub fn allocate(&self, t: TypeId, seed: u64) -> Result<Handle, AllocError> {
        let mut out = Vec::with_capacity(1);
        self.allocate_into(t, 1, seed, &mut out)?;
        Ok(out[0])
    }

    /// Allocates `count` objects of type `t`. On OOM every handle obtained
    /// so far is released again.
    pub fn allocate_batch(&self, t: TypeId, count: usize, seed: u64) -> Result<Vec<Handle>, AllocError> {
        let mut out = Vec::with_capacity(count);
        match self.allocate_into(t, count, seed, &mut out) {
            Ok(()) => Ok(out),
            Err(e) => {
                for h in out {
                    self.deallocate(h);
                }
                Err(e)
            }
        }
    }

    /// Appends up to `count` handles to `out`. On OOM the handles gathered
    /// before the error stay in `out`.
    pub fn allocate_into(&self, t: TypeId, count: usize, seed: u64, out: &mut Vec<Handle>) -> Result<(), AllocError> {
        if !self.config.timing {
            return self.allocate_untimed(t, count, seed, out);
        }
        let start = Instant::now();
        let before = out.len();
        let r = self.allocate_untimed(t, count, seed, out);
        self.timers[0].fetch_add((out.len() - before) as u64, Ordering::Relaxed);
        self.timers[1].fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        r
    }

    fn allocate_untimed(&self, t: TypeId, count: usize, seed: u64, out: &mut Vec<Handle>) -> Result<(), AllocError> {
        let st = self.states.get(t as usize).and_then(Option::as_ref).ok_or(AllocError::NotAllocatable(t))?;
        let start = out.len();
        let target = start + count;
        let mut rng = mix64(seed ^ ((t as u64) << 56));
        let mut misses = 0usize;
        while out.len() < target {
            let mut found = None;
            for attempt in 0..self.config.retries {
                rng = mix64(rng);
                if let Some(b) = st.active.try_find_set(rng) {
                    found = Some(b);
                    break;
                }
                if attempt + 1 < self.config.retries {
                    std::thread::yield_now();
                }
            }
            let b = match found {
                Some(b) => b,
                None => match self.free.claim_any(rng) {
                    Some(b) => {
                        self.heap.init_block(b, t);
                        st.allocated.write(b, true);
                        st.defrag.write(b, true);
                        st.active.write(b, true);
                        b
                    }
                    None => {
                        misses += 1;
                        if self.config.oom == OomPolicy::Error && misses >= self.config.oom_misses {
                            return Err(AllocError::OutOfMemory {
                                type_id: t,
                                requested: count,
                                allocated: out.len() - start,
                            });
                        }
                        std::thread::yield_now();
                        continue;
                    }
                },
            };
            let res = self.heap.reserve(b, target - out.len(), rng);
            if res.slots == 0 {
                continue;
            }
            misses = 0;
            let ts = self.state(res.tag);
            if res.crossed {
                ts.defrag.write(b, false);
            }
            if res.full {
                ts.active.write(b, false);
            }
            let mut slots = res.slots;
            if res.tag != t {
                // The block was recycled for another type under our feet.
                while slots != 0 {
                    let s = slots.trailing_zeros() as usize;
                    slots &= slots - 1;
                    self.deallocate(Handle::encode(res.tag, ts.capacity, b, s));
                }
                continue;
            }
            while slots != 0 {
                let s = slots.trailing_zeros() as usize;
                slots &= slots - 1;
                out.push(Handle::encode(t, st.capacity, b, s));
            }
        }
        Ok(())
    }

    pub fn deallocate(&self, h: Handle) {
        if self.config.timing {
            let start = Instant::now();
            self.deallocate_untimed(h);
            self.timers[2].fetch_add(1, Ordering::Relaxed);
            self.timers[3].fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        } else {
            self.deallocate_untimed(h);
        }
    }

    /// Returns the counters gathered since the last call and resets them.
    /// Always zero unless `AllocConfig::timing` is set.
    pub fn take_timings(&self) -> Timings {
        let t = |i: usize| self.timers[i].swap(0, Ordering::Relaxed);
        Timings { allocs: t(0), alloc_ns: t(1), deallocs: t(2), dealloc_ns: t(3) }
    }

    fn deallocate_untimed(&self, h: Handle) {
        debug_assert!(!h.is_null(), "deallocate(null)");
        let st = self.state(h.type_id());
        let b = h.block();
        let rel = self.heap.release(b, h.slot(), h.capacity());
        let mut ops: Vec<Op<'_>> = Vec::with_capacity(8);
        if rel.first {
            ops.push((&st.active, b, true));
        }
        if rel.leq {
            ops.push((&st.defrag, b, true));
        }
        if rel.empty {
            self.invalidate_into(b, &mut ops);
        }
        apply_pending(&mut ops);
    }

    /// Invalidates an empty block, retrying while rollbacks leave it empty.
    /// State updates are queued in `ops`. Returns whether the block was
    /// reclaimed.
    fn invalidate_into<'a>(&'a self, b: usize, ops: &mut Vec<Op<'a>>) -> bool {
        loop {
            match self.heap.try_invalidate(b) {
                Invalidation::Untouched => return false,
                Invalidation::Invalidated { tag } => {
                    let s = self.state(tag);
                    ops.push((&s.active, b, false));
                    ops.push((&s.defrag, b, false));
                    ops.push((&s.allocated, b, false));
                    ops.push((&self.free, b, true));
                    return true;
                }
                Invalidation::RolledBack { tag, before, during } => {
                    let s = self.state(tag);
                    // A release that saw the all-ones word reported FIRST
                    // and will mark the block active again.
                    if during != ALL {
                        ops.push((&s.active, b, false));
                    }
                    let thr = s.threshold as i64;
                    let fill = |w: u64| (w & !s.padding).count_ones() as i64;
                    let (f, g) = (fill(before), fill(during));
                    let flipped = (!before).count_ones() as i64;
                    // Releases during the window saw a fill inflated by
                    // `flipped`; correct the candidate bit to the real fill.
                    let delta = -((f <= thr) as i64) + ((g - flipped <= thr && thr < g) as i64);
                    match delta {
                        -1 => ops.push((&s.defrag, b, false)),
                        1 => ops.push((&s.defrag, b, true)),
                        _ => {}
                    }
                    if before & during != s.padding {
                        return false;
                    }
                }
            }
        }
    }

    /// Mean free-slot fraction over allocated blocks of all types.
    pub fn fragmentation(&self) -> f64 {
        self.stats().fragmentation
    }

    /// Fragmentation restricted to blocks of type `t`.
    pub fn fragmentation_of(&self, t: TypeId) -> f64 {
        let st = self.state(t);
        let blocks = st.allocated.indices_sorted();
        if blocks.is_empty() {
            return 0.0;
        }
        let cap = st.capacity as f64;
        let sum: f64 = blocks.iter().map(|&b| (cap - self.heap.live_slots(b).count_ones() as f64) / cap).sum();
        sum / blocks.len() as f64
    }

    /// Block and slot counters. Requires quiescence.
    pub fn stats(&self) -> Stats {
        let mut types = Vec::new();
        let mut frag_sum = 0.0;
        let mut blocks_total = 0usize;
        for d in self.registry.concrete_types() {
            let st = self.state(d.type_id);
            let blocks = st.allocated.indices_sorted();
            let mut used = 0;
            for &b in &blocks {
                let live = self.heap.live_slots(b).count_ones() as usize;
                used += live;
                frag_sum += (st.capacity - live) as f64 / st.capacity as f64;
            }
            blocks_total += blocks.len();
            types.push(TypeStats {
                type_id: d.type_id,
                name: d.name.clone(),
                capacity: st.capacity,
                allocated_blocks: blocks.len(),
                active_blocks: st.active.count(),
                defrag_blocks: st.defrag.count(),
                used_slots: used,
            });
        }
        Stats {
            num_blocks: self.num_blocks(),
            free_blocks: self.free.count(),
            types,
            fragmentation: if blocks_total == 0 { 0.0 } else { frag_sum / blocks_total as f64 },
        }
    }

    /// Quiescent invariant check: summary consistency of every bitmap and
    /// agreement of each block's state bits with its allocation word.
    pub fn audit(&self) -> Result<(), AuditError> {
        let check = |name: String, bm: &HierBitmap| {
            let bad = bm.consistency_violations();
            match bad.first() {
                None => Ok(()),
                Some(&(level, bit)) => Err(AuditError::Summary { name, count: bad.len(), level, bit }),
            }
        };
        check("free".into(), &self.free)?;
        let concrete: Vec<TypeId> = self.registry.concrete_types().map(|d| d.type_id).collect();
        for &t in &concrete {
            let st = self.state(t);
            let name = &self.registry.ty(t).name;
            check(format!("allocated[{name}]"), &st.allocated)?;
            check(format!("active[{name}]"), &st.active)?;
            check(format!("defrag[{name}]"), &st.defrag)?;
        }
        let fail = |block, what: String| Err(AuditError::Block { block, what });
        for b in 0..self.num_blocks() {
            let owners: Vec<TypeId> = concrete.iter().copied().filter(|&t| self.state(t).allocated.get(b)).collect();
            let is_free = self.free.get(b);
            for &t in &concrete {
                let st = self.state(t);
                if st.defrag.get(b) && !st.active.get(b) {
                    return fail(b, format!("defrag[{t}] without active[{t}]"));
                }
                if st.active.get(b) && !st.allocated.get(b) {
                    return fail(b, format!("active[{t}] without allocated[{t}]"));
                }
            }
            match (is_free, owners.as_slice()) {
                (true, []) => {
                    if self.heap.alloc_bitmap(b) != ALL {
                        return fail(b, "free block is not invalidated".into());
                    }
                }
                (false, [t]) => {
                    let st = self.state(*t);
                    if self.heap.tag(b) != *t {
                        return fail(b, format!("tag {} but allocated for {t}", self.heap.tag(b)));
                    }
                    let word = self.heap.alloc_bitmap(b);
                    if word & st.padding != st.padding {
                        return fail(b, "padding bits cleared".into());
                    }
                    let fill = (word & !st.padding).count_ones() as usize;
                    if fill == 0 {
                        return fail(b, "allocated block is empty".into());
                    }
                    if st.active.get(b) != (fill < st.capacity) {
                        return fail(b, format!("active={} with fill {fill}/{}", st.active.get(b), st.capacity));
                    }
                    if st.defrag.get(b) != (fill <= st.threshold) {
                        return fail(b, format!("defrag={} with fill {fill}/{}", st.defrag.get(b), st.capacity));
                    }
                }
                _ => return fail(b, format!("free={is_free}, allocated for {owners:?}")),
            }
        }
        Ok(())
    }

    /// Checks that every reference field of every live object is null or
    /// names a live object of a matching type. Requires quiescence.
    pub fn audit_references(&self) -> Result<(), AuditError> {
        for d in self.registry.concrete_types() {
            let refs: Vec<(usize, TypeId)> =
                d.fields.iter().filter_map(|f| f.reference_target().map(|t| (f.index, t))).collect();
            if refs.is_empty() {
                continue;
            }
            for h in self.live_handles(d.type_id) {
                for &(field, target) in &refs {
                    let r: Handle = self.heap.get(h, field);
                    if r.is_null() {
                        continue;
                    }
                    let t = r.type_id();
                    let ok = self.registry.get(t).is_some_and(|td| !td.is_abstract)
                        && self.registry.is_subtype(t, target)
                        && r.capacity() == self.state(t).capacity
                        && r.block() < self.num_blocks()
                        && self.state(t).allocated.get(r.block())
                        && self.heap.tag(r.block()) == t
                        && self.heap.live_slots(r.block()) & (1 << r.slot()) != 0;
                    if !ok {
                        return Err(AuditError::Dangling { holder: d.type_id, field, handle: r.bits() });
                    }
                }
            }
        }
        Ok(())
    }

    /// Debug dump of every state bitmap, one line per level.
    pub fn dump_bitmaps(&self) -> String {
        let mut s = format!("free\n{}", self.free.dump());
        for d in self.registry.concrete_types() {
            let st = self.state(d.type_id);
            s.push_str(&format!("allocated[{}]\n{}", d.name, st.allocated.dump()));
            s.push_str(&format!("active[{}]\n{}", d.name, st.active.dump()));
            s.push_str(&format!("defrag[{}]\n{}", d.name, st.defrag.dump()));
        }
        s
    }

    /// Per-block CSV: index, type tag (0 if free), fill level.
    pub fn heap_csv(&self) -> String {
        self.heap.snapshot_csv(|b| !self.free.get(b))
    }

    /// Every live handle, by scanning allocated blocks. Requires quiescence.
    pub fn live_handles(&self, t: TypeId) -> Vec<Handle> {
        let st = self.state(t);
        let mut out = Vec::new();
        for b in st.allocated.indices_sorted() {
            let mut live = self.heap.live_slots(b);
            while live != 0 {
                out.push(Handle::encode(t, st.capacity, b, live.trailing_zeros() as usize));
                live &= live - 1;
            }
        }
        out
    }

    pub(crate) fn next_phase(&self) -> u64 {
        self.phase.fetch_add(1, Ordering::Relaxed)
    }
}
