//! Parallel do-all over live objects.
//!
//! Each pass snapshots the allocation word of every allocated block into
//! its iteration word and builds R, the array of allocated block indices.
//! Worker `tid` of `n` then visits the global object indices
//! `g = tid + k·n`, i.e. slot `g mod N_T` of block `R[g / N_T]`, and calls
//! the operation wherever the snapshot has that slot set. Objects created
//! during the pass are invisible to it.

use std::cell::Cell;
use std::sync::Mutex;

use crate::error::AllocError;
use crate::heap::Handle;
use crate::registry::TypeId;
use crate::{mix64, Allocator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssignmentParams {
    /// Number of allocated blocks (length of R).
    pub r: usize,
    /// Block capacity N_T.
    pub capacity: usize,
    pub n_threads: usize,
}

/// `(index into R, slot)` pairs assigned to worker `tid`.
pub fn thread_assignment(tid: usize, p: AssignmentParams) -> impl Iterator<Item = (usize, usize)> {
    debug_assert!(tid < p.n_threads);
    let total = p.r * p.capacity;
    let num = if total > tid { (total - tid).div_ceil(p.n_threads) } else { 0 };
    (0..num).map(move |k| {
        let g = tid + k * p.n_threads;
        (g / p.capacity, g % p.capacity)
    })
}

/// Per-worker context handed to operations.
pub struct WorkerCtx {
    pub tid: usize,
    pub n_threads: usize,
    seed: Cell<u64>,
}

impl WorkerCtx {
    pub fn new(tid: usize, n_threads: usize, seed: u64) -> WorkerCtx {
        WorkerCtx { tid, n_threads, seed: Cell::new(mix64(seed ^ tid as u64)) }
    }

    /// Fresh allocation seed; deterministic per worker and phase.
    pub fn seed(&self) -> u64 {
        let s = mix64(self.seed.get());
        self.seed.set(s);
        s
    }
}

impl Allocator {
    fn pass_types(&self, t: TypeId, include_subtypes: bool) -> Vec<TypeId> {
        if include_subtypes {
            self.registry().concrete_subtypes(t)
        } else if self.registry().ty(t).is_abstract {
            Vec::new()
        } else {
            vec![t]
        }
    }

    /// Copies allocation words into iteration words for every allocated
    /// block of the selected types and returns R per type.
    pub fn snapshot_iteration_bitmaps(&self, t: TypeId, include_subtypes: bool) -> Vec<(TypeId, Vec<usize>)> {
        self.pass_types(t, include_subtypes)
            .into_iter()
            .map(|ty| {
                let blocks = self.pool.install(|| self.state(ty).allocated.indices());
                for &b in &blocks {
                    self.heap().snapshot(b);
                }
                (ty, blocks)
            })
            .collect()
    }

    pub fn parallel_do<F>(&self, t: TypeId, include_subtypes: bool, op: F)
    where
        F: Fn(&WorkerCtx, Handle) + Sync,
    {
        let _ = self.try_parallel_do(t, include_subtypes, |c, h| {
            op(c, h);
            Ok::<(), std::convert::Infallible>(())
        });
    }

    /// Like `parallel_do`; a worker stops at its first error and the first
    /// error recorded is returned once all workers joined.
    pub fn try_parallel_do<E, F>(&self, t: TypeId, include_subtypes: bool, op: F) -> Result<(), E>
    where
        E: Send,
        F: Fn(&WorkerCtx, Handle) -> Result<(), E> + Sync,
    {
        let passes = self.snapshot_iteration_bitmaps(t, include_subtypes);
        let first_err: Mutex<Option<E>> = Mutex::new(None);
        for (ty, blocks) in passes {
            if blocks.is_empty() {
                continue;
            }
            let cap = self.registry().capacity(ty);
            let phase = self.next_phase();
            self.pool.broadcast(|bc| {
                let ctx = WorkerCtx::new(bc.index(), bc.num_threads(), phase);
                let params = AssignmentParams { r: blocks.len(), capacity: cap, n_threads: bc.num_threads() };
                for (ri, slot) in thread_assignment(bc.index(), params) {
                    let b = blocks[ri];
                    if self.heap().iter_bitmap(b) & (1 << slot) == 0 {
                        continue;
                    }
                    if let Err(e) = op(&ctx, Handle::encode(ty, cap, b, slot)) {
                        first_err.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
            if first_err.lock().unwrap().is_some() {
                break;
            }
        }
        match first_err.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Folds `op` over every object; per-worker partial results are
    /// combined in worker order.
    pub fn parallel_do_and_reduce<V, F, R>(&self, t: TypeId, include_subtypes: bool, op: F, reduce: R, identity: V) -> V
    where
        V: Clone + Send + Sync,
        F: Fn(&WorkerCtx, Handle) -> V + Sync,
        R: Fn(V, V) -> V + Sync,
    {
        let passes = self.snapshot_iteration_bitmaps(t, include_subtypes);
        let mut acc = identity.clone();
        for (ty, blocks) in passes {
            if blocks.is_empty() {
                continue;
            }
            let cap = self.registry().capacity(ty);
            let phase = self.next_phase();
            let partials = self.pool.broadcast(|bc| {
                let ctx = WorkerCtx::new(bc.index(), bc.num_threads(), phase);
                let params = AssignmentParams { r: blocks.len(), capacity: cap, n_threads: bc.num_threads() };
                let mut local = identity.clone();
                for (ri, slot) in thread_assignment(bc.index(), params) {
                    let b = blocks[ri];
                    if self.heap().iter_bitmap(b) & (1 << slot) != 0 {
                        local = reduce(local, op(&ctx, Handle::encode(ty, cap, b, slot)));
                    }
                }
                local
            });
            for p in partials {
                acc = reduce(acc, p);
            }
        }
        acc
    }

    /// Creates `count` objects in batches of up to 64 and calls `ctor` with
    /// each object's index in `0..count`.
    pub fn parallel_new<F>(&self, t: TypeId, count: usize, ctor: F) -> Result<(), AllocError>
    where
        F: Fn(&WorkerCtx, Handle, usize) + Sync,
    {
        if count == 0 {
            return Ok(());
        }
        if self.registry().get(t).is_none_or(|d| d.is_abstract) {
            return Err(AllocError::NotAllocatable(t));
        }
        let next = std::sync::atomic::AtomicUsize::new(0);
        let first_err: Mutex<Option<AllocError>> = Mutex::new(None);
        let phase = self.next_phase();
        self.pool.broadcast(|bc| {
            let ctx = WorkerCtx::new(bc.index(), bc.num_threads(), phase);
            loop {
                let start = next.fetch_add(64, std::sync::atomic::Ordering::Relaxed);
                if start >= count {
                    break;
                }
                let k = (count - start).min(64);
                match self.allocate_batch(t, k, ctx.seed()) {
                    Ok(hs) => {
                        for (i, h) in hs.into_iter().enumerate() {
                            ctor(&ctx, h, start + i);
                        }
                    }
                    Err(e) => {
                        first_err.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            }
        });
        match first_err.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Sequential walk over every object currently marked allocated. Meant
    /// for use inside a phase in which no object of the walked types is
    /// deleted; objects created during the enclosing phase may or may not
    /// be seen.
    pub fn device_do<F>(&self, t: TypeId, include_subtypes: bool, mut f: F)
    where
        F: FnMut(Handle),
    {
        for ty in self.pass_types(t, include_subtypes) {
            let st = self.state(ty);
            for wi in 0..st.allocated.num_words() {
                let mut w = st.allocated.word(wi);
                while w != 0 {
                    let b = wi * 64 + w.trailing_zeros() as usize;
                    w &= w - 1;
                    if self.heap().tag(b) != ty {
                        continue;
                    }
                    let mut live = self.heap().alloc_bitmap(b) & !st.padding;
                    while live != 0 {
                        f(Handle::encode(ty, st.capacity, b, live.trailing_zeros() as usize));
                        live &= live - 1;
                    }
                }
            }
        }
    }

    /// Runs `f` once on every worker thread of the pool.
    pub fn broadcast<R: Send, F: Fn(&WorkerCtx) -> R + Sync>(&self, f: F) -> Vec<R> {
        let phase = self.next_phase();
        self.pool.broadcast(|bc| f(&WorkerCtx::new(bc.index(), bc.num_threads(), phase)))
    }

    /// Runs `f` inside the worker pool (for rayon parallel iterators).
    pub fn install<R: Send, F: FnOnce() -> R + Send>(&self, f: F) -> R {
        self.pool.install(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collect(tid: usize, r: usize, cap: usize, n: usize) -> Vec<(usize, usize)> {
        thread_assignment(tid, AssignmentParams { r, capacity: cap, n_threads: n }).collect()
    }

    #[test]
    fn wide_grid_example() {
        assert_eq!(collect(0, 6, 64, 256), vec![(0, 0), (4, 0)]);
        assert_eq!(collect(255, 6, 64, 256), vec![(3, 63)]);
        assert!(collect(7, 0, 64, 8).is_empty());
        assert!(collect(200, 3, 64, 256).is_empty());
    }
}
