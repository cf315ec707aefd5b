//! Block storage, slot reservation and field access.
//!
//! Every block is a 24-byte header (allocation word, iteration word, type
//! tag) followed by a data segment in SOA layout. All access goes through
//! atomics of the element width, so concurrent field reads and writes from
//! worker threads are well-defined; ordering between them is the
//! application's business.

use std::cell::UnsafeCell;
use std::ops::Range;
use std::sync::atomic::{
    AtomicI16, AtomicI32, AtomicI64, AtomicI8, AtomicU16, AtomicU32, AtomicU64, AtomicU8, Ordering,
};
use std::sync::Arc;

use crate::registry::{Registry, TypeId, HEADER_BYTES};

pub const ALL: u64 = u64::MAX;
const RELAXED: Ordering = Ordering::Relaxed;

/// Bits `capacity..64` set; these slots never hold objects.
pub fn padding_mask(capacity: usize) -> u64 {
    if capacity >= 64 {
        0
    } else {
        ALL << capacity
    }
}

/// Highest fill level at which a block of `capacity` is a defrag candidate.
pub fn defrag_threshold(capacity: usize, n: usize) -> usize {
    capacity * n / (n + 1)
}

/// Opaque object reference: type id (bits 56..63), capacity & 63
/// (bits 50..55), block index (bits 6..41), slot (bits 0..5). Zero is null.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[repr(transparent)]
pub struct Handle(u64);

impl Handle {
    pub const NULL: Handle = Handle(0);
    pub const MAX_BLOCKS: usize = 1 << 36;

    pub fn encode(type_id: TypeId, capacity: usize, block: usize, slot: usize) -> Handle {
        debug_assert!((1..=64).contains(&capacity));
        debug_assert!(block < Self::MAX_BLOCKS);
        debug_assert!(slot < 64);
        Handle((type_id as u64) << 56 | ((capacity as u64) & 63) << 50 | (block as u64) << 6 | slot as u64)
    }

    pub fn decode(self) -> (TypeId, usize, usize, usize) {
        if self.is_null() {
            return (0, 0, 0, 0);
        }
        (self.type_id(), self.capacity(), self.block(), self.slot())
    }

    pub fn from_bits(bits: u64) -> Handle {
        Handle(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    pub fn type_id(self) -> TypeId {
        (self.0 >> 56) as TypeId
    }

    pub fn capacity(self) -> usize {
        match (self.0 >> 50) & 63 {
            0 => 64,
            c => c as usize,
        }
    }

    pub fn block(self) -> usize {
        ((self.0 >> 6) & ((1 << 36) - 1)) as usize
    }

    pub fn slot(self) -> usize {
        (self.0 & 63) as usize
    }
}

impl std::fmt::Debug for Handle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_null() {
            return write!(f, "Handle(null)");
        }
        write!(f, "Handle(t{} b{} s{} c{})", self.type_id(), self.block(), self.slot(), self.capacity())
    }
}

/// Plain values storable in a field element.
pub trait Scalar: Copy + Send + Sync + 'static {
    const SIZE: usize;
    /// # Safety
    /// `p` must be valid and aligned to `SIZE` bytes.
    unsafe fn load(p: *mut u8) -> Self;
    /// # Safety
    /// `p` must be valid and aligned to `SIZE` bytes.
    unsafe fn store(p: *mut u8, v: Self);
}

macro_rules! int_scalar {
    ($t:ty, $a:ty) => {
        impl Scalar for $t {
            const SIZE: usize = std::mem::size_of::<$t>();
            unsafe fn load(p: *mut u8) -> Self {
                <$a>::from_ptr(p.cast()).load(RELAXED)
            }
            unsafe fn store(p: *mut u8, v: Self) {
                <$a>::from_ptr(p.cast()).store(v, RELAXED)
            }
        }
    };
}

int_scalar!(u8, AtomicU8);
int_scalar!(i8, AtomicI8);
int_scalar!(u16, AtomicU16);
int_scalar!(i16, AtomicI16);
int_scalar!(u32, AtomicU32);
int_scalar!(i32, AtomicI32);
int_scalar!(u64, AtomicU64);
int_scalar!(i64, AtomicI64);

impl Scalar for f32 {
    const SIZE: usize = 4;
    unsafe fn load(p: *mut u8) -> Self {
        f32::from_bits(u32::load(p))
    }
    unsafe fn store(p: *mut u8, v: Self) {
        u32::store(p, v.to_bits())
    }
}

impl Scalar for f64 {
    const SIZE: usize = 8;
    unsafe fn load(p: *mut u8) -> Self {
        f64::from_bits(u64::load(p))
    }
    unsafe fn store(p: *mut u8, v: Self) {
        u64::store(p, v.to_bits())
    }
}

impl Scalar for bool {
    const SIZE: usize = 1;
    unsafe fn load(p: *mut u8) -> Self {
        u8::load(p) != 0
    }
    unsafe fn store(p: *mut u8, v: Self) {
        u8::store(p, v as u8)
    }
}

impl Scalar for Handle {
    const SIZE: usize = 8;
    unsafe fn load(p: *mut u8) -> Self {
        Handle(u64::load(p))
    }
    unsafe fn store(p: *mut u8, v: Self) {
        u64::store(p, v.0)
    }
}

/// Result of a reservation attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotOutcome {
    /// Newly reserved slots; empty on failure.
    pub slots: u64,
    /// The block has no free slot left.
    pub full: bool,
    /// The fill level rose above the defrag threshold.
    pub crossed: bool,
    /// Type tag read after the reservation landed.
    pub tag: TypeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Regular,
    Full,
    Leq,
    Fail,
}

impl SlotOutcome {
    pub fn state(&self) -> SlotState {
        if self.slots == 0 {
            SlotState::Fail
        } else if self.full {
            SlotState::Full
        } else if self.crossed {
            SlotState::Leq
        } else {
            SlotState::Regular
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReleaseOutcome {
    /// The block had no free slot before this release.
    pub first: bool,
    /// The block holds no object after this release.
    pub empty: bool,
    /// The fill level dropped to the defrag threshold.
    pub leq: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseState {
    First,
    Empty,
    Leq,
    Regular,
}

impl ReleaseOutcome {
    pub fn state(&self) -> ReleaseState {
        if self.first {
            ReleaseState::First
        } else if self.empty {
            ReleaseState::Empty
        } else if self.leq {
            ReleaseState::Leq
        } else {
            ReleaseState::Regular
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invalidation {
    /// Every bit was already set (full or already invalidated); nothing done.
    Untouched,
    /// The block was empty and is now all-ones.
    Invalidated { tag: TypeId },
    /// Live objects appeared; the bits this call set were cleared again.
    /// `before` is the word before invalidation, `during` the word the
    /// rollback replaced.
    RolledBack { tag: TypeId, before: u64, during: u64 },
}

/// Capacity and, per field, (offset of slot 0, bytes per slot, element
/// size) at that capacity.
type FieldTable = (usize, Vec<(usize, usize, usize)>);

pub struct Heap {
    registry: Arc<Registry>,
    words: Box<[UnsafeCell<u64>]>,
    block_words: usize,
    num_blocks: usize,
    data_bytes: usize,
    threshold_n: usize,
    /// Indexed by type id.
    layouts: Vec<FieldTable>,
}

// SAFETY: every access to `words` goes through atomics.
unsafe impl Sync for Heap {}
unsafe impl Send for Heap {}

impl Heap {
    /// `registry` must be frozen. `n` is the defrag factor used for the
    /// candidate threshold.
    pub fn new(registry: Arc<Registry>, n: usize) -> Heap {
        let plan = *registry.plan().expect("registry must be frozen");
        let block_words = plan.block_bytes / 8;
        let words: Box<[UnsafeCell<u64>]> = (0..block_words * plan.num_blocks).map(|_| UnsafeCell::new(0)).collect();
        let mut layouts = vec![(0, Vec::new())];
        for d in registry.types() {
            let cap = d.block_capacity;
            let fields = if cap == 0 {
                Vec::new()
            } else {
                d.fields
                    .iter()
                    .map(|f| (registry.field_location(d.type_id, f.index, cap, 0), f.bytes(), f.size()))
                    .collect()
            };
            layouts.push((cap, fields));
        }
        let heap = Heap {
            registry,
            words,
            block_words,
            num_blocks: plan.num_blocks,
            data_bytes: plan.data_bytes,
            threshold_n: n.max(1),
            layouts,
        };
        for b in 0..heap.num_blocks {
            heap.alloc_word(b).store(ALL, RELAXED);
        }
        heap
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn data_bytes(&self) -> usize {
        self.data_bytes
    }

    pub fn defrag_n(&self) -> usize {
        self.threshold_n
    }

    fn block_ptr(&self, b: usize) -> *mut u64 {
        debug_assert!(b < self.num_blocks, "block {b} out of range");
        self.words[b * self.block_words].get()
    }

    pub fn alloc_word(&self, b: usize) -> &AtomicU64 {
        // SAFETY: in bounds, 8-aligned, only accessed atomically.
        unsafe { AtomicU64::from_ptr(self.block_ptr(b)) }
    }

    pub fn iter_word(&self, b: usize) -> &AtomicU64 {
        unsafe { AtomicU64::from_ptr(self.block_ptr(b).add(1)) }
    }

    fn tag_cell(&self, b: usize) -> &AtomicU8 {
        unsafe { AtomicU8::from_ptr(self.block_ptr(b).add(2).cast()) }
    }

    pub fn tag(&self, b: usize) -> TypeId {
        self.tag_cell(b).load(Ordering::Acquire)
    }

    pub fn alloc_bitmap(&self, b: usize) -> u64 {
        self.alloc_word(b).load(Ordering::Acquire)
    }

    pub fn iter_bitmap(&self, b: usize) -> u64 {
        self.iter_word(b).load(Ordering::Acquire)
    }

    fn data_ptr(&self, b: usize) -> *mut u8 {
        unsafe { self.block_ptr(b).cast::<u8>().add(HEADER_BYTES) }
    }

    fn capacity_of(&self, t: TypeId) -> usize {
        self.registry.capacity(t)
    }

    /// Prepares a claimed free block for type `t`. The tag is published
    /// before the allocation word, so anyone who reserves a slot afterwards
    /// also sees the new tag.
    pub fn init_block(&self, b: usize, t: TypeId) {
        let cap = self.capacity_of(t);
        debug_assert!(cap > 0, "type {t} is not allocatable");
        self.tag_cell(b).store(t, Ordering::SeqCst);
        self.iter_word(b).store(0, RELAXED);
        self.alloc_word(b).store(padding_mask(cap), Ordering::SeqCst);
    }

    /// Reserves up to `count` free slots of block `b`.
    pub fn reserve(&self, b: usize, count: usize, seed: u64) -> SlotOutcome {
        let word = self.alloc_word(b);
        let fail = SlotOutcome { slots: 0, full: false, crossed: false, tag: 0 };
        if count == 0 {
            return fail;
        }
        let rot = (seed & 63) as u32;
        loop {
            let cur = word.load(Ordering::Acquire);
            if cur == ALL {
                return fail;
            }
            let free = (!cur).rotate_right(rot);
            let mask = crate::bitmap::lowest_set_bits(free, count.min(64) as u32).rotate_left(rot);
            let before = word.fetch_or(mask, Ordering::AcqRel);
            let newly = mask & !before;
            if newly == 0 {
                continue;
            }
            let after = before | mask;
            let tag = self.tag(b);
            let cap = self.capacity_of(tag);
            let pad = padding_mask(cap);
            let thr = defrag_threshold(cap, self.threshold_n) as u32;
            let fill_before = (before & !pad).count_ones();
            let fill_after = (after & !pad).count_ones();
            return SlotOutcome {
                slots: newly,
                full: after == ALL,
                crossed: fill_before <= thr && thr < fill_after,
                tag,
            };
        }
    }

    /// Frees `slot` of block `b`, whose objects have capacity `capacity`.
    pub fn release(&self, b: usize, slot: usize, capacity: usize) -> ReleaseOutcome {
        let bit = 1u64 << slot;
        let before = self.alloc_word(b).fetch_and(!bit, Ordering::AcqRel);
        debug_assert!(before & bit != 0, "double free of block {b} slot {slot}");
        let pad = padding_mask(capacity);
        let thr = defrag_threshold(capacity, self.threshold_n) as u32;
        let after = before & !bit;
        ReleaseOutcome { first: before == ALL, empty: after == pad, leq: (before & !pad).count_ones() == thr + 1 }
    }

    /// Single invalidation attempt on a block that was observed empty.
    pub fn try_invalidate(&self, b: usize) -> Invalidation {
        let word = self.alloc_word(b);
        let before = word.fetch_or(ALL, Ordering::AcqRel);
        if before == ALL {
            return Invalidation::Untouched;
        }
        let tag = self.tag(b);
        if before == padding_mask(self.capacity_of(tag)) {
            return Invalidation::Invalidated { tag };
        }
        let during = word.fetch_and(before, Ordering::AcqRel);
        Invalidation::RolledBack { tag, before, during }
    }

    /// Copies the allocation word into the iteration word.
    pub fn snapshot(&self, b: usize) {
        self.iter_word(b).store(self.alloc_bitmap(b), Ordering::Release);
    }

    /// Live slots of an allocated block (padding masked out).
    pub fn live_slots(&self, b: usize) -> u64 {
        self.alloc_bitmap(b) & !padding_mask(self.capacity_of(self.tag(b)))
    }

    /// Byte range of a field element relative to the block's data segment.
    pub fn field_bytes(&self, h: Handle, field: usize) -> Range<usize> {
        let ty = self.registry.ty(h.type_id());
        let start = self.registry.field_location(h.type_id(), field, h.capacity(), h.slot());
        start..start + ty.fields[field].bytes()
    }

    #[inline]
    fn elem_ptr<S: Scalar>(&self, h: Handle, field: usize, i: usize) -> *mut u8 {
        debug_assert!(!h.is_null(), "null handle");
        debug_assert!(self.alloc_bitmap(h.block()) & (1 << h.slot()) != 0, "access through dead handle {h:?}");
        self.elem_ptr_unchecked::<S>(h, field, i)
    }

    #[inline]
    fn elem_ptr_unchecked<S: Scalar>(&self, h: Handle, field: usize, i: usize) -> *mut u8 {
        let (cap, fields) = &self.layouts[h.type_id() as usize];
        if *cap == h.capacity() {
            let (base, stride, size) = fields[field];
            debug_assert_eq!(size, S::SIZE, "field {field} of type {} is {size} bytes", h.type_id());
            debug_assert!((i + 1) * S::SIZE <= stride);
            let off = base + h.slot() * stride + i * S::SIZE;
            return unsafe { self.data_ptr(h.block()).add(off) };
        }
        let reg = &self.registry;
        let t = h.type_id();
        let f = &reg.ty(t).fields[field];
        debug_assert_eq!(f.size(), S::SIZE, "field `{}` is {} bytes", f.name, f.size());
        debug_assert!(i < f.elements());
        let off = reg.field_location(t, field, h.capacity(), h.slot()) + i * S::SIZE;
        debug_assert!(off + S::SIZE <= self.data_bytes);
        unsafe { self.data_ptr(h.block()).add(off) }
    }

    #[inline]
    pub fn get<S: Scalar>(&self, h: Handle, field: usize) -> S {
        unsafe { S::load(self.elem_ptr::<S>(h, field, 0)) }
    }

    #[inline]
    pub fn set<S: Scalar>(&self, h: Handle, field: usize, v: S) {
        unsafe { S::store(self.elem_ptr::<S>(h, field, 0), v) }
    }

    #[inline]
    pub fn get_elem<S: Scalar>(&self, h: Handle, field: usize, i: usize) -> S {
        unsafe { S::load(self.elem_ptr::<S>(h, field, i)) }
    }

    #[inline]
    pub fn set_elem<S: Scalar>(&self, h: Handle, field: usize, i: usize, v: S) {
        unsafe { S::store(self.elem_ptr::<S>(h, field, i), v) }
    }

    /// Field read that skips the liveness check (defrag touches slots that
    /// are not yet published).
    pub(crate) fn get_raw<S: Scalar>(&self, h: Handle, field: usize) -> S {
        unsafe { S::load(self.elem_ptr_unchecked::<S>(h, field, 0)) }
    }

    pub(crate) fn set_raw<S: Scalar>(&self, h: Handle, field: usize, v: S) {
        unsafe { S::store(self.elem_ptr_unchecked::<S>(h, field, 0), v) }
    }

    /// Atomic add on a 32-bit float field.
    pub fn fetch_add_f32(&self, h: Handle, field: usize, delta: f32) -> f32 {
        let a = unsafe { AtomicU32::from_ptr(self.elem_ptr::<f32>(h, field, 0).cast()) };
        let prev = a
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |bits| Some((f32::from_bits(bits) + delta).to_bits()))
            .unwrap_or_else(|b| b);
        f32::from_bits(prev)
    }

    /// Compare-and-swap on a reference field.
    pub fn compare_exchange_handle(
        &self,
        h: Handle,
        field: usize,
        current: Handle,
        new: Handle,
    ) -> Result<Handle, Handle> {
        let a = unsafe { AtomicU64::from_ptr(self.elem_ptr::<Handle>(h, field, 0).cast()) };
        a.compare_exchange(current.0, new.0, Ordering::AcqRel, Ordering::Acquire).map(Handle).map_err(Handle)
    }

    /// Copies every field of `src` into `dst` (same type). Used by defrag
    /// while the heap is quiescent.
    pub(crate) fn copy_object(&self, src: Handle, dst: Handle) {
        let ty = self.registry.ty(src.type_id());
        for f in &ty.fields {
            let s = self.registry.field_location(src.type_id(), f.index, src.capacity(), src.slot());
            let d = self.registry.field_location(dst.type_id(), f.index, dst.capacity(), dst.slot());
            let (sp, dp) = (unsafe { self.data_ptr(src.block()).add(s) }, unsafe { self.data_ptr(dst.block()).add(d) });
            for i in 0..f.elements() {
                let off = i * f.size();
                unsafe {
                    match f.size() {
                        1 => u8::store(dp.add(off), u8::load(sp.add(off))),
                        2 => u16::store(dp.add(off), u16::load(sp.add(off))),
                        4 => u32::store(dp.add(off), u32::load(sp.add(off))),
                        _ => u64::store(dp.add(off), u64::load(sp.add(off))),
                    }
                }
            }
        }
    }

    /// Raw little-endian bytes of one object, field by field.
    pub fn object_bytes(&self, h: Handle) -> Vec<u8> {
        let ty = self.registry.ty(h.type_id());
        let mut out = Vec::with_capacity(ty.object_size);
        for f in &ty.fields {
            let base = self.registry.field_location(h.type_id(), f.index, h.capacity(), h.slot());
            let p = unsafe { self.data_ptr(h.block()).add(base) };
            for i in 0..f.elements() {
                let q = unsafe { p.add(i * f.size()) };
                unsafe {
                    match f.size() {
                        1 => out.push(u8::load(q)),
                        2 => out.extend_from_slice(&u16::load(q).to_le_bytes()),
                        4 => out.extend_from_slice(&u32::load(q).to_le_bytes()),
                        _ => out.extend_from_slice(&u64::load(q).to_le_bytes()),
                    }
                }
            }
        }
        out
    }

    /// Forwarding entry `slot` of a source block during defrag.
    pub(crate) fn forwarding(&self, b: usize, slot: usize) -> Handle {
        unsafe { Handle::load(self.data_ptr(b).add(slot * 8)) }
    }

    pub(crate) fn set_forwarding(&self, b: usize, slot: usize, h: Handle) {
        unsafe { Handle::store(self.data_ptr(b).add(slot * 8), h) }
    }

    pub(crate) fn store_alloc_bitmap(&self, b: usize, v: u64) {
        self.alloc_word(b).store(v, Ordering::Release)
    }

    /// CSV rows `block,type,fill`. Free blocks report type 0.
    pub fn snapshot_csv(&self, is_allocated: impl Fn(usize) -> bool) -> String {
        let mut s = String::from("block,type,fill\n");
        for b in 0..self.num_blocks {
            if is_allocated(b) {
                let fill = self.live_slots(b).count_ones();
                s.push_str(&format!("{b},{},{fill}\n", self.tag(b)));
            } else {
                s.push_str(&format!("{b},0,0\n"));
            }
        }
        s
    }
}
