//! Lock-free object allocator for data-parallel workloads.
//!
//! Objects of one type live in fixed-size blocks whose data segment is laid
//! out as a structure of arrays. Block states (free, allocated, active,
//! defrag candidate) are tracked in hierarchical bitmaps. Live objects are
//! enumerated with a snapshot-based parallel do-all, and the heap can be
//! compacted in place by merging sparsely filled blocks.
//!
//! ```
//! use soaheap::{Allocator, AllocConfig, Field, Registry};
//!
//! let mut reg = Registry::new();
//! let point = reg
//!     .register_type("Point", None, false, vec![Field::scalar("x", 4), Field::scalar("y", 4)])
//!     .unwrap();
//! reg.freeze(64 * 16).unwrap();
//! let alloc = Allocator::new(reg, AllocConfig { workers: 1, ..Default::default() }).unwrap();
//! let p = alloc.allocate(point, 7).unwrap();
//! alloc.heap().set(p, 0, 1.5f32);
//! assert_eq!(alloc.heap().get::<f32>(p, 0), 1.5);
//! alloc.deallocate(p);
//! assert_eq!(alloc.stats().free_blocks, 16);
//! ```

pub mod alloc;
pub mod bitmap;
pub mod defrag;
pub mod enumerate;
pub mod error;
pub mod heap;
pub mod registry;

pub use alloc::{AllocConfig, Allocator, OomPolicy, Stats, Timings, TypeStats};
pub use bitmap::{nth_set_bit, HierBitmap};
pub use defrag::{pass_bound, DefragPlan, DefragReport, PassRecord, Relocation, K2};
pub use enumerate::{thread_assignment, AssignmentParams, WorkerCtx};
pub use error::{AllocError, AuditError, RegistryError};
pub use heap::{Handle, Heap, Invalidation, ReleaseOutcome, Scalar, SlotOutcome};
pub use registry::{Field, FieldDescriptor, FieldKind, LayoutPlan, Registry, TypeDescriptor, TypeId};

/// splitmix64 finalizer; used to derive per-retry seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
