//! Benchmark applications that run on the soaheap allocator.
//!
//! Each simulation keeps all of its objects on the heap and drives them
//! only through phase operations (`parallel_do`, `parallel_new`,
//! `defragment`), so defragmentation between iterations is allowed as long
//! as it is limited to the types listed by [`Simulation::defrag_types`].

pub mod body;
pub mod collision;
pub mod gol;
pub mod nbody;
pub mod pbm;
pub mod rng;
pub mod scalability;
pub mod synthetic;
pub mod wator;

use std::sync::atomic::{AtomicU64, Ordering};

use soaheap::{AllocError, Allocator, Handle, RegistryError, TypeId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Pattern(#[from] pbm::PbmError),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub trait Simulation {
    fn name(&self) -> &'static str;

    fn allocator(&self) -> &Allocator;

    /// Runs one iteration.
    fn step(&mut self) -> Result<(), AppError>;

    /// Types whose objects come and go; only these may be defragmented
    /// between iterations.
    fn defrag_types(&self) -> Vec<TypeId>;

    /// Encoding of the simulation state that does not depend on where
    /// objects live in the heap.
    fn state_bytes(&self) -> Vec<u8>;

    /// Application-level invariants (back references, one agent per cell).
    fn check(&self) -> Result<(), AppError>;

    /// Live object count per concrete type, in registration order.
    fn live_counts(&self) -> Vec<(String, usize)> {
        self.allocator().stats().types.into_iter().map(|t| (t.name, t.used_slots)).collect()
    }
}

/// Rounds an object count up to a valid heap size (multiple of 64), with
/// some slack.
pub fn heap_size_for(objects: usize, slack: f64) -> usize {
    let want = (objects as f64 * slack).ceil() as usize;
    want.max(64).div_ceil(64) * 64
}

/// `parallel_new` that also returns the handles, indexed by creation order.
pub fn new_indexed<F>(alloc: &Allocator, t: TypeId, count: usize, init: F) -> Result<Vec<Handle>, AllocError>
where
    F: Fn(Handle, usize) + Sync,
{
    let slots: Vec<AtomicU64> = (0..count).map(|_| AtomicU64::new(0)).collect();
    alloc.parallel_new(t, count, |_, h, i| {
        init(h, i);
        slots[i].store(h.bits(), Ordering::Relaxed);
    })?;
    Ok(slots.into_iter().map(|a| Handle::from_bits(a.into_inner())).collect())
}
