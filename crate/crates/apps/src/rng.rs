//! Per-object random numbers.
//!
//! Every object carries a 64-bit counter in one of its fields; each draw
//! advances the counter and hashes it. Results depend only on the object's
//! own history, never on the order in which objects are visited.

use soaheap::{mix64, Handle, Heap};

const STEP: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seed for object `index` of a stream.
pub fn seed_for(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ stream.rotate_left(32)) ^ index)
}

/// Advances the counter stored in `field` and returns the next value.
pub fn next_u64(heap: &Heap, h: Handle, field: usize) -> u64 {
    let s: u64 = heap.get(h, field);
    let s = s.wrapping_add(STEP);
    heap.set(h, field, s);
    mix64(s)
}

/// Uniform in `0..n` (n > 0).
pub fn below(heap: &Heap, h: Handle, field: usize, n: u32) -> u32 {
    (((next_u64(heap, h, field) >> 32) * n as u64) >> 32) as u32
}

/// Uniform in [0, 1).
pub fn unit(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}
