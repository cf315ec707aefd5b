//! Synthetic fragmentation benchmark: fill, delete a random fraction,
//! defragment, and measure fragmentation before and after.

use soaheap::{mix64, AllocConfig, Allocator, Field, Handle, Registry};

use crate::{new_indexed, AppError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub deletion_ratio: f64,
    pub fragmentation_before: f64,
    pub fragmentation_after: f64,
    pub passes: usize,
    pub moved: usize,
    pub blocks_before: usize,
    pub blocks_after: usize,
}

/// One measurement with `objects` 8-byte objects, of which
/// `floor(ratio * objects)` are deleted.
pub fn measure(
    objects: usize,
    ratio: f64,
    defrag_n: usize,
    k1: usize,
    seed: u64,
    workers: usize,
) -> Result<SweepRow, AppError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(AppError::Params(format!("deletion ratio {ratio} outside [0, 1]")));
    }
    let mut reg = Registry::new();
    let t = reg.register_type("Object", None, false, vec![Field::scalar("value", 8)])?;
    reg.freeze(objects.max(64).div_ceil(64) * 64 + 64 * workers)?;
    let alloc = Allocator::new(reg, AllocConfig { defrag_n, workers, ..AllocConfig::default() })?;
    let hs = new_indexed(&alloc, t, objects, |h, i| alloc.heap().set(h, 0, i as u64))?;

    // Delete the objects with the smallest hashes.
    let mut order: Vec<(u64, Handle)> =
        hs.iter().enumerate().map(|(i, &h)| (mix64(seed ^ mix64(i as u64)), h)).collect();
    order.sort_unstable_by_key(|p| p.0);
    let doomed = (ratio * objects as f64).floor() as usize;
    for &(_, h) in &order[..doomed] {
        alloc.deallocate(h);
    }

    let before = alloc.stats();
    let report = alloc.defragment(t, k1);
    let after = alloc.stats();
    Ok(SweepRow {
        deletion_ratio: ratio,
        fragmentation_before: before.fragmentation,
        fragmentation_after: after.fragmentation,
        passes: report.passes.len(),
        moved: report.moved(),
        blocks_before: before.types[0].allocated_blocks,
        blocks_after: after.types[0].allocated_blocks,
    })
}

/// `measure` over deletion ratios 0.1, 0.2, ... 0.9.
pub fn sweep(objects: usize, defrag_n: usize, k1: usize, seed: u64, workers: usize) -> Result<Vec<SweepRow>, AppError> {
    (1..=9).map(|k| measure(objects, k as f64 / 10.0, defrag_n, k1, seed, workers)).collect()
}
