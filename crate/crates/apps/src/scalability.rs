//! Fixed-size allocation microbenchmark.
//!
//! The heap holds exactly `threads * allocs_per_thread` objects (rounded
//! up to a whole block). Every thread allocates its share, stopping early
//! on OOM, then frees everything it got.

use std::time::{Duration, Instant};

use soaheap::{AllocConfig, Allocator, Field, Handle, OomPolicy, Registry};

use crate::AppError;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalabilityReport {
    pub threads: usize,
    pub requested: usize,
    pub achieved: usize,
    pub heap_objects: usize,
    pub blocks_used: usize,
    /// Peak live objects over heap capacity.
    pub utilization: f64,
    pub alloc_time: Duration,
    pub dealloc_time: Duration,
    /// True if every block was free again after the second phase.
    pub all_free_after: bool,
}

impl ScalabilityReport {
    pub fn ns_per_alloc(&self) -> f64 {
        if self.achieved == 0 {
            return 0.0;
        }
        self.alloc_time.as_nanos() as f64 / self.achieved as f64
    }
}

pub fn run(threads: usize, allocs_per_thread: usize, object_size: usize) -> Result<ScalabilityReport, AppError> {
    if threads == 0 || allocs_per_thread == 0 {
        return Err(AppError::Params("threads and allocations must be positive".into()));
    }
    if object_size == 0 || object_size > u16::MAX as usize {
        return Err(AppError::Params(format!("object size {object_size} out of range")));
    }
    let requested = threads * allocs_per_thread;
    let heap_objects = requested.div_ceil(64) * 64;
    let mut reg = Registry::new();
    let t = reg.register_type("Object", None, false, vec![Field::array("payload", 1, object_size as u16)])?;
    reg.freeze(heap_objects)?;
    let cfg = AllocConfig { workers: 1, oom: OomPolicy::Error, ..AllocConfig::default() };
    let alloc = Allocator::new(reg, cfg)?;

    let start = Instant::now();
    let per_thread: Vec<Vec<Handle>> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|tid| {
                let alloc = &alloc;
                s.spawn(move || {
                    let mut got = Vec::with_capacity(allocs_per_thread);
                    for i in 0..allocs_per_thread {
                        match alloc.allocate(t, soaheap::mix64((tid * allocs_per_thread + i) as u64)) {
                            Ok(h) => got.push(h),
                            Err(_) => break,
                        }
                    }
                    got
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().expect("allocation thread panicked")).collect()
    });
    let alloc_time = start.elapsed();
    let achieved = per_thread.iter().map(Vec::len).sum();
    let stats = alloc.stats();
    let blocks_used = stats.types.iter().map(|s| s.allocated_blocks).sum();

    let start = Instant::now();
    std::thread::scope(|s| {
        for hs in &per_thread {
            let alloc = &alloc;
            s.spawn(move || hs.iter().for_each(|&h| alloc.deallocate(h)));
        }
    });
    let dealloc_time = start.elapsed();
    let all_free_after = alloc.stats().free_blocks == alloc.num_blocks();

    Ok(ScalabilityReport {
        threads,
        requested,
        achieved,
        heap_objects,
        blocks_used,
        utilization: achieved as f64 / heap_objects as f64,
        alloc_time,
        dealloc_time,
        all_free_after,
    })
}
