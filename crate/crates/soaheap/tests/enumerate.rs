mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soaheap::{thread_assignment, AllocError, Allocator, AssignmentParams, Field, Handle, Registry};

#[test]
fn assignment_covers_grid_exactly_once() {
    for cap in 1..=64 {
        for r in 0..=20 {
            for n in [1usize, 7, 64, 256] {
                let mut hits = vec![0u8; r * cap];
                for tid in 0..n {
                    for (ri, slot) in thread_assignment(tid, AssignmentParams { r, capacity: cap, n_threads: n }) {
                        assert!(ri < r && slot < cap);
                        hits[ri * cap + slot] += 1;
                    }
                }
                // Naive double loop over (block, slot).
                for ri in 0..r {
                    for s in 0..cap {
                        assert_eq!(hits[ri * cap + s], 1, "cap {cap} r {r} n {n} at ({ri},{s})");
                    }
                }
            }
        }
    }
}

#[test]
fn snapshot_copies_allocation_words() {
    let t = two_types(64 * 4, cfg(1));
    let hs = t.alloc.allocate_batch(t.small, 6, 0).unwrap();
    let b = hs[0].block();
    let keep = 1u64 << hs[0].slot() | 1 << hs[5].slot();
    for h in &hs[1..5] {
        t.alloc.deallocate(*h);
    }
    let passes = t.alloc.snapshot_iteration_bitmaps(t.small, false);
    assert_eq!(passes, vec![(t.small, vec![b])]);
    assert_eq!(t.alloc.heap().iter_bitmap(b), keep);
    let late = t.alloc.allocate(t.small, 1).unwrap();
    assert_eq!(late.block(), b);
    assert_eq!(t.alloc.heap().iter_bitmap(b), keep);
}

#[test]
fn increments_every_object_once() {
    for workers in [1, 3, 8] {
        let t = two_types(64 * 8, cfg(workers));
        let hs = t.alloc.allocate_batch(t.pair, 100, 0).unwrap();
        t.alloc.parallel_do(t.pair, false, |_, h| {
            let v: u64 = t.alloc.heap().get(h, 0);
            t.alloc.heap().set(h, 0, v + 1);
        });
        for h in &hs {
            assert_eq!(t.alloc.heap().get::<u64>(*h, 0), 1);
        }
    }
}

#[test]
fn visits_form_the_live_multiset() {
    let t = two_types(64 * 64, cfg(4));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut live = Vec::new();
    for i in 0..2000u64 {
        if !live.is_empty() && rng.gen_bool(0.3) {
            t.alloc.deallocate(live.swap_remove(rng.gen_range(0..live.len())));
        } else {
            live.push(t.alloc.allocate(t.pair, i).unwrap());
        }
    }
    let seen = Mutex::new(Vec::new());
    t.alloc.parallel_do(t.pair, false, |_, h| seen.lock().unwrap().push(h));
    let mut seen = seen.into_inner().unwrap();
    seen.sort();
    live.sort();
    assert_eq!(seen, live);
}

#[test]
fn objects_created_in_pass_are_not_visited() {
    let t = two_types(64 * 16, cfg(4));
    t.alloc.allocate_batch(t.pair, 100, 0).unwrap();
    let calls = AtomicUsize::new(0);
    t.alloc.parallel_do(t.pair, false, |ctx, _| {
        calls.fetch_add(1, Ordering::Relaxed);
        t.alloc.allocate(t.pair, ctx.seed()).unwrap();
    });
    assert_eq!(calls.into_inner(), 100);
    assert_eq!(t.alloc.live_handles(t.pair).len(), 200);
    t.alloc.audit().unwrap();
}

#[test]
fn receivers_may_delete_themselves() {
    let t = two_types(64 * 16, cfg(4));
    t.alloc.allocate_batch(t.pair, 100, 0).unwrap();
    t.alloc.parallel_do(t.pair, false, |_, h| t.alloc.deallocate(h));
    assert!(t.alloc.live_handles(t.pair).is_empty());
    assert_eq!(t.alloc.free_bitmap().count(), 16);
    t.alloc.audit().unwrap();
}

#[test]
fn first_error_is_reported() {
    let t = two_types(64 * 4, cfg(2));
    t.alloc.allocate_batch(t.small, 50, 0).unwrap();
    let calls = AtomicUsize::new(0);
    let r: Result<(), String> = t.alloc.try_parallel_do(t.small, false, |_, h| {
        calls.fetch_add(1, Ordering::Relaxed);
        if h.slot() % 7 == 3 {
            Err(format!("bad {}", h.slot()))
        } else {
            Ok(())
        }
    });
    assert!(r.unwrap_err().starts_with("bad "));
    assert!(calls.into_inner() <= 50);
    let ok: Result<(), String> = t.alloc.try_parallel_do(t.small, false, |_, _| Ok(()));
    assert!(ok.is_ok());
}

fn hierarchy(workers: usize) -> (Allocator, u8, u8, u8) {
    let mut r = Registry::new();
    let base = r.register_type("Base", None, true, vec![Field::scalar("v", 4)]).unwrap();
    let a = r.register_type("A", Some(base), false, vec![]).unwrap();
    let b = r.register_type("B", Some(base), false, vec![Field::scalar("w", 4)]).unwrap();
    r.freeze(64 * 8).unwrap();
    (Allocator::new(r, cfg(workers)).unwrap(), base, a, b)
}

#[test]
fn subtypes_included_on_request() {
    let (alloc, base, a, b) = hierarchy(3);
    alloc.allocate_batch(a, 70, 0).unwrap();
    alloc.allocate_batch(b, 30, 1).unwrap();
    let count = |t, inc| alloc.parallel_do_and_reduce(t, inc, |_, _| 1usize, |x, y| x + y, 0);
    assert_eq!(count(base, true), 100);
    assert_eq!(count(base, false), 0);
    assert_eq!(count(a, false), 70);
    assert_eq!(count(b, true), 30);
    let mut n = 0;
    alloc.device_do(base, true, |_| n += 1);
    assert_eq!(n, 100);
}

#[test]
fn parallel_new_sees_each_index_once() {
    let t = two_types(64 * 256, cfg(4));
    let seen: Vec<AtomicU64> = (0..5000).map(|_| AtomicU64::new(0)).collect();
    t.alloc
        .parallel_new(t.pair, 5000, |_, h, i| {
            t.alloc.heap().set(h, 0, i as u64);
            seen[i].fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
    assert!(seen.iter().all(|c| c.load(Ordering::Relaxed) == 1));
    let mut ids: Vec<u64> = t.alloc.live_handles(t.pair).iter().map(|&h| t.alloc.heap().get(h, 0)).collect();
    ids.sort();
    assert_eq!(ids, (0..5000).collect::<Vec<u64>>());
    t.alloc.parallel_new(t.pair, 0, |_, _, _| panic!("count 0 calls ctor")).unwrap();
}

#[test]
fn parallel_new_reports_oom() {
    let t = two_types(64 * 2, cfg(2));
    let err = t.alloc.parallel_new(t.pair, 100, |_, _, _| {}).unwrap_err();
    assert!(matches!(err, AllocError::OutOfMemory { .. }));
}

#[test]
fn device_do_matches_oracle() {
    let t = two_types(64 * 32, cfg(2));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut live = Vec::new();
    for i in 0..1500u64 {
        if !live.is_empty() && rng.gen_bool(0.4) {
            t.alloc.deallocate(live.swap_remove(rng.gen_range(0..live.len())));
        } else {
            let ty = if i % 3 == 0 { t.small } else { t.pair };
            live.push(t.alloc.allocate(ty, i).unwrap());
        }
    }
    // Oracle: expand allocated[T] by allocation words, minus padding.
    for ty in [t.small, t.pair] {
        let cap = t.alloc.registry().capacity(ty);
        let mut want = Vec::new();
        for b in t.alloc.allocated_bitmap(ty).indices_sorted() {
            let w = t.alloc.heap().alloc_bitmap(b);
            for s in 0..cap {
                if w & (1 << s) != 0 {
                    want.push(Handle::encode(ty, cap, b, s));
                }
            }
        }
        let mut got = Vec::new();
        t.alloc.device_do(ty, false, |h| got.push(h));
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }
    let mut none = 0;
    two_types(64, cfg(1)).alloc.device_do(1, false, |_| none += 1);
    assert_eq!(none, 0);
}

#[test]
fn reduce_matches_sequential_fold() {
    let t = two_types(64 * 16, cfg(4));
    let hs = t.alloc.allocate_batch(t.small, 700, 0).unwrap();
    for (i, h) in hs.iter().enumerate() {
        t.alloc.heap().set(*h, 0, (i as u64).wrapping_mul(0x9e37_79b9));
    }
    let mut sorted = hs.clone();
    sorted.sort();
    let want = sorted.iter().fold(0u64, |a, &h| a.wrapping_add(t.alloc.heap().get::<u64>(h, 0)));
    let got =
        t.alloc.parallel_do_and_reduce(t.small, false, |_, h| t.alloc.heap().get::<u64>(h, 0), u64::wrapping_add, 0);
    assert_eq!(got, want);
    let max = t.alloc.parallel_do_and_reduce(t.small, false, |_, h| t.alloc.heap().get::<u64>(h, 0), u64::max, 0);
    assert_eq!(max, sorted.iter().map(|&h| t.alloc.heap().get::<u64>(h, 0)).max().unwrap());
    let empty = two_types(64, cfg(2));
    assert_eq!(empty.alloc.parallel_do_and_reduce(empty.small, false, |_, _| 1, |a, b| a + b, 42), 42);
}

#[test]
fn single_worker_order_is_reproducible() {
    let run = || {
        let t = two_types(64 * 16, cfg(1));
        let hs = t.alloc.allocate_batch(t.small, 500, 3).unwrap();
        for h in hs.iter().step_by(3) {
            t.alloc.deallocate(*h);
        }
        let order = Mutex::new(Vec::new());
        t.alloc.parallel_do(t.small, false, |ctx, h| order.lock().unwrap().push((h, ctx.seed())));
        order.into_inner().unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    let per_block: HashMap<usize, usize> = a.iter().fold(HashMap::new(), |mut m, (h, _)| {
        *m.entry(h.block()).or_default() += 1;
        m
    });
    assert_eq!(per_block.values().sum::<usize>(), 500 - 167);
}
