use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soaheap::{nth_set_bit, HierBitmap};

fn naive_nth(word: u64, n: u32) -> Option<u32> {
    let mut seen = 0;
    for i in 0..64 {
        if word & (1 << i) != 0 {
            if seen == n {
                return Some(i);
            }
            seen += 1;
        }
    }
    None
}

fn from_bits(n: usize, bits: &[usize]) -> HierBitmap {
    let bm = HierBitmap::new(n);
    for &b in bits {
        bm.write(b, true);
    }
    bm
}

#[test]
fn try_write_examples() {
    let bm = from_bits(64, &[1, 2]);
    assert!(bm.try_write(0, true));
    assert_eq!(bm.word(0), 0b0111);
    assert!(!bm.try_write(1, true));
    let bm = from_bits(4096, &[0]);
    assert!(bm.try_write(0, false));
    assert!(bm.consistency_violations().is_empty());
    assert!(bm.try_find_set(0).is_none());
}

#[test]
fn get_examples() {
    let bm = from_bits(200, &[5]);
    assert!(bm.get(5));
    bm.write(5, false);
    assert!(!bm.get(5));
    assert!(!bm.get(199));
}

#[test]
fn write_waits_for_opposite_state() {
    let bm = Arc::new(HierBitmap::new(128));
    let done = Arc::new(AtomicBool::new(false));
    let waiter = {
        let (bm, done) = (bm.clone(), done.clone());
        std::thread::spawn(move || {
            bm.write(70, false);
            done.store(true, Ordering::SeqCst);
        })
    };
    std::thread::sleep(Duration::from_millis(50));
    assert!(!done.load(Ordering::SeqCst), "clear of a clear bit must spin");
    bm.write(70, true);
    waiter.join().unwrap();
    assert!(!bm.get(70));
    assert!(bm.consistency_violations().is_empty());
}

#[test]
fn repeated_set_spins_until_cleared() {
    let bm = Arc::new(from_bits(64, &[9]));
    let done = Arc::new(AtomicBool::new(false));
    let t = {
        let (bm, done) = (bm.clone(), done.clone());
        std::thread::spawn(move || {
            bm.write(9, true);
            done.store(true, Ordering::SeqCst);
        })
    };
    std::thread::sleep(Duration::from_millis(100));
    assert!(!done.load(Ordering::SeqCst), "illegal second set returned");
    // Release the spinner so the test can finish.
    bm.write(9, false);
    t.join().unwrap();
    assert!(bm.get(9));
}

#[test]
fn find_set_examples() {
    assert!(HierBitmap::new(4096).try_find_set(3).is_none());
    let bm = from_bits(128, &[70]);
    for seed in 0..200 {
        assert_eq!(bm.try_find_set(seed), Some(70));
    }
    let bm = from_bits(64, &[3, 40]);
    let mut seen = BTreeSet::new();
    for seed in 0..64u64 {
        let got = bm.try_find_set(seed).unwrap();
        // Rotation by seed mod 64: the first member at or after it, cyclically.
        let r = seed as usize;
        let expect = if r <= 3 || r > 40 { 3 } else { 40 };
        assert_eq!(got, expect, "seed {seed}");
        seen.insert(got);
    }
    assert_eq!(seen, BTreeSet::from([3, 40]));
}

#[test]
fn claim_examples() {
    let bm = from_bits(64, &[5]);
    assert_eq!(bm.claim_any(11), Some(5));
    assert!(!bm.get(5));
    assert_eq!(bm.claim_any(0), None);
}

#[test]
fn concurrent_claims_are_disjoint() {
    for round in 0..300u64 {
        let bm = Arc::new(from_bits(128, &[3, 90]));
        let hs: Vec<_> = (0..2)
            .map(|i| {
                let bm = bm.clone();
                std::thread::spawn(move || bm.claim_any(round * 2 + i))
            })
            .collect();
        let mut got: Vec<usize> = hs.into_iter().map(|h| h.join().unwrap().unwrap()).collect();
        got.sort();
        assert_eq!(got, vec![3, 90]);
    }
}

#[test]
fn indices_examples() {
    let bm = from_bits(256, &[0, 64, 65, 255]);
    let got: BTreeSet<usize> = bm.indices().into_iter().collect();
    assert_eq!(got, BTreeSet::from([0, 64, 65, 255]));
    assert!(HierBitmap::new(256).indices().is_empty());
    assert_eq!(bm.indices_sorted(), vec![0, 64, 65, 255]);
}

#[test]
fn indices_match_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bm = HierBitmap::new(4096);
    let mut naive = Vec::new();
    for i in 0..4096 {
        if rng.gen_bool(0.3) {
            bm.write(i, true);
            naive.push(i);
        }
    }
    let mut got = bm.indices();
    got.sort();
    assert_eq!(got, naive);
    assert_eq!(bm.indices_sorted(), naive);
}

/// Threads apply a legal multiset of set/clear operations: for every bit
/// the operations alternate starting from the opposite of its initial
/// value, and are scattered across threads in random order. Threads use
/// try-writes round robin, so no fixed order between them is required.
fn stress(num_bits: usize, threads: usize, ops: usize, seed: u64) -> HierBitmap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bm = HierBitmap::new(num_bits);
    let mut state = vec![false; num_bits];
    for (i, s) in state.iter_mut().enumerate() {
        if rng.gen_bool(0.5) {
            bm.write(i, true);
            *s = true;
        }
    }
    let mut per_thread: Vec<Vec<(usize, bool)>> = vec![Vec::new(); threads];
    let hot: Vec<usize> = (0..num_bits.min(512)).map(|_| rng.gen_range(0..num_bits)).collect();
    for _ in 0..ops {
        let bit = if rng.gen_bool(0.5) { hot[rng.gen_range(0..hot.len())] } else { rng.gen_range(0..num_bits) };
        state[bit] = !state[bit];
        per_thread[rng.gen_range(0..threads)].push((bit, state[bit]));
    }
    for list in &mut per_thread {
        list.shuffle(&mut rng);
    }
    let bm = Arc::new(bm);
    let hs: Vec<_> = per_thread
        .into_iter()
        .map(|mut list| {
            let bm = bm.clone();
            std::thread::spawn(move || {
                while !list.is_empty() {
                    list.retain(|&(b, v)| !bm.try_write(b, v));
                    if !list.is_empty() {
                        std::thread::yield_now();
                    }
                }
            })
        })
        .collect();
    for h in hs {
        h.join().unwrap();
    }
    let bm = Arc::try_unwrap(bm).unwrap();
    for (i, s) in state.iter().enumerate() {
        assert_eq!(bm.get(i), *s, "bit {i}");
    }
    bm
}

#[test]
fn stress_leaves_levels_consistent() {
    for seed in 0..4 {
        let bm = stress(1 << 14, 8, 20_000, seed);
        assert_eq!(bm.consistency_violations(), vec![]);
    }
}

proptest! {
    #[test]
    fn nth_matches_naive(word in any::<u64>(), n in 0u32..70) {
        prop_assert_eq!(nth_set_bit(word, n), naive_nth(word, n));
    }

    #[test]
    fn indices_round_trip(n in 1usize..5000, bits in proptest::collection::btree_set(0usize..5000, 0..300)) {
        let bits: Vec<usize> = bits.into_iter().filter(|&b| b < n).collect();
        let bm = from_bits(n, &bits);
        let rebuilt = from_bits(n, &bm.indices());
        prop_assert_eq!(rebuilt.indices_sorted(), bits);
        prop_assert!(bm.consistency_violations().is_empty());
    }

    #[test]
    fn found_bits_are_set(n in 1usize..9000, bits in proptest::collection::vec(0usize..9000, 0..50), seed in any::<u64>()) {
        let bits: Vec<usize> = bits.into_iter().filter(|&b| b < n).collect();
        let bm = HierBitmap::new(n);
        for &b in &bits {
            bm.try_write(b, true);
        }
        match bm.try_find_set(seed) {
            Some(p) => prop_assert!(bm.get(p)),
            None => prop_assert!(bits.is_empty()),
        }
    }
}
