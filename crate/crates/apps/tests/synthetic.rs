use soaheap_apps::synthetic::{measure, sweep};

#[test]
fn defragmentation_reaches_the_guaranteed_level() {
    for n in 1..=3 {
        for row in sweep(1 << 13, n, 0, 17, 2).unwrap() {
            let bound = 1.0 / (n as f64 + 1.0);
            // Up to n leftover candidates may keep their free slots.
            let slack = n as f64 / row.blocks_after.max(1) as f64;
            assert!(
                row.fragmentation_after <= bound + slack,
                "n={n} x={} F={} bound={bound}",
                row.deletion_ratio,
                row.fragmentation_after
            );
            assert!(row.fragmentation_after <= row.fragmentation_before + 1e-12);
            assert!(row.blocks_after <= row.blocks_before);
        }
    }
}

#[test]
fn sixty_percent_deletion() {
    let one = measure(1 << 14, 0.6, 1, 0, 3, 2).unwrap();
    assert!(one.fragmentation_before > 0.5);
    assert!(one.fragmentation_after < 0.5, "{one:?}");
    let three = measure(1 << 14, 0.6, 3, 0, 3, 2).unwrap();
    assert!(three.fragmentation_after < 0.25, "{three:?}");
}

#[test]
fn sweep_ratios_are_increasing() {
    let rows = sweep(2048, 1, 0, 1, 1).unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.windows(2).all(|w| w[0].deletion_ratio < w[1].deletion_ratio));
    assert!(measure(100, 1.5, 1, 0, 1, 1).is_err());
}
