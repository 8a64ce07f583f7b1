mod common;

use common::checks::*;

#[test]
fn similarity_loss_matches_double_loop() {
    for seed in 0..50 {
        let gap = similarity_loss_gap(seed);
        assert!(gap < 1e-12, "seed {seed}: {gap:e}");
    }
}

#[test]
fn mobility_loss_never_drops_below_entropy_floor() {
    for seed in 0..100 {
        let (loss, floor) = mobility_loss_and_floor(seed);
        assert!(loss >= floor - 1e-9, "seed {seed}: loss {loss} below floor {floor}");
    }
}

#[test]
fn log_count_scores_attain_the_floor() {
    for seed in 0..50 {
        let gap = floor_attainment_gap(seed);
        assert!(gap < 1e-6, "seed {seed}: {gap:e}");
    }
}
