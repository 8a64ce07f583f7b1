mod common;

use common::checks::*;

const TOL: f64 = 1e-10;

fn assert_all_within(name: &str, gap: impl Fn(u64) -> f64, tol: f64) {
    for seed in 0..25 {
        let g = gap(seed);
        assert!(g < tol, "{name}: seed {seed} differs from the reference by {g:e}");
    }
}

#[test]
fn region_sa_matches_reference() {
    assert_all_within("region_sa", region_sa_gap, TOL);
}

#[test]
fn inter_afl_matches_reference() {
    assert_all_within("inter_afl", inter_afl_gap, TOL);
}

#[test]
fn view_fusion_matches_reference() {
    assert_all_within("view_fusion", view_fusion_gap, TOL);
}

#[test]
fn region_fusion_matches_reference() {
    assert_all_within("region_fusion", region_fusion_gap, TOL);
}

#[test]
fn zeroed_conv_path_with_unit_beta_is_a_plain_encoder() {
    assert_all_within("degenerate model", degenerate_model_gap, 1e-8);
}

#[test]
fn single_view_alpha_is_exactly_one() {
    for seed in 0..10 {
        assert_eq!(single_view_alpha(seed), vec![1.0]);
    }
}
