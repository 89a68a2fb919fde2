mod common;

use common::*;

fn check(suite: fn() -> Result<u32, String>) {
    let cases = suite().unwrap_or_else(|e| panic!("{e}"));
    assert!(cases >= 200);
}

#[test]
fn tde_is_offset_invariant() {
    check(tde_offset_invariance);
}

#[test]
fn ifr_is_offset_invariant() {
    check(ifr_offset_invariance);
}

#[test]
fn tde_maps_zero_difference_to_zero() {
    check(tde_zero_difference);
}

#[test]
fn itff_depends_only_on_the_sum() {
    check(itff_sum_dependence);
}

#[test]
fn gates_lie_in_open_unit_interval() {
    check(gates_in_unit_interval);
}

#[test]
fn softmax_slices_sum_to_one() {
    check(softmax_sums);
}

#[test]
fn sdpa_is_permutation_equivariant() {
    check(sdpa_equivariance);
}

#[test]
fn overlay_classes_match_confusion_counts() {
    check(overlay_bijection);
}
