mod common;

use common::{check, instance};

#[test]
fn unrolled_gradient_matches_central_differences() {
    for iterations in 1..=3 {
        for seed in 0..3 {
            let worst = check(&instance(100 * iterations as u64 + seed, iterations, false));
            assert!(worst <= 1e-5, "N = {iterations}, seed {seed}: relative error {worst}");
        }
    }
}

#[test]
fn unrolled_gradient_with_normalization_matches_central_differences() {
    for iterations in 1..=2 {
        let worst = check(&instance(900 + iterations as u64, iterations, true));
        assert!(worst <= 1e-5, "N = {iterations}: relative error {worst}");
    }
}
