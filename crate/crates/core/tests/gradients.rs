//! Analytic gradients against central finite differences.

mod common;

#[test]
fn gradients_match_finite_differences_for_ten_configs() {
    let worst = (0..10).map(|s| common::check_config(1000 + s)).fold(0.0, f64::max);
    assert!(worst < 1e-4, "worst relative error {worst}");
}
