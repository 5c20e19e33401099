//! Analytic gradients against central finite differences.

mod common;

use common::*;
use gridloss::detector::LossKind;

fn check(r: EndToEnd, tol: f64) {
    assert!(r.rel_err < tol, "{r:?}");
    // Most coordinates must stay clear of kinks, or the check says little.
    assert!(r.skipped < r.checked, "{r:?}");
}

#[test]
fn layer_ops_match_finite_differences() {
    for seed in 0..3 {
        for (name, e) in layer_errors(seed) {
            assert!(e < 1e-4, "{name} seed {seed}: rel err {e:e}");
        }
    }
}

#[test]
fn grid_loss_matches_finite_differences() {
    for seed in 0..10 {
        for lambda in [0.0, 0.5, 1.0] {
            let e = grid_loss_error(seed, lambda);
            assert!(e < 1e-4, "seed {seed} lambda {lambda}: {e:e}");
        }
    }
}

#[test]
fn network_grid_loss_end_to_end() {
    check(end_to_end_error(LossKind::Grid, false, 3), 1e-3);
}

#[test]
fn network_deep_supervision_end_to_end() {
    check(end_to_end_error(LossKind::Grid, true, 4), 1e-3);
}

#[test]
fn network_hinge_end_to_end() {
    check(end_to_end_error(LossKind::Hinge, true, 5), 1e-3);
}

#[test]
fn regressor_backprop() {
    check(regressor_error(6), 1e-4);
}
