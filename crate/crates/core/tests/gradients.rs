//! End-to-end gradient checks: loss through the frozen backbone, into the
//! soft prompt, into each parameterization.

mod common;

use std::time::Instant;

use common::{grad_fixture, max_relative_gradient_error, VARIANTS};

#[test]
fn analytic_gradients_match_central_differences() {
    let start = Instant::now();
    let f = grad_fixture();
    for v in VARIANTS {
        let err = max_relative_gradient_error(&f, v);
        assert!(err <= 1e-4, "{v}: relative error {err:.3e}");
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn frozen_backbone_rejects_weight_access() {
    let mut f = grad_fixture();
    assert!(f.backbone.weights_mut().is_err());
}
