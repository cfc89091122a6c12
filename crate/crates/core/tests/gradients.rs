//! Finite-difference verification of every analytic gradient in the crate,
//! plus the wrong-gradient negative control.

use stvg_core::optim::checks::{check_loss_gradients, negative_control, CheckedLoss};

const TRIALS: usize = 100;
const TOLERANCE: f64 = 1e-4;

#[test]
fn focal_gradients_match_finite_differences() {
    let summary = check_loss_gradients(CheckedLoss::Focal, TRIALS, TOLERANCE, 2001).unwrap();
    assert!(
        summary.passed(),
        "worst rel error {} at trial {} index {}",
        summary.worst_rel_error,
        summary.worst_trial,
        summary.worst_index
    );
}

#[test]
fn giou_gradients_match_finite_differences() {
    let summary = check_loss_gradients(CheckedLoss::Giou, TRIALS, TOLERANCE, 2002).unwrap();
    assert!(
        summary.passed(),
        "worst rel error {} at trial {} index {}",
        summary.worst_rel_error,
        summary.worst_trial,
        summary.worst_index
    );
}

#[test]
fn confidence_gradients_match_finite_differences() {
    // Smooth-L1 has a closed-form gradient; the FD agreement is tighter
    // than the shared tolerance.
    let summary = check_loss_gradients(CheckedLoss::SmoothL1, TRIALS, 1e-6, 2003).unwrap();
    assert!(summary.passed(), "worst rel error {}", summary.worst_rel_error);
}

#[test]
fn boundary_gradients_match_finite_differences() {
    let summary = check_loss_gradients(CheckedLoss::Boundary, TRIALS, 1e-6, 2004).unwrap();
    assert!(summary.passed(), "worst rel error {}", summary.worst_rel_error);
}

#[test]
fn wrong_gradient_fails_at_every_coordinate() {
    let report = negative_control(2005).unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures.len(), report.checked.len());
}
