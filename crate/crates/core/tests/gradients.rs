mod common;

use common::*;

const TOL: f64 = 1e-4;

#[test]
fn analytic_gradients_match_finite_differences() {
    for r in gradient_suite(5) {
        assert!(r.worst < TOL, "{}: relative error {:.3e}", r.name, r.worst);
    }
}

#[test]
fn relative_error_is_scale_free() {
    let a = [1.0, 2.0, 3.0];
    let b = [1.0, 2.0, 3.0 + 1e-6];
    let big: Vec<f64> = a.iter().map(|x| x * 1e6).collect();
    let big_b: Vec<f64> = b.iter().map(|x| x * 1e6).collect();
    assert!((relative_error(&a, &b) - relative_error(&big, &big_b)).abs() < 1e-12);
    assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
}

#[test]
fn finite_differences_are_exact_on_a_quadratic() {
    let g = numeric_gradient(&[1.0, -2.0], |p| p[0] * p[0] + 3.0 * p[0] * p[1]);
    assert!((g[0] - (2.0 - 6.0)).abs() < 1e-8);
    assert!((g[1] - 3.0).abs() < 1e-8);
}
