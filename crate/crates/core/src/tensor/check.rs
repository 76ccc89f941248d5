//! Central-difference gradient verification.

use super::{Graph, Param, Precision, Value};

/// Compares the analytic gradient of `f` at `x` against central differences.
///
/// The analytic gradient is taken through a graph at `precision`; the
/// central differences always evaluate `f` at 64-bit so the numerical
/// reference is not swamped by 32-bit rounding of the forward pass.
///
/// `f` must evaluate to a scalar. Returns the maximum over coordinates of
/// |analytic - central| / (|analytic| + |central| + 1e-12).
///
/// Panics if `f(x)` is non-finite or `h` is outside (0, 1e-2].
pub fn finite_difference_check(
    f: impl Fn(&Graph, &Value) -> Value,
    precision: Precision,
    shape: &[usize],
    x: &[f64],
    h: f64,
) -> f64 {
    assert!(h > 0.0 && h <= 1e-2, "finite_difference_check: h = {} out of (0, 1e-2]", h);
    let p = Param::new("fd_check_x", shape, x.to_vec());

    let eval = |xs: &[f64]| -> f64 {
        p.set_values(xs);
        let g = Graph::new(Precision::F64);
        g.set_grad_enabled(false);
        let xv = g.param(&p);
        f(&g, &xv).item()
    };

    // analytic gradient
    p.set_values(x);
    p.zero_grad();
    let g = Graph::new(precision);
    let xv = g.param(&p);
    let y = f(&g, &xv);
    assert!(y.item().is_finite(), "finite_difference_check: f(x) = {} is not finite", y.item());
    y.backward();
    let analytic = p.grad();

    let mut max_err: f64 = 0.0;
    let mut xs = x.to_vec();
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = eval(&xs);
        xs[i] = orig - h;
        let fm = eval(&xs);
        xs[i] = orig;
        let central = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        if err > max_err {
            max_err = err;
        }
    }
    p.set_values(x);
    max_err
}
