//! Central finite-difference verification of analytic gradients.

/// Compare `analytic` against central differences of `f` at `point`.
///
/// Returns the maximum over coordinates of
/// `|analytic_i − fd_i| / (|fd_i| + 1e-8)` with `fd_i` the symmetric
/// difference quotient at step `h`. `f` must evaluate finitely at every
/// perturbed point.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(point.len(), analytic.len(), "analytic gradient length mismatch");
    assert!(h > 0.0);
    let mut buffer = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let original = buffer[i];
        buffer[i] = original + h;
        let up = f(&buffer);
        buffer[i] = original - h;
        let down = f(&buffer);
        buffer[i] = original;
        assert!(up.is_finite() && down.is_finite(), "non-finite objective at coordinate {i}");
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
