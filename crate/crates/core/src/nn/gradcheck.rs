//! Central finite differences for checking analytic gradients.
//!
//! These helpers only evaluate the scalar function they are given, so they
//! stay independent of any backward pass they are used to check.

/// Denominator floor for [`rel_error`]; gradients smaller than this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    central_difference_at(x, h, 0..x.len(), f)
}

/// Central differences at the listed coordinates only.
pub fn central_difference_at(
    x: &[f64],
    h: f64,
    indices: impl IntoIterator<Item = usize>,
    f: impl Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let mut buf = x.to_vec();
    indices
        .into_iter()
        .map(|i| {
            let orig = buf[i];
            buf[i] = orig + h;
            let up = f(&buf);
            buf[i] = orig - h;
            let down = f(&buf);
            buf[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}
