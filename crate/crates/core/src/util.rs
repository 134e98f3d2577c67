//! Small numeric helpers shared across modules.

/// Ceiling with a tolerance for float quotients that are integral up to
/// rounding error, so `0.9 / 0.3` ceils to 3 rather than 4.
pub(crate) fn ceil_tol(x: f64) -> f64 {
    let rounded = x.round();
    if (x - rounded).abs() < 1e-9 {
        rounded
    } else {
        x.ceil()
    }
}
