/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compare the analytic directional derivative of `loss` at `point` along
/// `direction` with a central finite difference.
///
/// `loss` returns the value and the full gradient. The result is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check(mut loss: impl FnMut(&[f64]) -> (f64, Vec<f64>), point: &[f64], direction: &[f64]) -> f64 {
    assert_eq!(point.len(), direction.len(), "direction must match the point");
    let (_, grad) = loss(point);
    let analytic: f64 = grad.iter().zip(direction).map(|(g, d)| g * d).sum();
    let shifted = |s: f64| -> Vec<f64> { point.iter().zip(direction).map(|(p, d)| p + s * d).collect() };
    let (plus, _) = loss(&shifted(FD_STEP));
    let (minus, _) = loss(&shifted(-FD_STEP));
    let numeric = (plus - minus) / (2.0 * FD_STEP);
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}
