//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate (and by the `gradcheck` command).

/// Default perturbation step for gradient checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Relative-error floor: coordinate pairs whose magnitudes both fall below
/// this are compared against the floor instead, so saturated (near-zero)
/// gradients do not drown the check in finite-difference noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference derivative of `f` at `x`.
pub fn central_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Relative error between an analytic and a numerical derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Numerical gradient of `loss` with respect to every coordinate of
/// `params`, perturbing in place and restoring each coordinate afterwards.
pub fn numeric_gradient<F>(params: &mut [f64], step: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let saved = params[i];
        params[i] = saved + step;
        let plus = loss(params);
        params[i] = saved - step;
        let minus = loss(params);
        params[i] = saved;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}
