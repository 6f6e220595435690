//! Central finite-difference verification of backward-pass gradients.

use super::AutodiffError;

/// Compares the analytic gradient of `f` at `params` against central
/// differences with step `h`, returning the worst relative error over all
/// coordinates.
///
/// `f` maps a parameter vector to `(value, gradient)`; the gradient must
/// have one entry per parameter. The error for coordinate `i` is
/// `|fd_i - g_i| / max(|fd_i|, |g_i|, 1e-8)`, so agreement near zero is
/// judged on an absolute scale.
pub fn grad_check<F>(f: F, params: &[f64], h: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), AutodiffError>,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(AutodiffError::BadStep(h));
    }
    let (value, grad) = f(params)?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFiniteCheck(format!(
            "objective evaluated to {value}"
        )));
    }
    if grad.len() != params.len() {
        return Err(AutodiffError::GradLen {
            expected: params.len(),
            actual: grad.len(),
        });
    }
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let (fp, _) = f(&probe)?;
        probe[i] = params[i] - h;
        let (fm, _) = f(&probe)?;
        probe[i] = params[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AutodiffError::NonFiniteCheck(format!(
                "probe at coordinate {i} evaluated to ({fp}, {fm})"
            )));
        }
        let fd = (fp - fm) / (2.0 * h);
        let gi = grad[i];
        if !gi.is_finite() || !fd.is_finite() {
            return Err(AutodiffError::NonFiniteCheck(format!(
                "gradient comparison at coordinate {i}: fd={fd}, analytic={gi}"
            )));
        }
        let denom = fd.abs().max(gi.abs()).max(1e-8);
        worst = worst.max((fd - gi).abs() / denom);
    }
    Ok(worst)
}
