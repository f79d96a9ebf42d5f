use crate::error::{dim_err, PkmError, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
}

/// Compares `analytic` against central differences of `f` at `point`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64]) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return dim_err(format!(
            "grad_check: {} coordinates, {} analytic entries",
            point.len(),
            analytic.len()
        ));
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut rel_errors = Vec::with_capacity(point.len());
    let (mut max_rel_error, mut worst) = (0.0f64, 0);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let plus = f(&x);
        x[i] = orig - FD_STEP;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(PkmError::NonFinite(format!(
                "grad_check: f is not finite around coordinate {i}"
            )));
        }
        let n = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst = i;
        }
        numeric.push(n);
        rel_errors.push(rel);
    }
    Ok(GradCheckReport {
        numeric,
        rel_errors,
        max_rel_error,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|p| p[0] * p[0], &[3.0], &[6.0]).unwrap();
        assert!((r.numeric[0] - 6.0).abs() < 1e-8);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function() {
        let r = grad_check(|_| 4.2, &[1.0, -2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r.numeric, vec![0.0, 0.0]);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_is_error() {
        assert!(grad_check(|p| 1.0 / (p[0] - 1e-5), &[0.0], &[0.0]).is_err());
        assert!(grad_check(|_| 0.0, &[0.0], &[]).is_err());
    }
}
