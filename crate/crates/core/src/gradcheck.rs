//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::Error;

/// Compare an analytic gradient against central finite differences of `f`.
///
/// Uses the symmetric five-point (fourth-order) stencil so that coordinates
/// with very small gradients are still resolved well below the `1e-4`
/// verification tolerance. Returns the worst coordinate's
/// `|g_analytic - g_fd| / max(1e-8, |g_fd|)`. Meant to run in 64-bit mode.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64, Error>,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64, Error> {
    if theta.len() != analytic.len() {
        return Err(Error::Dimension(alloc::format!(
            "theta has {} coordinates but analytic gradient has {}",
            theta.len(),
            analytic.len()
        )));
    }
    let mut th: Vec<f64> = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..th.len() {
        let orig = th[i];
        let eval = |x: f64, f: &mut dyn FnMut(&[f64]) -> Result<f64, Error>,
                        th: &mut Vec<f64>|
         -> Result<f64, Error> {
            th[i] = x;
            let v = f(th)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(alloc::format!(
                    "objective not finite at coordinate {i}"
                )));
            }
            Ok(v)
        };
        let f_p1 = eval(orig + h, f, &mut th)?;
        let f_m1 = eval(orig - h, f, &mut th)?;
        let f_p2 = eval(orig + 2.0 * h, f, &mut th)?;
        let f_m2 = eval(orig - 2.0 * h, f, &mut th)?;
        th[i] = orig;
        let fd = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * h);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn exact_for_quadratic() {
        // f(theta) = 0.5 * ||theta||^2, gradient is theta itself
        let mut rng = Rng::new(1);
        let theta: Vec<f64> = (0..16).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let analytic = theta.clone();
        let mut f = |t: &[f64]| Ok(t.iter().map(|v| 0.5 * v * v).sum());
        let err = finite_diff_check(&mut f, &theta, &analytic, 1e-4).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_gives_zero_error() {
        let theta = [0.4, -1.0, 2.0];
        let analytic = [0.0; 3];
        let mut f = |_: &[f64]| Ok(7.5);
        let err = finite_diff_check(&mut f, &theta, &analytic, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let theta = [1.0];
        let analytic = [0.0];
        let mut f = |_: &[f64]| Ok(f64::NAN);
        assert!(matches!(
            finite_diff_check(&mut f, &theta, &analytic, 1e-4),
            Err(Error::NonFinite(_))
        ));
    }
}
