//! Central finite-difference gradients, the independent oracle against which
//! every analytic gradient in this crate is verified.
//!
//! The comparison convention: relative error `|analytic - numeric| /
//! max(1, |analytic|)` per coordinate, double precision, step `h = 1e-5`,
//! tolerance `1e-4`. Single precision cannot meet this tolerance, which is
//! why the whole numeric stack is generic over the element type.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Default central-difference step.
pub const DEFAULT_H: f64 = 1e-5;
/// Default acceptance tolerance for [`max_rel_err`].
pub const DEFAULT_TOL: f64 = 1e-4;

/// Central finite-difference gradient of a scalar-valued function at `x`:
/// coordinate i gets `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
///
/// `f` is evaluated `2 * numel` times and must be deterministic.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>, TensorError>
where
    F: Fn(&Tensor<f64>) -> Result<f64, TensorError>,
{
    if h <= 0.0 {
        return Err(TensorError::InvalidArgument(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0f64; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe)?;
        probe.data[i] = orig - h;
        let fm = f(&probe)?;
        probe.data[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape.clone(), grad)
}

/// Worst-coordinate relative error with denominator `max(1, |analytic|)`.
pub fn max_rel_err<T: Scalar>(analytic: &[T], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let a = a.to_f64();
        let err = (a - n).abs() / a.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Outcome of one gradient check, suitable for printing one line per target.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub target: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} over {} coordinates (max rel err {:.3e}, tol {:.1e})",
            self.target,
            if self.passed() { "ok" } else { "FAIL" },
            self.coords,
            self.max_rel_err,
            self.tol
        )
    }
}

/// Checks the analytic gradient of one named parameter of a scalar loss
/// against central finite differences.
///
/// `loss` must rebuild the full forward pass from the supplied parameter
/// value; the analytic side is whatever the caller read off a tape.
pub fn check_against<F>(
    target: &str,
    loss: F,
    at: &Tensor<f64>,
    analytic: &[f64],
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tensor<f64>) -> Result<f64, TensorError>,
{
    let numeric = finite_diff_grad(loss, at, DEFAULT_H)?;
    Ok(GradCheckReport {
        target: target.to_string(),
        coords: at.numel(),
        max_rel_err: max_rel_err(analytic, &numeric.data),
        tol: DEFAULT_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches_exactly() {
        // f(x) = sum(x^2), df/dx = 2x.
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data.iter().map(|v| v * v).sum()),
            &x,
            DEFAULT_H,
        )
        .unwrap();
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&expect, &g.data) < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::<f64>::zeros(vec![1]);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
