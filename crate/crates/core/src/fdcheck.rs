//! Central-difference gradient oracle.
//!
//! Every analytic gradient in this crate is validated against this
//! estimator; it shares no code with the tape's backward pass, so an
//! agreement between the two is real evidence rather than an identity.

use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub enum FdError {
    BadStep,
    /// The function returned a non-finite value while coordinate `index`
    /// was perturbed in the given direction (`+1` or `-1`).
    NonFiniteValue { index: usize, direction: i8 },
    FunctionFailed { index: usize },
}

impl core::fmt::Display for FdError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FdError::BadStep => write!(f, "finite-difference step must be positive and finite"),
            FdError::NonFiniteValue { index, direction } => write!(
                f,
                "non-finite value perturbing coordinate {index} in direction {direction:+}"
            ),
            FdError::FunctionFailed { index } => {
                write!(f, "function not evaluable perturbing coordinate {index}")
            }
        }
    }
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / (2h)` per
/// coordinate. The function may fail; failures and non-finite values are
/// reported with the offending coordinate.
pub fn finite_diff_gradient<F, E>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>, FdError>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(FdError::BadStep);
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x).map_err(|_| FdError::FunctionFailed { index: i })?;
        if !plus.is_finite() {
            return Err(FdError::NonFiniteValue {
                index: i,
                direction: 1,
            });
        }
        x[i] = orig - h;
        let minus = f(&x).map_err(|_| FdError::FunctionFailed { index: i })?;
        if !minus.is_finite() {
            return Err(FdError::NonFiniteValue {
                index: i,
                direction: -1,
            });
        }
        x[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Element-wise relative error with denominator `max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    debug_assert_eq!(analytic.len(), reference.len());
    let mut worst = 0.0f64;
    for (&a, &b) in analytic.iter().zip(reference) {
        let denom = crate::fmath::max(crate::fmath::max(crate::fmath::abs(a), crate::fmath::abs(b)), floor);
        let rel = crate::fmath::abs(a - b) / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_derivative_six_at_three() {
        let g = finite_diff_gradient(
            |x: &[f64]| Ok::<_, ()>(x[0] * x[0]),
            &[3.0],
            1e-5,
        )
        .unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6, "got {}", g[0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_gradient(|_: &[f64]| Ok::<_, ()>(7.25), &[1.0, -2.0, 0.0], 1e-5)
            .unwrap();
        assert_eq!(g, alloc::vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn multivariate_matches_analytic_partials() {
        // f(x, y) = x * y + sin(x)
        let f = |v: &[f64]| Ok::<_, ()>(v[0] * v[1] + crate::fmath::sin(v[0]));
        let p = [0.7, -1.3];
        let g = finite_diff_gradient(f, &p, 1e-6).unwrap();
        assert!((g[0] - (p[1] + crate::fmath::cos(p[0]))).abs() < 1e-8);
        assert!((g[1] - p[0]).abs() < 1e-8);
    }

    #[test]
    fn non_finite_value_names_the_coordinate() {
        // blows up only when the second coordinate is pushed negative
        let f = |v: &[f64]| {
            Ok::<_, ()>(if v[1] < 0.0 { f64::INFINITY } else { v[0] })
        };
        let err = finite_diff_gradient(f, &[1.0, 0.0], 1e-3).unwrap_err();
        assert_eq!(err, FdError::NonFiniteValue { index: 1, direction: -1 });
    }

    #[test]
    fn rejects_bad_step() {
        assert_eq!(
            finite_diff_gradient(|_: &[f64]| Ok::<_, ()>(0.0), &[1.0], 0.0).unwrap_err(),
            FdError::BadStep
        );
    }

    #[test]
    fn relative_error_uses_the_floor_for_tiny_values() {
        // absolute error 1e-9 on tiny values is fine under the 1e-8 floor
        let worst = max_relative_error(&[1e-12], &[1.001e-12], 1e-8);
        assert!(worst < 1e-3);
        let worst = max_relative_error(&[1.0], &[1.001], 1e-8);
        assert!((worst - 0.001 / 1.001).abs() < 1e-9);
    }
}
