//! Central finite differences, the reference every analytic gradient in the
//! crate is checked against.

use crate::error::{Result, SgsError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probe step for [`finite_diff`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step<S> {
    /// The same step for every coordinate.
    Absolute(S),
    /// `base * max(1, |x_i|)` per coordinate.
    Relative(S),
}

impl<S: Scalar> Default for Step<S> {
    fn default() -> Self {
        Step::Relative(S::lit(1e-6))
    }
}

impl<S: Scalar> Step<S> {
    fn at(self, x: S) -> S {
        match self {
            Step::Absolute(h) => h,
            Step::Relative(h) => h * x.abs().max(S::one()),
        }
    }

    fn base(self) -> S {
        match self {
            Step::Absolute(h) | Step::Relative(h) => h,
        }
    }
}

/// Failure of a finite-difference probe.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FiniteDiffError {
    #[error("function value is not finite when probing coordinate {index}")]
    NonFinite { index: usize },
    #[error(transparent)]
    Sgs(#[from] SgsError),
}

/// `grad[i] = (f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff<S, F>(f: F, at: &Tensor<S>, step: Step<S>) -> Result<Tensor<S>, FiniteDiffError>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> S,
{
    if !(step.base() > S::zero()) {
        return Err(SgsError::Config("finite difference step must be positive".into()).into());
    }
    let mut probe = at.clone();
    let mut grad = Tensor::zeros(at.shape().to_vec());
    for i in 0..at.len() {
        let x = at.data()[i];
        let h = step.at(x);
        probe.data_mut()[i] = x + h;
        let plus = f(&probe);
        probe.data_mut()[i] = x - h;
        let minus = f(&probe);
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FiniteDiffError::NonFinite { index: i });
        }
        grad.data_mut()[i] = (plus - minus) / (h + h);
    }
    Ok(grad)
}

/// Largest `|a - n| / max(1, |a|, |n|)` over all entries: relative for large
/// gradients, absolute for entries below one.
pub fn max_rel_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> S {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / S::one().max(a.abs()).max(n.abs()))
        .fold(S::zero(), S::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let at = Tensor::new(vec![1], vec![3.0_f64]).unwrap();
        let g = finite_diff(|x| x.sum_squares(), &at, Step::Absolute(1e-6)).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let at = Tensor::new(vec![2, 2], vec![1.0, -4.0, 1e3, 0.0]).unwrap();
        let g = finite_diff(|_| 5.0, &at, Step::default()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cubic_polynomial_matches_symbolic() {
        // f = x^3 - 2xy + y^2, df/dx = 3x^2 - 2y, df/dy = -2x + 2y
        let f = |t: &Tensor| {
            let (x, y) = (t.data()[0], t.data()[1]);
            x * x * x - 2.0 * x * y + y * y
        };
        let at = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap();
        let g = finite_diff(f, &at, Step::default()).unwrap();
        assert!((g.data()[0] - (3.0 * 2.25 + 1.0)).abs() < 1e-8);
        assert!((g.data()[1] - (-3.0 - 1.0)).abs() < 1e-8);
    }

    #[test]
    fn reports_failing_coordinate() {
        let at = Tensor::new(vec![3], vec![1.0, 1e-4, 2.0]).unwrap();
        let f = |t: &Tensor| t.data().iter().map(|v| v.ln()).sum::<f64>();
        let err = finite_diff(f, &at, Step::Absolute(1e-3)).unwrap_err();
        assert_eq!(err, FiniteDiffError::NonFinite { index: 1 });
    }

    #[test]
    fn rejects_non_positive_step() {
        let at = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(finite_diff(|x| x.sum(), &at, Step::Absolute(0.0)).is_err());
    }
}
