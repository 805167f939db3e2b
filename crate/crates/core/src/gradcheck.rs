//! Central finite differences, used as an independent oracle for the tape's
//! backward rules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default step for central differences in `f64`.
pub const DEFAULT_STEP: f64 = 1e-4;

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective returned {plus} / {minus} while perturbing coordinate {i}"
            )));
        }
        *g = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖)`, with a tiny floor so
/// two zero gradients compare equal.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.l2_norm().max(b.l2_norm()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_difference_grad(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn plain_sum_gives_ones() {
        let x = Tensor::vector(vec![-3.0, 0.25, 8.0]);
        let g = finite_difference_grad(|t| Ok(t.sum()), &x, DEFAULT_STEP).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::vector(vec![0.0]);
        let r = finite_difference_grad(|t| Ok(1.0 / t.data()[0].abs().min(1e-300) * f64::INFINITY), &x, 1e-4);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(finite_difference_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }
}
