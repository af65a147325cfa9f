//! Central finite differences, the gradient oracle used throughout the tests.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NumericalAbort(format!(
                "non-finite probe value at coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative error between two gradient vectors: ||a - b|| / max(||b||, floor).
pub fn gradient_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|&y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let f = |t: &Tensor| Ok(2.0 * t.data()[0] - 3.0 * t.data()[1] + 0.5 * t.data()[2]);
        for h in [1e-2, 1e-5, 1e-7] {
            let g = finite_difference_gradient(f, &x, h).unwrap();
            assert!((g.data()[0] - 2.0).abs() < 1e-6);
            assert!((g.data()[1] + 3.0).abs() < 1e-6);
            assert!((g.data()[2] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn exp_at_zero() {
        let x = Tensor::scalar(0.0);
        let g = finite_difference_gradient(|t| Ok(t.data()[0].exp()), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(0.0);
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
