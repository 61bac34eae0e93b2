//! Central-difference gradient oracle.
//!
//! Independent of the tape: evaluates a closure twice per coordinate, so it
//! can check any implementation path that produces a scalar from a tensor.

use crate::{Result, Tensor, TensorError};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
///
/// `f` must be deterministic; re-seed any randomness inside it.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(TensorError::NonPositiveStep { h });
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Max elementwise relative error with an absolute floor, for comparing a
/// computed gradient against the oracle.
pub fn max_rel_error(got: &Tensor, want: &Tensor, abs_floor: f64) -> f64 {
    got.data()
        .iter()
        .zip(want.data())
        .map(|(&g, &w)| (g - w).abs() / w.abs().max(abs_floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_two() {
        let x = Tensor::scalar(2.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-4).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn sum_of_sines() {
        let x = Tensor::from_vec(vec![0.0, std::f64::consts::FRAC_PI_2]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v.sin()).sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-8);
        assert!(g.data()[1].abs() < 1e-8);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(0.0);
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }
}
