use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient estimate of `f` at `x`.
///
/// Independent of the tape: `f` is only ever evaluated on perturbed copies of `x`.
pub fn finite_diff(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Argument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value probing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Max-abs error between two gradients, relative to their scale with a unit floor.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / analytic.max_abs().max(numeric.max_abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let g = finite_diff(
            |x| Ok(x.data()[0] * x.data()[0]),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_and_linear() {
        let x = Tensor::vector(vec![0.5, -2.0, 7.0]);
        let g = finite_diff(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g = finite_diff(|x| Ok(x.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let x = Tensor::scalar(0.0);
        let r = finite_diff(|x| Ok(1.0 / x.data()[0].max(0.0)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(finite_diff(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
