use crate::tensor::{Element, Tensor};

/// Central-difference gradient estimate of a scalar function.
///
/// Element `i` is perturbed by `h = eps · max(1, |x_i|)` in each direction
/// and the estimate is `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_diff<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let h = eps * orig.abs().max(T::one());
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (h + h));
    }
    Tensor::from_vec(x.shape(), out).expect("same shape as x")
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both are exactly zero.
pub fn relative_error<T: Element>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    relative_error_floored(analytic, numeric, 0.0)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`. The floor keeps gradients that are
/// zero in exact arithmetic (a bias cancelled by a following batch norm)
/// from being judged on rounding noise alone.
pub fn relative_error_floored<T: Element>(
    analytic: &Tensor<T>,
    numeric: &Tensor<T>,
    floor: f64,
) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in analytic.data().iter().zip(numeric.data()) {
        let (a, b) = (a.to_f64(), b.to_f64());
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    let denom = na.max(nb).sqrt().max(floor);
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::from_fn((1, 2, 2, 2), |i| i as f64 * 0.7 - 2.0);
        let g = finite_diff(|t| t.sum(), &x, 1e-5);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::<f64>::from_fn((1, 3, 1, 1), |i| i as f64);
        let g = finite_diff(|_| 4.2, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_edge_cases() {
        let z = Tensor::<f64>::zeros((1, 2, 1, 1));
        assert_eq!(relative_error(&z, &z), 0.0);
        let a = Tensor::<f64>::vector(vec![1.0, 0.0]);
        let b = Tensor::<f64>::vector(vec![1.0, 1e-3]);
        assert!((relative_error(&a, &b) - 1e-3 / (1.0f64 + 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn floor_only_matters_for_tiny_gradients() {
        let a = Tensor::<f64>::vector(vec![1e-17, 0.0]);
        let n = Tensor::<f64>::vector(vec![2e-11, -1e-11]);
        assert!(relative_error(&a, &n) > 0.9);
        assert!(relative_error_floored(&a, &n, 1e-6) < 1e-4);
        let a = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let n = Tensor::<f64>::vector(vec![1.1, 2.0]);
        assert_eq!(relative_error(&a, &n), relative_error_floored(&a, &n, 1e-6));
    }
}
