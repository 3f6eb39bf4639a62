use crate::autodiff::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar function against a
/// central-difference estimate and returns the max relative error
/// `|autodiff − numeric| / max(1e-8, |numeric|)` over coordinates.
///
/// The numeric estimate is Richardson-extrapolated from central differences
/// at `eps` and `eps/2`, which cancels the `O(eps²)` truncation term.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(point.dims().to_vec(), values)?);
        let y = f(&mut g, x)?;
        let v = g.value(y).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        Ok(v)
    };
    let central = |i: usize, h: f64| -> Result<f64> {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let coarse = central(i, eps)?;
        let fine = central(i, eps / 2.0)?;
        let numeric = (4.0 * fine - coarse) / 3.0;
        let err = (a - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops::Unary;

    fn point(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(
            |g, x| {
                let s = g.square(x)?;
                g.sum(s)
            },
            &point(&[0.3, -1.7, 2.0, 0.0]),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn silu_sum() {
        let err = finite_diff_check(
            |g, x| {
                let s = g.unary(x, Unary::Silu)?;
                g.sum(s)
            },
            &point(&[0.41, -1.93, 1.27, -0.55, 0.08]),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_diff_check(
            |g, _x| Ok(g.constant(Tensor::scalar(4.0))),
            &point(&[1.0, 2.0]),
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_check(|g, x| g.sum(x), &point(&[1.0]), 0.0).is_err());
    }
}
