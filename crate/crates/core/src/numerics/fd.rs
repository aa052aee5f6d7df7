use crate::error::{LteError, Result};

/// Central-difference gradient of `f` at `p`:
/// `(f(p + eps·e_i) - f(p - eps·e_i)) / (2·eps)` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        x[i] = p[i] + eps;
        let up = f(&x);
        x[i] = p[i] - eps;
        let down = f(&x);
        x[i] = p[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(LteError::Numeric(format!(
                "non-finite objective at coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;

    #[test]
    fn quadratic_and_sigmoid() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|p| sigmoid(p[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn linear_function_is_exact() {
        let coef = [0.5, -2.0, 3.25, 0.0, 1.0];
        let g = finite_diff_grad(
            |p| p.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + 7.0,
            &[0.1, 0.2, -0.3, 4.0, 5.0],
            1e-3,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&coef) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_is_error() {
        assert!(finite_diff_grad(|p| 1.0 / p[0], &[0.0], 0.0).is_err());
    }
}
