//! Central finite differences: the numerical Jacobian oracle and gradient
//! checks against the tape.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest input the Jacobian oracle accepts.
pub const MAX_JACOBIAN_INPUTS: usize = 64;

/// Finite-difference step for coordinate value `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// `J[i][j] = ∂f_i/∂x_j` by central differences, returned as an `[m, n]` tensor.
pub fn numerical_jacobian<F>(f: F, x: &Tensor<f64>) -> Result<Tensor<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.numel();
    if n > MAX_JACOBIAN_INPUTS {
        return Err(Error::contract(format!(
            "numerical Jacobian limited to {MAX_JACOBIAN_INPUTS} inputs, got {n}"
        )));
    }
    let eval = |p: &[f64]| -> Result<Vec<f64>> {
        let y = f(p)?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "numerical_jacobian",
                format!("function produced a non-finite output at index {i}"),
            ));
        }
        Ok(y)
    };
    let m = eval(x.data())?.len();
    let mut jac = vec![0.0; m * n];
    let mut p = x.data().to_vec();
    for j in 0..n {
        let h = fd_step(x.data()[j]);
        p[j] = x.data()[j] + h;
        let fp = eval(&p)?;
        p[j] = x.data()[j] - h;
        let fm = eval(&p)?;
        p[j] = x.data()[j];
        if fp.len() != m || fm.len() != m {
            return Err(Error::contract("function output length changed between calls"));
        }
        for i in 0..m {
            jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Tensor::new(vec![m, n], jac)
}

/// Central-difference gradient of a scalar function, using `step` per coordinate.
pub fn numerical_gradient<F>(f: F, x: &[f64], step: impl Fn(f64) -> f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = step(x[j]);
        p[j] = x[j] + h;
        let fp = f(&p)?;
        p[j] = x[j] - h;
        let fm = f(&p)?;
        p[j] = x[j];
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// `‖a − b‖₂ / max(‖b‖₂, floor)`; `floor` keeps all-zero references comparable.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// `log|det|` of a square Jacobian tensor.
pub fn log_abs_det(jac: &Tensor<f64>) -> Result<f64> {
    match jac.shape() {
        [m, n] if m == n => Ok(crate::linalg::Lu::new(jac.data(), *n)?.log_abs_det()),
        s => Err(Error::dim(format!("log-det needs a square matrix, got {s:?}"))),
    }
}

/// Converts a tensor of any float type into the f64 form the oracles use.
pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map() {
        let x = Tensor::from_vec(vec![0.4, -0.7]);
        let j = numerical_jacobian(|p| Ok(p.iter().map(|v| 2.0 * v).collect()), &x).unwrap();
        let want = [2.0, 0.0, 0.0, 2.0];
        for (a, b) in j.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn diagonal_map() {
        let x = Tensor::from_vec(vec![3.0, 5.0]);
        let j = numerical_jacobian(|p| Ok(vec![p[0] * p[0], p[1]]), &x).unwrap();
        let want = [6.0, 0.0, 0.0, 1.0];
        for (a, b) in j.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_output_propagates() {
        let x = Tensor::from_vec(vec![1.0]);
        let r = numerical_jacobian(|_| Ok(vec![f64::NAN]), &x);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn rejects_large_inputs() {
        let x = Tensor::from_vec(vec![0.0; 65]);
        assert!(numerical_jacobian(|p| Ok(p.to_vec()), &x).is_err());
    }
}
