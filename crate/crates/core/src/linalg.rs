//! Small dense linear algebra for channel-mixing matrices and Jacobian oracles.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// LU factorization with partial pivoting of a row-major `n×n` matrix.
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    sign: T,
}

impl<T: Scalar> Lu<T> {
    pub fn new(a: &[T], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::dim(format!("expected a {n}x{n} matrix, got {} values", a.len())));
        }
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    lu[i * n + col]
                        .abs()
                        .partial_cmp(&lu[j * n + col].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(col);
            if pivot != col {
                for k in 0..n {
                    lu.swap(col * n + k, pivot * n + k);
                }
                perm.swap(col, pivot);
                sign = -sign;
            }
            let d = lu[col * n + col];
            if d == T::zero() {
                continue;
            }
            for row in col + 1..n {
                let f = lu[row * n + col] / d;
                lu[row * n + col] = f;
                for k in col + 1..n {
                    lu[row * n + k] = lu[row * n + k] - f * lu[col * n + k];
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    pub fn det(&self) -> T {
        (0..self.n).fold(self.sign, |acc, i| acc * self.lu[i * self.n + i])
    }

    /// `log|det|`, summed over the diagonal to stay finite for large matrices.
    pub fn log_abs_det(&self) -> T {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn min_abs_pivot(&self) -> T {
        (0..self.n).fold(T::infinity(), |m, i| m.min(self.lu[i * self.n + i].abs()))
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                x[i] = x[i] - self.lu[i * n + k] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                x[i] = x[i] - self.lu[i * n + k] * x[k];
            }
            x[i] = x[i] / self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

/// Inverse of an invertible matrix, rejecting near-singular input.
pub fn invert<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    let lu = Lu::new(a, n)?;
    check_invertible(&lu)?;
    Ok(lu.inverse())
}

pub(crate) fn check_invertible<T: Scalar>(lu: &Lu<T>) -> Result<()> {
    let det = lu.det().abs().as_f64();
    if !(det > 1e-12) || lu.min_abs_pivot().as_f64() < 1e-12 {
        return Err(Error::Singularity(format!(
            "matrix is singular or near-singular (|det| = {det:e})"
        )));
    }
    Ok(())
}

/// Orthonormalizes the rows of a square matrix by modified Gram–Schmidt.
pub fn orthonormalize<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut q = a.to_vec();
    for i in 0..n {
        for j in 0..i {
            let dot: T = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
            for k in 0..n {
                q[i * n + k] = q[i * n + k] - dot * q[j * n + k];
            }
        }
        let norm = (0..n).map(|k| q[i * n + k] * q[i * n + k]).sum::<T>().sqrt();
        if norm.as_f64() < 1e-12 {
            return Err(Error::Singularity("rank-deficient matrix".into()));
        }
        for k in 0..n {
            q[i * n + k] = q[i * n + k] / norm;
        }
    }
    Ok(q)
}
