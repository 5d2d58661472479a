//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition,
//! Cholesky factorization and the spectral norm.

use crate::array::NdArray;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAX_JACOBI_SWEEPS: usize = 100;

/// `M = U · diag(values) · Uᵀ` with eigenvalues in descending order and
/// eigenvectors in the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    pub vectors: NdArray<T>,
}

impl<T: Real> SymmetricEigen<T> {
    pub fn reconstruct(&self) -> NdArray<T> {
        let ud = scale_columns(&self.vectors, &self.values);
        ud.matmul(&self.vectors.transpose().expect("square")).expect("square")
    }
}

pub fn max_asymmetry<T: Real>(m: &NdArray<T>) -> T {
    let n = m.rows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m.at(i, j) - m.at(j, i)).abs());
        }
    }
    worst
}

fn require_square<T: Real>(m: &NdArray<T>) -> Result<usize> {
    if m.ndim() != 2 || m.rows() != m.cols() {
        return Err(Error::shape(format!("expected a square matrix, got {:?}", m.shape())));
    }
    Ok(m.rows())
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm falls below
/// `1e-12` (or the working precision floor for `f32`).
pub fn symmetric_eigendecompose<T: Real>(m: &NdArray<T>) -> Result<SymmetricEigen<T>> {
    let n = require_square(m)?;
    let asym = max_asymmetry(m);
    if asym > T::lit(1e-8) {
        return Err(Error::NotSymmetric(asym.to_f64_lossy()));
    }
    let mut a = m.clone();
    // symmetrize the tiny residual so rotations act on an exactly symmetric matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (a.at(i, j) + a.at(j, i)) * T::lit(0.5);
            a.set(i, j, s);
            a.set(j, i, s);
        }
    }
    let mut v = NdArray::identity(n);
    let tol = T::lit(1e-12).max(T::epsilon() * T::lit(4.0) * a.frobenius_sq().sqrt());

    let off_norm = |a: &NdArray<T>| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.at(i, j) * a.at(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off_norm(&a) >= tol {
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(Error::NoConvergence(sweeps));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                if apq == T::zero() {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // A ← Jᵀ A J for the rotation J in the (p, q) plane
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, T::zero());
                a.set(q, p, T::zero());
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(j, j).partial_cmp(&a.at(i, i)).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vectors = NdArray::zeros([n, n]);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.at(k, src));
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// `M · diag(d)`.
pub fn scale_columns<T: Real>(m: &NdArray<T>, d: &[T]) -> NdArray<T> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for (j, &dj) in d.iter().enumerate() {
            out.set(i, j, m.at(i, j) * dj);
        }
    }
    out
}

/// Lower-triangular `L` with `L·Lᵀ = M`; positive semidefinite inputs with
/// zero pivots get a zero column.
pub fn cholesky<T: Real>(m: &NdArray<T>) -> Result<NdArray<T>> {
    let n = require_square(m)?;
    let mut l = NdArray::zeros([n, n]);
    let tiny = T::epsilon() * T::lit(64.0) * m.max_abs().max(T::one());
    for j in 0..n {
        let mut d = m.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if d < -tiny {
            return Err(Error::NumericDomain(format!("matrix is not positive semidefinite (pivot {d})")));
        }
        let djj = d.max(T::zero()).sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let mut s = m.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, if djj > tiny { s / djj } else { T::zero() });
        }
    }
    Ok(l)
}

/// Largest singular value of a symmetric matrix (its largest |eigenvalue|).
pub fn spectral_norm_symmetric<T: Real>(m: &NdArray<T>) -> Result<T> {
    let e = symmetric_eigendecompose(m)?;
    Ok(e.values.iter().fold(T::zero(), |acc, v| acc.max(v.abs())))
}

/// Smallest eigenvalue, for positive-definiteness checks.
pub fn min_eigenvalue<T: Real>(m: &NdArray<T>) -> Result<T> {
    let e = symmetric_eigendecompose(m)?;
    Ok(*e.values.last().unwrap_or(&T::zero()))
}
