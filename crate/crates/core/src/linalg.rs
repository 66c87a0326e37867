//! Dense complex linear algebra used throughout the crate: Hermitian and
//! general (non-normal) eigendecompositions, companion-matrix polynomial
//! roots, and a few small matrix utilities.
//!
//! The general eigensolver goes through nalgebra's complex Schur form and
//! recovers eigenvectors by back-substitution on the triangular factor. Left
//! eigenvectors are the rows of the inverse of the right eigenvector matrix,
//! so `left.row(j) * right.column(k) = delta_jk`.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

const SCHUR_MAX_ITER: usize = 100_000;

/// Right/left eigenpairs of a general complex matrix.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<C64>,
    /// Unit-norm right eigenvectors as columns.
    pub right: DMatrix<C64>,
    /// Inverse of `right`; its rows are the dual (left) eigenvectors.
    pub left: DMatrix<C64>,
    /// 2-norm condition number of `right`.
    pub condition: f64,
}

pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Max-entry deviation of `m` from the identity.
pub fn identity_deviation(m: &DMatrix<C64>) -> f64 {
    let n = m.nrows();
    max_abs(&(m - DMatrix::<C64>::identity(n, n)))
}

pub fn unitarity_deviation(m: &DMatrix<C64>) -> f64 {
    identity_deviation(&(m.adjoint() * m))
}

/// `<a|b>` with the conjugate on the left argument.
pub fn inner(a: &DVector<C64>, b: &DVector<C64>) -> C64 {
    a.dotc(b)
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn hermitian_eigen(h: &DMatrix<C64>) -> Result<(Vec<f64>, DMatrix<C64>)> {
    let n = h.nrows();
    if n == 0 || h.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "Hamiltonian must be square and non-empty, got {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    let dev = max_abs(&(h - h.adjoint()));
    if dev > 1e-12 * (1.0 + max_abs(h)) {
        return Err(Error::NonHermitian { deviation: dev });
    }
    let herm = (h + h.adjoint()).scale(0.5);
    let eig = SymmetricEigen::try_new(herm, f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::Linalg("Hermitian eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let energies = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((energies, vectors))
}

fn schur(a: &DMatrix<C64>) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    Schur::try_new(a.clone(), f64::EPSILON, SCHUR_MAX_ITER)
        .map(|s| s.unpack())
        .ok_or_else(|| Error::Linalg("complex Schur iteration did not converge".into()))
}

/// Eigenvalues of a general complex matrix (diagonal of its Schur form).
pub fn eigenvalues(a: &DMatrix<C64>) -> Result<Vec<C64>> {
    if a.nrows() == 1 {
        return Ok(vec![a[(0, 0)]]);
    }
    let (_, t) = schur(a)?;
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

/// Full eigendecomposition of a general complex matrix.
pub fn eigen_general(a: &DMatrix<C64>) -> Result<Eigen> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::DimensionMismatch("eigenproblem needs a square matrix".into()));
    }
    let (q, t) = if n == 1 {
        (DMatrix::identity(1, 1), a.clone())
    } else {
        schur(a)?
    };
    let values: Vec<C64> = (0..n).map(|i| t[(i, i)]).collect();
    let small = f64::EPSILON * max_abs(&t).max(f64::MIN_POSITIVE);

    let mut right = DMatrix::<C64>::zeros(n, n);
    for k in 0..n {
        let mut y = DVector::<C64>::zeros(n);
        y[k] = C64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut acc = C64::new(0.0, 0.0);
            for j in (i + 1)..=k {
                acc += t[(i, j)] * y[j];
            }
            let mut denom = t[(i, i)] - values[k];
            if denom.norm() < small {
                denom = C64::new(small, 0.0);
            }
            y[i] = -acc / denom;
        }
        let mut v = &q * y;
        let norm = v.norm();
        v.unscale_mut(norm);
        right.set_column(k, &v);
    }

    let sv = right.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let left = right
        .clone()
        .try_inverse()
        .ok_or(Error::IllConditioned { condition })?;
    Ok(Eigen {
        values,
        right,
        left,
        condition,
    })
}

/// Sorts eigenvalues by descending modulus, then by descending phase in
/// `(-pi, pi]`. Moduli within a relative `1e-9` count as equal.
pub fn order_by_modulus_then_phase(values: &mut [C64]) {
    values.sort_by(|a, b| {
        let (ma, mb) = (a.norm(), b.norm());
        if (ma - mb).abs() <= 1e-9 * ma.max(mb) {
            b.arg().total_cmp(&a.arg())
        } else {
            mb.total_cmp(&ma)
        }
    });
}

/// Solve `a x = b` by LU with partial pivoting.
pub fn solve(a: &DMatrix<C64>, b: &DVector<C64>) -> Result<DVector<C64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Linalg("singular linear system".into()))
}

/// Product of two polynomials given by ascending coefficients.
pub fn poly_mul(a: &[C64], b: &[C64]) -> Vec<C64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![C64::new(0.0, 0.0); a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Horner evaluation; returns `(p(z), p'(z))`.
pub fn poly_eval(coeffs: &[C64], z: C64) -> (C64, C64) {
    let mut p = C64::new(0.0, 0.0);
    let mut dp = C64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// Roots of a polynomial (ascending coefficients) from the eigenvalues of
/// its companion matrix, each polished by a few Newton steps.
pub fn poly_roots(coeffs: &[C64]) -> Result<Vec<C64>> {
    let mut coeffs = coeffs.to_vec();
    let scale = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    while coeffs.len() > 1 && coeffs.last().unwrap().norm() <= 1e-14 * scale {
        coeffs.pop();
    }
    let degree = coeffs.len().saturating_sub(1);
    if degree == 0 {
        return Ok(Vec::new());
    }
    let lead = coeffs[degree];
    let mut companion = DMatrix::<C64>::zeros(degree, degree);
    for i in 1..degree {
        companion[(i, i - 1)] = C64::new(1.0, 0.0);
    }
    for i in 0..degree {
        companion[(i, degree - 1)] = -coeffs[i] / lead;
    }
    let mut roots = eigenvalues(&companion)?;
    if roots.iter().any(|r| !r.re.is_finite() || !r.im.is_finite()) {
        return Err(Error::NotConverged("companion eigenvalues are not finite".into()));
    }
    for r in roots.iter_mut() {
        for _ in 0..4 {
            let (p, dp) = poly_eval(&coeffs, *r);
            if dp.norm() == 0.0 {
                break;
            }
            let step = p / dp;
            // Newton is only trusted as a polish, not to move between roots.
            if !(step.norm() < 1e-6 * (1.0 + r.norm())) {
                break;
            }
            *r -= step;
        }
    }
    Ok(roots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn roots_of_known_cubic() {
        // (z - 1)(z + 2)(z - i)
        let p = poly_mul(&poly_mul(&[c(-1.0, 0.0), c(1.0, 0.0)], &[c(2.0, 0.0), c(1.0, 0.0)]), &[c(0.0, -1.0), c(1.0, 0.0)]);
        let mut roots = poly_roots(&p).unwrap();
        roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        let expected = [c(-2.0, 0.0), c(0.0, 1.0), c(1.0, 0.0)];
        for (r, e) in roots.iter().zip(expected.iter()) {
            assert!((r - e).norm() < 1e-12, "{r} vs {e}");
        }
    }

    #[test]
    fn constant_polynomial_has_no_roots() {
        assert!(poly_roots(&[c(3.0, 1.0)]).unwrap().is_empty());
    }

    #[test]
    fn general_eigen_biorthogonal() {
        let a = DMatrix::from_fn(4, 4, |i, j| c((i as f64 - j as f64 * 0.7).sin(), 0.3 * (i * j) as f64 - 0.2));
        let e = eigen_general(&a).unwrap();
        let lr = &e.left * &e.right;
        assert!(identity_deviation(&lr) < 1e-12);
        for k in 0..4 {
            let v = e.right.column(k).into_owned();
            let res = &a * &v - v.scale(1.0) * e.values[k];
            assert!(res.norm() < 1e-12);
        }
        assert!(e.condition >= 1.0);
    }

    #[test]
    fn hermitian_eigen_sorted_and_unitary() {
        let h = DMatrix::from_fn(3, 3, |i, j| {
            if i == j {
                c(i as f64, 0.0)
            } else if i < j {
                c(0.5, 0.25 * (j - i) as f64)
            } else {
                c(0.5, -0.25 * (i - j) as f64)
            }
        });
        let (e, v) = hermitian_eigen(&h).unwrap();
        assert!(e.windows(2).all(|w| w[0] <= w[1]));
        assert!(unitarity_deviation(&v) < 1e-13);
    }

    #[test]
    fn non_hermitian_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        assert!(matches!(hermitian_eigen(&h), Err(Error::NonHermitian { .. })));
    }
}
