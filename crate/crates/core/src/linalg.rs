//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! Everything here works on heap matrices of the size a sensor model uses
//! (a handful of states), so clarity wins over blocking or BLAS tricks.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for numeric rank decisions.
pub const RANK_TOLERANCE: f64 = 1e-8;

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn ensure_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())))
    }
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    ensure_square(a, "matrix")?;
    ensure_finite(a, "matrix")?;
    if a.nrows() == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    let eig = a.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numeric rank: number of singular values above `RANK_TOLERANCE * sigma_max`.
pub fn numeric_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    match sv.first() {
        Some(&top) if top > 0.0 => sv.iter().filter(|&&s| s > RANK_TOLERANCE * top).count(),
        _ => 0,
    }
}

/// Stacks `C, CA, ..., CA^{n-1}`.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = c.nrows();
    let mut out = DMatrix::zeros(m * n, n);
    let mut block = c.clone();
    for k in 0..n {
        out.view_mut((k * m, 0), (m, n)).copy_from(&block);
        block = &block * a;
    }
    out
}

/// Concatenates `B, AB, ..., A^{n-1}B`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let k = b.ncols();
    let mut out = DMatrix::zeros(n, n * k);
    let mut block = b.clone();
    for j in 0..n {
        out.view_mut((0, j * k), (n, k)).copy_from(&block);
        block = a * &block;
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = symmetrize(m);
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Lower Cholesky factor, used to colour Gaussian noise.
pub fn cholesky_factor(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    symmetrize(m).cholesky().map(|c| c.l()).ok_or_else(|| Error::Assumption(format!("{what} is not positive definite")))
}

/// `A X A^T`.
pub fn congruence(a: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    a * x * a.transpose()
}

/// Eigenvector matrix of a diagonalizable real matrix, columns normalized to
/// unit Euclidean length.
///
/// Eigenvalues closer than `1e-8 * max(1, rho)` are grouped and the group's
/// eigenspace is taken from the trailing right singular vectors of
/// `A - lambda I`. A group whose eigenspace is smaller than its algebraic
/// multiplicity means the matrix is defective, which is reported as
/// [`Error::Unsupported`].
pub fn eigenvector_matrix(a: &DMatrix<f64>) -> Result<DMatrix<Complex64>> {
    ensure_square(a, "matrix")?;
    ensure_finite(a, "matrix")?;
    let n = a.nrows();
    let eig: Vec<Complex64> = a.complex_eigenvalues().iter().copied().collect();
    let rho = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let group_tol = 1e-8 * rho.max(1.0);

    let mut groups: Vec<(Complex64, usize)> = Vec::new();
    'outer: for &lambda in &eig {
        for g in groups.iter_mut() {
            if (g.0 - lambda).norm() <= group_tol {
                g.1 += 1;
                continue 'outer;
            }
        }
        groups.push((lambda, 1));
    }

    let ac: DMatrix<Complex64> = a.map(|v| Complex64::new(v, 0.0));
    let scale = a.norm().max(1.0);
    let mut u = DMatrix::<Complex64>::zeros(n, n);
    let mut col = 0;
    for (lambda, mult) in groups {
        let shifted = &ac - DMatrix::<Complex64>::identity(n, n) * lambda;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested V^H");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
        for &idx in order.iter().take(mult) {
            if svd.singular_values[idx] > 1e-6 * scale {
                return Err(Error::Unsupported(format!("matrix is defective near eigenvalue {lambda}")));
            }
            // Row `idx` of V^H is the conjugate of a right singular vector.
            let v: Vec<Complex64> = v_t.row(idx).iter().map(|z| z.conj()).collect();
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            for (r, z) in v.iter().enumerate() {
                u[(r, col)] = z / norm;
            }
            col += 1;
        }
    }

    let sv = u.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin <= 1e-8 * smax {
        return Err(Error::Unsupported("eigenvectors are numerically dependent".into()));
    }
    Ok(u)
}

/// `lambda_min(U U^H) * lambda_min(U^{-1} U^{-H})` for the unit-column
/// eigenvector matrix `U` of `a`.
///
/// Both factors are read off the singular values of `U`:
/// `lambda_min(U U^H) = s_min^2` and `lambda_min(U^{-1} U^{-H}) = 1 / s_max^2`.
pub fn eigenbasis_conditioning(a: &DMatrix<f64>) -> Result<f64> {
    let u = eigenvector_matrix(a)?;
    let sv = u.svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((smin * smin) / (smax * smax))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_radius_examples() {
        assert_relative_eq!(spectral_radius(&DMatrix::identity(2, 2)).unwrap(), 1.0, max_relative = 1e-12);
        let d = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, -0.3]);
        assert_relative_eq!(spectral_radius(&d).unwrap(), 1.2, max_relative = 1e-12);
        // lambda^2 + 2 = 0
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 0.0]);
        assert_relative_eq!(spectral_radius(&rot).unwrap(), 2f64.sqrt(), max_relative = 1e-10);
    }

    #[test]
    fn spectral_radius_rejects_bad_input() {
        let rect = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(spectral_radius(&rect), Err(Error::Dimension(_))));
        let nan = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(spectral_radius(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rank_of_observability() {
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 1.0, 0.0, 1.2]);
        let c_full = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let c_blind = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert_eq!(numeric_rank(&observability_matrix(&a, &c_full)), 1 + 1);
        assert_eq!(numeric_rank(&observability_matrix(&a, &c_blind)), 1);
    }

    #[test]
    fn conditioning_of_normal_and_skewed_bases() {
        let diag = DMatrix::from_row_slice(2, 2, &[1.1, 0.0, 0.0, 1.3]);
        assert_relative_eq!(eigenbasis_conditioning(&diag).unwrap(), 1.0, max_relative = 1e-10);
        let rot = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.5, 1.0]);
        assert_relative_eq!(eigenbasis_conditioning(&rot).unwrap(), 1.0, max_relative = 1e-8);
        let skew = DMatrix::from_row_slice(2, 2, &[1.1, 2.0, 0.0, 1.3]);
        let z = eigenbasis_conditioning(&skew).unwrap();
        assert!(z > 0.0 && z < 1.0);
    }

    #[test]
    fn repeated_semisimple_eigenvalue_is_fine_but_jordan_block_is_not() {
        let scaled = DMatrix::identity(3, 3) * 1.4;
        assert_relative_eq!(eigenbasis_conditioning(&scaled).unwrap(), 1.0, max_relative = 1e-10);
        let jordan = DMatrix::from_row_slice(2, 2, &[1.2, 1.0, 0.0, 1.2]);
        assert!(matches!(eigenbasis_conditioning(&jordan), Err(Error::Unsupported(_))));
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = sym_sqrt(&m);
        assert!(max_abs_diff(&(&s * &s), &m) < 1e-12);
    }
}
