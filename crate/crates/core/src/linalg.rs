//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{CoreError, Result};

/// Largest condition number accepted for any inverted Gram matrix.
pub const CONDITION_GATE: f64 = 1e12;
/// Eigenvalue floor used by inverse square roots.
pub const EIGEN_FLOOR: f64 = 1e-14;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

fn spectral_map(m: &DMatrix<f64>, map: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mapped = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| map(l)));
    &eig.eigenvectors * DMatrix::from_diagonal(&mapped) * eig.eigenvectors.transpose()
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clipped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |l| l.max(0.0).sqrt())
}

/// Symmetric inverse square root with eigenvalues floored at [`EIGEN_FLOOR`].
pub fn inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |l| 1.0 / l.max(EIGEN_FLOOR).sqrt())
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

/// `λ_max / λ_min` of a symmetric matrix; infinite when `λ_min <= 0`.
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let (lo, hi) = (ev.min(), ev.max());
    if lo <= 0.0 || !lo.is_finite() || !hi.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Inverse of a symmetric positive-definite matrix behind the condition gate.
pub fn gated_spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let cond = sym_condition(m);
    if !(cond < CONDITION_GATE) {
        return Err(CoreError::SingularMoments(format!("{what}: condition number {cond:.3e}")));
    }
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| CoreError::SingularMoments(format!("{what}: not positive definite")))?;
    Ok(chol.inverse())
}

/// Ratio of largest to smallest singular value.
pub fn svd_condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let (lo, hi) = (sv.min(), sv.max());
    if lo <= 0.0 { f64::INFINITY } else { hi / lo }
}

/// Inverse of a general square matrix behind the condition gate.
pub fn gated_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let cond = svd_condition(m);
    if !(cond < CONDITION_GATE) {
        return Err(CoreError::SingularMoments(format!("{what}: condition number {cond:.3e}")));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| CoreError::SingularMoments(format!("{what}: inversion failed")))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking vectorization: entry `(i, j)` lands at `i + j * rows`.
pub fn vec_col(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec_col(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

/// Real eigen-basis of a diagonalizable matrix.
///
/// `basis` holds eigenvectors as columns (real and imaginary parts for complex pairs) and
/// `block` is the matching real block-diagonal form, so `m * basis = basis * block`.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    /// One entry per column of `basis`.
    pub eigenvalues: Vec<Complex64>,
    pub basis: DMatrix<f64>,
    pub block: DMatrix<f64>,
    pub residual: f64,
    pub condition: f64,
}

/// Relative residual above which a matrix is declared non-diagonalizable.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-6;

pub fn eigen_basis(m: &DMatrix<f64>) -> Result<EigenBasis> {
    if !m.is_square() {
        return Err(CoreError::InvalidInput("eigen_basis needs a square matrix".into()));
    }
    let d = m.nrows();
    let scale = m.norm().max(1.0);
    let tol = 1e-7 * scale;
    let mut eig: Vec<Complex64> = m.complex_eigenvalues().iter().copied().collect();
    for l in eig.iter_mut() {
        if l.im.abs() <= 1e-10 * scale {
            l.im = 0.0;
        }
    }
    eig.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));

    // Clusters of (numerically) equal eigenvalues, keeping one representative per conjugate pair.
    let mut clusters: Vec<(Complex64, usize)> = Vec::new();
    for l in eig.iter().filter(|l| l.im >= 0.0) {
        match clusters.iter_mut().find(|(c, _)| (c - l).norm() <= tol) {
            Some((c, k)) => {
                *c = (*c * *k as f64 + l) / (*k as f64 + 1.0);
                *k += 1;
            }
            None => clusters.push((*l, 1)),
        }
    }

    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(d);
    let mut values: Vec<Complex64> = Vec::with_capacity(d);
    let mut block = DMatrix::<f64>::zeros(d, d);
    for (lambda, mult) in clusters {
        if lambda.im == 0.0 {
            let shifted = m - DMatrix::identity(d, d) * lambda.re;
            let svd = shifted.svd(false, true);
            let v_t = svd.v_t.expect("requested");
            for r in (d - mult)..d {
                let col = v_t.row(r).transpose();
                let k = columns.len();
                block[(k, k)] = lambda.re;
                columns.push(col.normalize());
                values.push(lambda);
            }
        } else {
            let mc: DMatrix<Complex64> = m.map(|v| Complex64::new(v, 0.0));
            let shifted = mc - DMatrix::<Complex64>::identity(d, d) * lambda;
            let svd = shifted.svd(false, true);
            let v_t = svd.v_t.expect("requested");
            for r in (d - mult)..d {
                let v: Vec<Complex64> = v_t.row(r).iter().map(|z| z.conj()).collect();
                let re = DVector::from_iterator(d, v.iter().map(|z| z.re));
                let im = DVector::from_iterator(d, v.iter().map(|z| z.im));
                let k = columns.len();
                if k + 2 > d {
                    break;
                }
                // m (x + iy) = (a + ib)(x + iy)  =>  m x = a x - b y,  m y = b x + a y.
                block[(k, k)] = lambda.re;
                block[(k + 1, k)] = -lambda.im;
                block[(k, k + 1)] = lambda.im;
                block[(k + 1, k + 1)] = lambda.re;
                columns.push(re);
                columns.push(im);
                values.push(lambda);
                values.push(lambda.conj());
            }
        }
    }
    if columns.len() != d {
        return Err(CoreError::NonDiagonalizable { residual: f64::INFINITY, condition: f64::INFINITY });
    }
    let basis = DMatrix::from_columns(&columns);
    let residual = (m * &basis - &basis * &block).norm() / (scale * basis.norm());
    let condition = svd_condition(&basis);
    if !(residual <= EIGEN_RESIDUAL_TOL) || !(condition < CONDITION_GATE) {
        return Err(CoreError::NonDiagonalizable { residual, condition });
    }
    Ok(EigenBasis { eigenvalues: values, basis, block, residual, condition })
}

/// `|det(m - λI)|` scaled by `max(1, ‖m‖)^d`.
pub fn relative_char_poly(m: &DMatrix<f64>, lambda: Complex64) -> f64 {
    let d = m.nrows();
    let mc: DMatrix<Complex64> = m.map(|v| Complex64::new(v, 0.0));
    let shifted = mc - DMatrix::<Complex64>::identity(d, d) * lambda;
    let det = shifted.lu().determinant();
    det.norm() / m.norm().max(1.0).powi(d as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn inverse_square_root_whitens() {
        let m = dmatrix![2.0, 0.5, 0.1; 0.5, 1.0, 0.2; 0.1, 0.2, 0.7];
        let w = inv_sqrt(&m);
        let id = &w * &m * &w;
        assert!((id - DMatrix::identity(3, 3)).amax() < 1e-12);
        let s = sym_sqrt(&m);
        assert!((&s * &s - &m).amax() < 1e-12);
    }

    #[test]
    fn vec_is_column_stacking() {
        let m = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert_eq!(vec_col(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec_col(&[1.0, 3.0, 2.0, 4.0], 2, 2), m);
    }

    #[test]
    fn kronecker_vec_identity() {
        // vec(A X B) = (Bᵀ ⊗ A) vec(X)
        let a = dmatrix![1.0, 2.0; 0.5, -1.0];
        let x = dmatrix![0.3, 0.7; -0.2, 1.1];
        let b = dmatrix![2.0, 0.0; 1.0, 3.0];
        let lhs = vec_col(&(&a * &x * &b));
        let rhs = kron(&b.transpose(), &a) * vec_col(&x);
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn gate_rejects_singular() {
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        assert!(matches!(gated_spd_inverse(&m, "m"), Err(CoreError::SingularMoments(_))));
        assert!(matches!(gated_inverse(&m, "m"), Err(CoreError::SingularMoments(_))));
    }

    #[test]
    fn eigen_basis_real_distinct() {
        let m = dmatrix![0.9, 0.2, 0.0; 0.1, 0.5, 0.3; 0.0, 0.0, 0.2];
        let e = eigen_basis(&m).unwrap();
        assert!((&m * &e.basis - &e.basis * &e.block).amax() < 1e-10);
    }

    #[test]
    fn eigen_basis_identity_and_rotation() {
        let e = eigen_basis(&DMatrix::identity(3, 3)).unwrap();
        assert!(e.eigenvalues.iter().all(|l| (l - Complex64::new(1.0, 0.0)).norm() < 1e-12));
        let r = dmatrix![0.6, -0.8; 0.8, 0.6];
        let e = eigen_basis(&r).unwrap();
        assert!((&r * &e.basis - &e.basis * &e.block).amax() < 1e-10);
        assert!(e.eigenvalues.iter().all(|l| (l.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn eigen_basis_rejects_jordan_block() {
        let j = dmatrix![1.0, 1.0; 0.0, 1.0];
        assert!(matches!(eigen_basis(&j), Err(CoreError::NonDiagonalizable { .. })));
    }

    #[test]
    fn char_poly_vanishes_at_eigenvalues() {
        let m = dmatrix![2.0, 1.0; 0.0, 3.0];
        assert!(relative_char_poly(&m, Complex64::new(2.0, 0.0)) < 1e-12);
        assert!(relative_char_poly(&m, Complex64::new(2.5, 0.0)) > 1e-3);
    }
}
