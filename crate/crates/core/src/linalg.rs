//! Small dense-matrix kernel.
//!
//! Matrices are [`nalgebra::DMatrix<f64>`], stored column-major. Nothing outside
//! this module depends on the storage order: every file format addresses
//! entries by explicit row and column index.
//!
//! Besides the usual vectorization and Kronecker helpers this module provides
//! the SPD factorization used wherever a covariance or precision matrix has to
//! be inverted, and a PSD factorization for sampling from possibly singular
//! Gaussian laws.

use nalgebra::{DMatrix, DVector};

use crate::error::LinalgError;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative symmetry tolerance accepted by [`spd_factorize`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Default relative tolerance for [`rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

/// Stacks the columns of `a`, leftmost column first.
pub fn vec(a: &Matrix) -> Vector {
    // column-major storage already is the stacked layout
    Vector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec`]: fills a `rows × cols` matrix column by column.
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Matrix, LinalgError> {
    if v.len() != rows * cols {
        return Err(LinalgError::DimMismatch {
            op: "unvec",
            left: (v.len(), 1),
            right: (rows, cols),
        });
    }
    Ok(Matrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Kronecker product: block `(i, j)` of the result is `a[(i, j)] * b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    let mut out = Matrix::zeros(p * r, q * s);
    for j in 0..q {
        for i in 0..p {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for bj in 0..s {
                for bi in 0..r {
                    out[(i * r + bi, j * s + bj)] = aij * b[(bi, bj)];
                }
            }
        }
    }
    out
}

/// Attaches `right` to the right of `left`, the `(A | B)` block notation.
pub fn hstack(left: &Matrix, right: &Matrix) -> Result<Matrix, LinalgError> {
    if left.nrows() != right.nrows() {
        return Err(LinalgError::DimMismatch {
            op: "hstack",
            left: left.shape(),
            right: right.shape(),
        });
    }
    let mut out = Matrix::zeros(left.nrows(), left.ncols() + right.ncols());
    out.columns_mut(0, left.ncols()).copy_from(left);
    out.columns_mut(left.ncols(), right.ncols()).copy_from(right);
    Ok(out)
}

/// `(a + aᵀ) / 2`.
pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

pub fn is_finite(a: &Matrix) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Whether [`spd_factorize`] may add a diagonal shift when plain Cholesky fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JitterPolicy {
    Disabled,
    /// Try `1e-12·Tr(A)/d`, then escalate ×10 up to `1e-6·Tr(A)/d`.
    #[default]
    Escalating,
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    lower: Matrix,
    jitter: f64,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Diagonal shift that was added before the factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L·Lᵀ`, i.e. the factorized matrix including any jitter.
    pub fn reconstruct(&self) -> Matrix {
        &self.lower * self.lower.transpose()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> Matrix {
        spd_solve(self, &Matrix::identity(self.dim(), self.dim()))
            .expect("identity has matching dimensions")
    }

    /// Solves `Lᵀ x = b`. Used to draw from `𝒩(0, A⁻¹)` given a factor of `A`.
    pub fn solve_upper(&self, b: &Vector) -> Vector {
        self.lower
            .tr_solve_lower_triangular(b)
            .expect("factor diagonal is strictly positive")
    }
}

fn check_symmetric(a: &Matrix) -> Result<(), LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { shape: a.shape() });
    }
    if !is_finite(a) {
        return Err(LinalgError::NonFinite);
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let asym = (a - a.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(LinalgError::NotSymmetric {
            asymmetry: asym / scale,
        });
    }
    Ok(())
}

fn cholesky_lower(a: &Matrix) -> Option<Matrix> {
    let n = a.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Cholesky factorization `L·Lᵀ = A (+ jitter·I)`.
///
/// `a` must be symmetric to [`SYMMETRY_TOL`] relative to its largest entry.
/// Fails with [`LinalgError::NotPd`] when even the largest allowed jitter does
/// not make the matrix factorizable.
pub fn spd_factorize(a: &Matrix, policy: JitterPolicy) -> Result<SpdFactor, LinalgError> {
    check_symmetric(a)?;
    let sym = symmetrize(a);
    if let Some(lower) = cholesky_lower(&sym) {
        return Ok(SpdFactor { lower, jitter: 0.0 });
    }
    let dim = sym.nrows();
    let scale = sym.trace() / dim as f64;
    if policy == JitterPolicy::Disabled || !(scale > 0.0) {
        return Err(LinalgError::NotPd { dim, jitter: 0.0 });
    }
    let mut level = JITTER_START;
    while level <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = level * scale;
        let mut shifted = sym.clone();
        for i in 0..dim {
            shifted[(i, i)] += jitter;
        }
        if let Some(lower) = cholesky_lower(&shifted) {
            return Ok(SpdFactor { lower, jitter });
        }
        level *= 10.0;
    }
    Err(LinalgError::NotPd {
        dim,
        jitter: JITTER_MAX * scale,
    })
}

/// Solves `A·X = B` given the factor of `A`.
pub fn spd_solve(factor: &SpdFactor, b: &Matrix) -> Result<Matrix, LinalgError> {
    if b.nrows() != factor.dim() {
        return Err(LinalgError::DimMismatch {
            op: "spd_solve",
            left: factor.lower.shape(),
            right: b.shape(),
        });
    }
    let y = factor
        .lower
        .solve_lower_triangular(b)
        .expect("factor diagonal is strictly positive");
    Ok(factor
        .lower
        .tr_solve_lower_triangular(&y)
        .expect("factor diagonal is strictly positive"))
}

/// Factor `F` with `F·Fᵀ = A` for a symmetric positive semidefinite `A`.
///
/// Diagonal-pivoted Cholesky that stops once the remaining pivots fall below
/// `1e-12` of the largest diagonal entry, so singular covariances (zero,
/// rank one, ...) are factorized exactly instead of being jittered. Columns
/// past the numerical rank are zero.
pub fn psd_factor(a: &Matrix) -> Result<Matrix, LinalgError> {
    check_symmetric(a)?;
    let n = a.nrows();
    let mut work = symmetrize(a);
    let max_diag = (0..n).map(|i| work[(i, i)]).fold(0.0_f64, f64::max);
    let mut f = Matrix::zeros(n, n);
    if max_diag <= 0.0 {
        if (0..n).any(|i| work[(i, i)] < 0.0) {
            return Err(LinalgError::NotPd { dim: n, jitter: 0.0 });
        }
        return Ok(f);
    }
    let cutoff = 1e-12 * max_diag;
    let mut done = vec![false; n];
    for col in 0..n {
        let (piv, pval) = (0..n)
            .filter(|&i| !done[i])
            .map(|i| (i, work[(i, i)]))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if piv == usize::MAX || pval <= cutoff {
            // remaining Schur complement must be ~0 for a PSD input
            if pval < -1e-8 * max_diag {
                return Err(LinalgError::NotPd { dim: n, jitter: 0.0 });
            }
            break;
        }
        done[piv] = true;
        let root = pval.sqrt();
        for i in 0..n {
            if i == piv {
                f[(i, col)] = root;
            } else if !done[i] {
                f[(i, col)] = work[(i, piv)] / root;
            }
        }
        for i in 0..n {
            if done[i] {
                continue;
            }
            for k in 0..n {
                if done[k] {
                    continue;
                }
                work[(i, k)] -= f[(i, col)] * f[(k, col)];
            }
        }
    }
    Ok(f)
}

/// Numerical rank: number of pivots of a column-pivoted QR whose magnitude
/// exceeds `tol` times the largest pivot.
pub fn rank(a: &Matrix, tol: f64) -> usize {
    assert!(tol > 0.0, "rank tolerance must be positive");
    if a.is_empty() {
        return 0;
    }
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let largest = diag.iter().cloned().fold(0.0_f64, f64::max);
    if largest == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&v| v > tol * largest).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn vec_stacks_columns() {
        let a = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert_eq!(vec(&a).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        let col = Matrix::from_column_slice(3, 1, &[5.0, 6.0, 7.0]);
        assert_eq!(vec(&col).as_slice(), &[5.0, 6.0, 7.0]);
        let row = dmatrix![1.0, 2.0, 3.0];
        assert_eq!(vec(&row.transpose()).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn unvec_inverts_vec() {
        let a = dmatrix![1.0, 2.0, 3.0; 4.0, 5.0, 6.0];
        assert_eq!(unvec(&vec(&a), 2, 3).unwrap(), a);
        assert!(unvec(&vec(&a), 3, 3).is_err());
    }

    #[test]
    fn kron_examples() {
        let b = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert_eq!(kron(&Matrix::identity(1, 1), &b), b);
        let a = dmatrix![1.0, 2.0];
        let c = dmatrix![0.0; 3.0];
        assert_eq!(kron(&a, &c), dmatrix![0.0, 0.0; 3.0, 6.0]);
        let five = dmatrix![5.0];
        assert_eq!(
            kron(&Matrix::identity(2, 2), &five),
            dmatrix![5.0, 0.0; 0.0, 5.0]
        );
    }

    #[test]
    fn factorize_identity_and_hand_example() {
        let f = spd_factorize(&Matrix::identity(3, 3), JitterPolicy::Disabled).unwrap();
        assert_eq!(f.lower(), &Matrix::identity(3, 3));
        let a = dmatrix![4.0, 2.0; 2.0, 5.0];
        let f = spd_factorize(&a, JitterPolicy::Disabled).unwrap();
        assert_relative_eq!(f.lower(), &dmatrix![2.0, 0.0; 1.0, 2.0], epsilon = 1e-15);
        assert_eq!(f.jitter(), 0.0);
        let err = (f.reconstruct() - &a).norm() / a.norm();
        assert!(err < 1e-10);
    }

    #[test]
    fn rank_one_is_not_pd_without_jitter() {
        let a = dmatrix![1.0, 1.0; 1.0, 1.0];
        assert!(matches!(
            spd_factorize(&a, JitterPolicy::Disabled),
            Err(LinalgError::NotPd { .. })
        ));
        // with jitter the smallest shift 1e-12·Tr/d already suffices
        let f = spd_factorize(&a, JitterPolicy::Escalating).unwrap();
        assert!(f.jitter() > 0.0 && f.jitter() <= 1e-6);
    }

    #[test]
    fn indefinite_fails_even_with_jitter() {
        let a = dmatrix![1.0, 0.0; 0.0, -1.0];
        assert!(spd_factorize(&a, JitterPolicy::Escalating).is_err());
        let z = Matrix::zeros(2, 2);
        assert!(spd_factorize(&z, JitterPolicy::Escalating).is_err());
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = dmatrix![1.0, 0.5; 0.0, 1.0];
        assert!(matches!(
            spd_factorize(&a, JitterPolicy::Escalating),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn solve_examples() {
        let b = dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0];
        let f = spd_factorize(&Matrix::identity(3, 3), JitterPolicy::Disabled).unwrap();
        assert_eq!(spd_solve(&f, &b).unwrap(), b);

        let f = spd_factorize(&dmatrix![2.0, 0.0; 0.0, 4.0], JitterPolicy::Disabled).unwrap();
        let x = spd_solve(&f, &dmatrix![2.0; 4.0]).unwrap();
        assert_relative_eq!(x, dmatrix![1.0; 1.0], epsilon = 1e-15);

        let a = dmatrix![4.0, 2.0; 2.0, 5.0];
        let f = spd_factorize(&a, JitterPolicy::Disabled).unwrap();
        let x = spd_solve(&f, &dmatrix![6.0; 7.0]).unwrap();
        assert_relative_eq!(x, dmatrix![1.0; 1.0], epsilon = 1e-14);
        // residual check
        assert!((&a * &x - dmatrix![6.0; 7.0]).norm() < 1e-9);

        assert!(spd_solve(&f, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn psd_factor_handles_singular() {
        assert_eq!(psd_factor(&Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
        let ones = Matrix::from_element(3, 3, 1.0);
        let f = psd_factor(&ones).unwrap();
        assert_relative_eq!(&f * f.transpose(), ones, epsilon = 1e-14);
        // only one nonzero column, identical entries
        assert_eq!(f.column(0).iter().filter(|v| **v != 0.0).count(), 3);
        assert!(f.columns(1, 2).iter().all(|v| *v == 0.0));

        let a = dmatrix![4.0, 2.0; 2.0, 5.0];
        let f = psd_factor(&a).unwrap();
        assert_relative_eq!(&f * f.transpose(), a, epsilon = 1e-14);
        assert!(psd_factor(&dmatrix![1.0, 0.0; 0.0, -1.0]).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&Matrix::identity(4, 4), DEFAULT_RANK_TOL), 4);
        let dep = dmatrix![1.0, 0.0, 1.0; 0.0, 1.0, 1.0];
        assert_eq!(rank(&dep, DEFAULT_RANK_TOL), 2);
        let x = Matrix::identity(4, 3);
        assert_eq!(rank(&x, DEFAULT_RANK_TOL), 3);
        assert_eq!(rank(&Matrix::zeros(3, 2), DEFAULT_RANK_TOL), 0);
    }

    #[test]
    fn log_det_and_inverse() {
        let a = dmatrix![4.0, 2.0; 2.0, 5.0];
        let f = spd_factorize(&a, JitterPolicy::Disabled).unwrap();
        assert_relative_eq!(f.log_det(), 16.0_f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(&a * f.inverse(), Matrix::identity(2, 2), epsilon = 1e-14);
    }
}
