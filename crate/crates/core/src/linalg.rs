//! Dense matrix primitives and the singular-value functionals the test is built on.
//!
//! All matrices are `nalgebra::DMatrix<f64>`, stored column-major. Whenever a
//! matrix is flattened into a vector (covariances, Kronecker transforms) the
//! column-major `vec` convention is used: `vec(A)` stacks the columns of `A`,
//! so `vec(B A C) = (Cᵀ ⊗ B) vec(A)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Full singular value decomposition `A = P · diag(sigma) · Qᵀ` of an `m×k`
/// matrix with `m ≥ k`. `p` is `m×m`, `q` is `k×k`, `sigma` has `k` entries in
/// descending order.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub p: Matrix,
    pub sigma: Vec<f64>,
    pub q: Matrix,
}

impl SvdResult {
    pub fn rows(&self) -> usize {
        self.p.nrows()
    }

    pub fn cols(&self) -> usize {
        self.q.nrows()
    }
}

pub fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite entries")))
    }
}

/// Full SVD. Requires `m ≥ k`; transpose first otherwise.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, k) = a.shape();
    if m < k {
        return Err(Error::InvalidInput(format!(
            "svd expects rows >= cols, got {m}x{k}"
        )));
    }
    ensure_finite(a, "matrix")?;
    if k == 0 {
        return Ok(SvdResult {
            p: Matrix::identity(m, m),
            sigma: Vec::new(),
            q: Matrix::zeros(0, 0),
        });
    }

    let dec = a.clone().svd(true, true);
    let u = dec.u.expect("left singular vectors requested");
    let v_t = dec.v_t.expect("right singular vectors requested");

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));

    let sigma: Vec<f64> = order.iter().map(|&i| dec.singular_values[i].max(0.0)).collect();
    let u_sorted = Matrix::from_fn(m, k, |r, c| u[(r, order[c])]);
    let q = Matrix::from_fn(k, k, |r, c| v_t[(order[c], r)]);

    Ok(SvdResult {
        p: complete_basis(&u_sorted),
        sigma,
        q,
    })
}

/// Extends an `m×k` matrix with orthonormal columns to an `m×m` orthogonal
/// matrix whose first `k` columns are the input.
fn complete_basis(u: &Matrix) -> Matrix {
    let (m, k) = u.shape();
    if m == k {
        return u.clone();
    }
    // The Householder Q of U is a full orthogonal matrix whose first k
    // columns span col(U); its trailing columns complete the basis.
    let qr = u.clone().qr();
    let mut q_t = Matrix::identity(m, m);
    qr.q_tr_mul(&mut q_t);
    let q_full = q_t.transpose();

    let mut p = Matrix::zeros(m, m);
    p.columns_mut(0, k).copy_from(u);
    p.columns_mut(k, m - k).copy_from(&q_full.columns(k, m - k));
    p
}

/// Singular values in descending order. Works for any shape.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Sum of the `k − r` smallest squared singular values of `a`.
pub fn phi(a: &Matrix, r: usize) -> Result<f64> {
    let (m, k) = a.shape();
    if m < k {
        return Err(Error::InvalidInput(format!(
            "phi expects rows >= cols, got {m}x{k}"
        )));
    }
    if r >= k {
        return Err(Error::InvalidRank { rank: r, limit: k });
    }
    ensure_finite(a, "matrix")?;
    Ok(tail_sum_squares(&singular_values(a), r))
}

fn tail_sum_squares(sigma: &[f64], skip: usize) -> f64 {
    sigma.iter().skip(skip).map(|s| s * s).sum()
}

/// Trailing `m − r̂` columns of `P` and `k − r̂` columns of `Q`.
pub fn tail_blocks(s: &SvdResult, r_hat: usize) -> Result<(Matrix, Matrix)> {
    let (m, k) = (s.rows(), s.cols());
    if r_hat > k {
        return Err(Error::InvalidRank {
            rank: r_hat,
            limit: k + 1,
        });
    }
    let p2 = s.p.columns(r_hat, m - r_hat).into_owned();
    let q2 = s.q.columns(r_hat, k - r_hat).into_owned();
    Ok((p2, q2))
}

/// Sum of the squared singular values of `P₂ᵀ M Q₂` with indices
/// `r − r̂ + 1 ..= k − r̂`, i.e. its `k − r` smallest.
pub fn projected_phi(p2: &Matrix, m: &Matrix, q2: &Matrix, r: usize, r_hat: usize) -> Result<f64> {
    let k = q2.nrows();
    if r >= k {
        return Err(Error::InvalidRank { rank: r, limit: k });
    }
    if r_hat > r {
        return Err(Error::InvalidState(format!(
            "rank estimate {r_hat} exceeds hypothesized rank {r}"
        )));
    }
    if p2.nrows() != m.nrows() || q2.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "projection blocks {}x{} / {}x{} do not conform with a {}x{} matrix",
            p2.nrows(),
            p2.ncols(),
            q2.nrows(),
            q2.ncols(),
            m.nrows(),
            m.ncols()
        )));
    }
    if q2.ncols() == 0 {
        return Ok(0.0);
    }
    let projected = p2.transpose() * m * q2;
    Ok(tail_sum_squares(&singular_values(&projected), r - r_hat))
}

/// Column-major flattening.
pub fn vec_cols(a: &Matrix) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// `S^{1/2}` of a symmetric positive semidefinite matrix.
pub fn sym_sqrt(s: &Matrix) -> Matrix {
    sym_fn(s, |v| v.max(0.0).sqrt())
}

/// `S^{-1/2}` of a symmetric positive definite matrix.
pub fn sym_inv_sqrt(s: &Matrix, what: &str) -> Result<Matrix> {
    let eig = SymmetricEigen::new(symmetrize(s));
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::Collinear {
            what: what.to_string(),
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    Ok(reassemble(&eig, |v| 1.0 / v.sqrt()))
}

/// Moore–Penrose inverse of a symmetric matrix, dropping eigenvalues below
/// `rel_tol` times the largest one. Returns the inverse and the number of
/// dropped directions.
pub fn sym_pinv(s: &Matrix, rel_tol: f64) -> (Matrix, usize) {
    let eig = SymmetricEigen::new(symmetrize(s));
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rel_tol * max;
    let dropped = eig.eigenvalues.iter().filter(|&&v| !(v > cutoff) || max <= 0.0).count();
    let inv = reassemble(&eig, |v| if v > cutoff && max > 0.0 { 1.0 / v } else { 0.0 });
    (inv, dropped)
}

pub fn symmetrize(s: &Matrix) -> Matrix {
    (s + s.transpose()) * 0.5
}

fn sym_fn(s: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let eig = SymmetricEigen::new(symmetrize(s));
    reassemble(&eig, f)
}

fn reassemble(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> Matrix {
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&v| f(v)));
    let v = &eig.eigenvectors;
    v * Matrix::from_diagonal(&d) * v.transpose()
}

/// Largest absolute entry.
pub fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
