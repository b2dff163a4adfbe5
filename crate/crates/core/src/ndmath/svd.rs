use nalgebra::DMatrix;

use super::tensor::Matrix;
use super::MathError;

/// Rank-`k` truncation `Y ≈ U S Vᵀ` of a thin SVD.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// `L × k`, orthonormal columns.
    pub u: Matrix,
    /// `k` singular values, non-increasing.
    pub s: Vec<f64>,
    /// `N × k`, orthonormal columns.
    pub v: Matrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U S Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.rank();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| self.u.get(i, j) * self.s[j]);
        us.matmul(&self.v.transpose())
    }

    /// Coefficients `S Vᵀ` (`k × N`).
    pub fn coefficients(&self) -> Matrix {
        Matrix::from_fn(self.rank(), self.v.rows(), |i, j| self.s[i] * self.v.get(j, i))
    }
}

/// Best rank-`k_star` approximation of `y` in the Frobenius norm.
///
/// Singular values come back in descending order; equal values keep the
/// order the factorization produced them in. Each column of `u` is oriented
/// so that its largest-magnitude entry is positive (the matching column of
/// `v` flips with it).
pub fn truncated_svd(y: &Matrix, k_star: usize) -> Result<TruncatedSvd, MathError> {
    let (l, n) = (y.rows(), y.cols());
    let max = l.min(n);
    if k_star > max {
        return Err(MathError::RankTooLarge { k: k_star, max });
    }
    let dm = DMatrix::from_row_slice(l, n, y.data());
    let svd = nalgebra::linalg::SVD::try_new_unordered(dm, true, true, f64::EPSILON, 0).ok_or(MathError::ConvergenceFailure)?;
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(MathError::ConvergenceFailure),
    };
    let sv = svd.singular_values;
    if sv.iter().any(|v| !v.is_finite()) {
        return Err(MathError::ConvergenceFailure);
    }
    let mut order: Vec<usize> = (0..sv.len()).collect();
    // Stable: ties stay in factorization order.
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k_star);

    let mut u_out = Matrix::zeros(l, k_star);
    let mut v_out = Matrix::zeros(n, k_star);
    let mut s_out = Vec::with_capacity(k_star);
    for (c, &src) in order.iter().enumerate() {
        let mut pivot = 0usize;
        for i in 0..l {
            if u[(i, src)].abs() > u[(pivot, src)].abs() {
                pivot = i;
            }
        }
        let sign = if u[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..l {
            u_out.set(i, c, sign * u[(i, src)]);
        }
        for j in 0..n {
            v_out.set(j, c, sign * vt[(src, j)]);
        }
        s_out.push(sv[src]);
    }
    Ok(TruncatedSvd { u: u_out, s: s_out, v: v_out })
}

/// `‖UᵀU − I‖∞` (max-abs entry).
pub fn orthonormality_defect(u: &Matrix) -> f64 {
    let g = u.transpose().matmul(u);
    g.sub(&Matrix::identity(u.cols())).max_abs()
}
