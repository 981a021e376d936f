//! Dense symmetric/SPD linear algebra.
//!
//! Everything here is built on two Jacobi-type kernels: a cyclic Jacobi
//! eigensolver for symmetric matrices and a one-sided (Hestenes) Jacobi SVD.
//! Both converge to machine precision on the small dense operators this
//! engine works with and are fully deterministic: fixed sweep order, and all
//! eigenvector/singular-vector signs fixed by the
//! largest-magnitude-entry-positive convention.
//!
//! The Bures-Wasserstein machinery lives at the bottom:
//!
//! ```text
//! d_B²(A, B) = tr(A) + tr(B) - 2 tr((A^{1/2} B A^{1/2})^{1/2})
//! ```
//!
//! and the Gaussian Wasserstein barycenter is solved by the classical
//! fixed-point map
//!
//! ```text
//! T(B) = B^{-1/2} (Σ_i ω_i (B^{1/2} B_i B^{1/2})^{1/2})² B^{-1/2}
//! ```
//!
//! initialized at the weighted arithmetic mean.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::{dot, Mat, SymMat};

/// Tolerances and iteration caps for the numerical kernels.
pub mod tol {
    /// Off-diagonal Frobenius threshold (relative to ‖A‖_F) ending Jacobi sweeps.
    pub const JACOBI_OFF: f64 = 1e-15;
    /// Sweep cap for the Jacobi eigensolver; convergence is quadratic, so this
    /// is never reached for the dimensions this crate targets.
    pub const JACOBI_MAX_SWEEPS: usize = 64;
    /// Relative column-orthogonality threshold for the one-sided Jacobi SVD.
    pub const SVD_ORTH: f64 = 1e-15;
    pub const SVD_MAX_SWEEPS: usize = 64;
    /// Relative singular-value cutoff defining numerical rank in `truncated_svd`.
    pub const SVD_RANK: f64 = 1e-12;
    /// Relative singular-value cutoff defining the retained basis dimension in
    /// `orthonormal_basis`.
    pub const BASIS_RANK: f64 = 1e-10;
    /// Default eigenvalue floor is `EIG_FLOOR_REL * tr(M)/dim`.
    pub const EIG_FLOOR_REL: f64 = 1e-12;
    /// Tolerance on |Σ weights - 1| for simplex weight vectors.
    pub const WEIGHT_SUM: f64 = 1e-12;
    /// Default fixed-point tolerance for the Wasserstein barycenter.
    pub const BARYCENTER: f64 = 1e-9;
    /// Default iteration budget for the Wasserstein barycenter. The map
    /// converges linearly with a rate driven by the geometry conditioning;
    /// λ-ridged projected geometries (condition ~1e6) can need several
    /// hundred iterations under skewed weights.
    pub const BARYCENTER_MAX_ITER: usize = 2000;
}

/// Eigendecomposition of a symmetric matrix: `M = V diag(λ) Vᵀ`.
///
/// Eigenvalues are ascending; the columns of `vectors` are the corresponding
/// eigenvectors, each sign-fixed so its largest-magnitude entry is positive.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl SymEig {
    /// Rebuild `V diag(f(λ)) Vᵀ` for an entrywise spectral map `f`.
    pub fn compose(&self, f: impl Fn(f64) -> f64) -> SymMat {
        let n = self.values.len();
        let mut out = Mat::zeros(n, n);
        for (k, &lam) in self.values.iter().enumerate() {
            let flam = f(lam);
            if flam == 0.0 {
                continue;
            }
            for i in 0..n {
                let vik = self.vectors[(i, k)];
                if vik == 0.0 {
                    continue;
                }
                let w = flam * vik;
                for j in 0..n {
                    out[(i, j)] += w * self.vectors[(j, k)];
                }
            }
        }
        SymMat::symmetrize(out)
    }
}

/// Flip the sign of every column whose largest-magnitude entry is negative.
/// Ties resolve to the first maximal index, keeping the result deterministic.
fn fix_column_signs(m: &mut Mat) {
    for j in 0..m.cols() {
        let mut best = 0usize;
        let mut best_abs = 0.0_f64;
        for i in 0..m.rows() {
            let a = m[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m[(best, j)] < 0.0 {
            for i in 0..m.rows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

fn off_diagonal_norm(a: &Mat) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            s += a[(p, q)] * a[(p, q)];
        }
    }
    libm::sqrt(2.0 * s)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Always converges for symmetric input; the sweep cap is a safety net only.
pub fn sym_eig(m: &SymMat) -> SymEig {
    let n = m.dim();
    let mut a = m.as_mat().clone();
    let mut v = Mat::identity(n);
    let total = a.frobenius_norm();
    let stop = tol::JACOBI_OFF * total.max(f64::MIN_POSITIVE);

    for _sweep in 0..tol::JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau.is_finite() {
                    let sign = if tau < 0.0 { -1.0 } else { 1.0 };
                    sign / (tau.abs() + libm::sqrt(1.0 + tau * tau))
                } else {
                    // |tau| overflowed: the rotation is numerically the identity.
                    0.0
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = t * c;

                let app = a[(p, p)];
                let aqq = a[(q, q)];
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(p, k)] = a[(k, p)];
                    a[(k, q)] = s * akp + c * akq;
                    a[(q, k)] = a[(k, q)];
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    // Sort ascending, stable in the original index for deterministic ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[(i, i)]
            .partial_cmp(&a[(j, j)])
            .expect("eigenvalues are finite")
            .then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, new_j)] = v[(i, old_j)];
        }
    }
    fix_column_signs(&mut vectors);
    SymEig { values, vectors }
}

fn check_eig_floor(eig_floor: f64, key: &str, strictly_positive: bool) -> Result<()> {
    let bad = !eig_floor.is_finite()
        || eig_floor < 0.0
        || (strictly_positive && eig_floor == 0.0);
    if bad {
        return Err(CoreError::InvalidConfig(alloc::string::String::from(key)));
    }
    Ok(())
}

/// Default eigenvalue floor for an SPD operand: `1e-12 * tr(M)/dim`.
///
/// Kept strictly positive so inverse square roots of nominally PSD inputs
/// never divide by zero.
pub fn default_eig_floor(m: &SymMat) -> f64 {
    let n = m.dim().max(1) as f64;
    (tol::EIG_FLOOR_REL * (m.trace() / n)).max(f64::MIN_POSITIVE)
}

/// Symmetric PSD square root with eigenvalues clamped at `eig_floor` first.
pub fn sqrt_spd(m: &SymMat, eig_floor: f64) -> Result<SymMat> {
    check_eig_floor(eig_floor, "eig_floor", false)?;
    let eig = sym_eig(m);
    Ok(eig.compose(|lam| libm::sqrt(lam.max(eig_floor))))
}

/// Symmetric inverse square root with eigenvalues clamped at `eig_floor > 0`.
pub fn inv_sqrt_spd(m: &SymMat, eig_floor: f64) -> Result<SymMat> {
    check_eig_floor(eig_floor, "eig_floor", true)?;
    let eig = sym_eig(m);
    Ok(eig.compose(|lam| 1.0 / libm::sqrt(lam.max(eig_floor))))
}

/// Rank-selection policy for truncated SVDs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    /// Retain at most `r` leading components (capped at the numerical rank).
    FixedRank(usize),
    /// Retain the smallest prefix holding at least this fraction of the total
    /// squared-singular-value energy; threshold in (0, 1].
    Energy(f64),
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPolicy::FixedRank(r) if r >= 1 => Ok(()),
            RankPolicy::FixedRank(_) => {
                Err(CoreError::InvalidConfig(alloc::string::String::from("rank.fixed_rank")))
            }
            RankPolicy::Energy(e) if e > 0.0 && e <= 1.0 && e.is_finite() => Ok(()),
            RankPolicy::Energy(_) => {
                Err(CoreError::InvalidConfig(alloc::string::String::from("rank.energy")))
            }
        }
    }
}

/// Truncated SVD factors `Δ ≈ U diag(σ) Vᵀ`.
///
/// `left` is `d_out x r`, `right` is `d_in x r`, singular values descending.
/// `r = 0` (empty factors) is the well-defined result for a zero input.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub left: Mat,
    pub singular: Vec<f64>,
    pub right: Mat,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    pub fn d_in(&self) -> usize {
        self.right.rows()
    }

    pub fn d_out(&self) -> usize {
        self.left.rows()
    }

    /// Rebuild `U diag(σ) Vᵀ`.
    pub fn reconstruct(&self) -> Mat {
        let mut scaled = self.left.clone();
        for j in 0..scaled.cols() {
            for i in 0..scaled.rows() {
                scaled[(i, j)] *= self.singular[j];
            }
        }
        scaled.matmul(&self.right.transpose())
    }
}

/// One-sided Jacobi SVD returning all `d_in` orthogonalized columns.
///
/// Output: descending singular values (length d_in), the matching left
/// columns stored as rows (k x d_out) and right columns stored as rows
/// (k x d_in). Left columns for exactly-zero singular values are zero.
fn jacobi_svd_rows(a: &Mat) -> (Vec<f64>, Mat, Mat) {
    let d_in = a.cols();
    let mut wt = a.transpose(); // rows are columns of `a`
    let mut vt = Mat::identity(d_in); // rows are columns of V

    for _sweep in 0..tol::SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d_in {
            for q in (p + 1)..d_in {
                let app = dot(wt.row(p), wt.row(p));
                let aqq = dot(wt.row(q), wt.row(q));
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                let apq = dot(wt.row(p), wt.row(q));
                if apq.abs() <= tol::SVD_ORTH * libm::sqrt(app * aqq) {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = if zeta.is_finite() {
                    let sign = if zeta < 0.0 { -1.0 } else { 1.0 };
                    sign / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta))
                } else {
                    0.0
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = t * c;
                let (wp, wq) = wt.two_rows_mut(p, q);
                rotate_rows(wp, wq, c, s);
                let (vp, vq) = vt.two_rows_mut(p, q);
                rotate_rows(vp, vq, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..d_in)
        .map(|j| libm::sqrt(dot(wt.row(j), wt.row(j))))
        .collect();
    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&i, &j| {
        sigma[j]
            .partial_cmp(&sigma[i])
            .expect("singular values are finite")
            .then(i.cmp(&j))
    });

    let mut u_rows = Mat::zeros(d_in, a.rows());
    let mut v_rows = Mat::zeros(d_in, d_in);
    let mut sorted_sigma = vec![0.0; d_in];
    for (new_j, &old_j) in order.iter().enumerate() {
        sorted_sigma[new_j] = sigma[old_j];
        if sigma[old_j] > 0.0 {
            let inv = 1.0 / sigma[old_j];
            for (dst, src) in u_rows.row_mut(new_j).iter_mut().zip(wt.row(old_j)) {
                *dst = src * inv;
            }
        }
        v_rows.row_mut(new_j).copy_from_slice(vt.row(old_j));
    }
    sigma.clear();
    (sorted_sigma, u_rows, v_rows)
}

#[inline]
fn rotate_rows(rp: &mut [f64], rq: &mut [f64], c: f64, s: f64) {
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Truncated SVD of a dense matrix under a rank policy.
///
/// An all-zero input returns empty factors (`r = 0`), not an error. The
/// energy policy walks the descending spectrum until the requested fraction
/// of total squared energy is covered, never past the numerical rank.
pub fn truncated_svd(delta: &Mat, policy: RankPolicy) -> Result<SvdFactors> {
    if !delta.is_finite() {
        return Err(CoreError::InvalidInput(alloc::string::String::from(
            "truncated_svd: non-finite entries",
        )));
    }
    policy.validate()?;

    let (sigma, u_rows, v_rows) = jacobi_svd_rows(delta);
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let numerical_rank = sigma
        .iter()
        .take_while(|&&s| s > tol::SVD_RANK * sigma_max && s > 0.0)
        .count();

    let keep = match policy {
        RankPolicy::FixedRank(r) => r.min(numerical_rank),
        RankPolicy::Energy(e) => {
            let total: f64 = sigma.iter().map(|s| s * s).sum();
            if total == 0.0 {
                0
            } else {
                let target = e * total;
                let mut cum = 0.0;
                let mut k = 0;
                while k < numerical_rank {
                    cum += sigma[k] * sigma[k];
                    k += 1;
                    if cum >= target {
                        break;
                    }
                }
                k
            }
        }
    };

    let mut left = Mat::zeros(delta.rows(), keep);
    let mut right = Mat::zeros(delta.cols(), keep);
    let mut singular = Vec::with_capacity(keep);
    for j in 0..keep {
        singular.push(sigma[j]);
        // Sign convention applies to the right vector; the left flips with it.
        let mut best = 0usize;
        let mut best_abs = 0.0_f64;
        for (i, &v) in v_rows.row(j).iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        let flip = if v_rows.row(j)[best] < 0.0 { -1.0 } else { 1.0 };
        for (i, &v) in v_rows.row(j).iter().enumerate() {
            right[(i, j)] = flip * v;
        }
        for (i, &u) in u_rows.row(j).iter().enumerate() {
            left[(i, j)] = flip * u;
        }
    }
    Ok(SvdFactors {
        left,
        singular,
        right,
    })
}

/// Orthonormal basis for the column span of `columns` (d_in x p → d_in x q).
///
/// `q` is the numerical rank (singular values above `BASIS_RANK * σ_max`);
/// a zero or empty input yields a `d_in x 0` result.
pub fn orthonormal_basis(columns: &Mat) -> Mat {
    if columns.cols() == 0 {
        return Mat::zeros(columns.rows(), 0);
    }
    let (sigma, u_rows, _) = jacobi_svd_rows(columns);
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let q = sigma
        .iter()
        .take_while(|&&s| s > tol::BASIS_RANK * sigma_max && s > 0.0)
        .count();
    let mut basis = Mat::zeros(columns.rows(), q);
    for j in 0..q {
        for (i, &u) in u_rows.row(j).iter().enumerate() {
            basis[(i, j)] = u;
        }
    }
    fix_column_signs(&mut basis);
    basis
}

/// Squared Bures-Wasserstein distance between PSD matrices.
///
/// Negative eigenvalues from round-off are clamped to zero inside the square
/// roots, and a tiny-negative result is clamped to zero.
pub fn bures_distance_sq(a: &SymMat, b: &SymMat) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(alloc::format!(
            "bures_distance_sq: {}x{} vs {}x{}",
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    if a.dim() == 0 {
        return Ok(0.0);
    }
    let a_half = sqrt_spd(a, 0.0)?;
    let inner = a_half.as_mat().matmul(b.as_mat()).matmul(a_half.as_mat());
    let eig = sym_eig(&SymMat::symmetrize(inner));
    let cross: f64 = eig
        .values
        .iter()
        .map(|&lam| libm::sqrt(lam.max(0.0)))
        .sum();
    let d2 = a.trace() + b.trace() - 2.0 * cross;
    Ok(d2.max(0.0))
}

/// Weighted Bures objective `Σ_i ω_i d_B²(b, B_i)`.
pub fn bures_objective(b: &SymMat, geometries: &[SymMat], weights: &[f64]) -> Result<f64> {
    let mut obj = 0.0;
    for (g, &w) in geometries.iter().zip(weights) {
        obj += w * bures_distance_sq(b, g)?;
    }
    Ok(obj)
}

fn check_simplex(weights: &[f64], key: &str) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(CoreError::InvalidConfig(alloc::string::String::from(key)));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > tol::WEIGHT_SUM {
        return Err(CoreError::InvalidConfig(alloc::string::String::from(key)));
    }
    Ok(())
}

/// Gaussian Wasserstein barycenter of PSD geometries by fixed-point iteration.
///
/// Initialized at the weighted arithmetic mean; returns the first iterate
/// whose fixed-point residual `‖T(B) - B‖_F / max(‖B‖_F, 1e-30)` is within
/// `fp_tol`. A single geometry is returned unchanged.
pub fn wasserstein_barycenter(
    geometries: &[SymMat],
    weights: &[f64],
    fp_tol: f64,
    max_iter: usize,
) -> Result<SymMat> {
    if geometries.is_empty() {
        return Err(CoreError::InvalidInput(alloc::string::String::from(
            "wasserstein_barycenter: no geometries",
        )));
    }
    let dim = geometries[0].dim();
    if geometries.iter().any(|g| g.dim() != dim) {
        return Err(CoreError::Shape(alloc::string::String::from(
            "wasserstein_barycenter: mixed dimensions",
        )));
    }
    if weights.len() != geometries.len() {
        return Err(CoreError::Shape(alloc::string::String::from(
            "wasserstein_barycenter: weights/geometries length mismatch",
        )));
    }
    check_simplex(weights, "weights")?;
    if !(fp_tol > 0.0 && fp_tol.is_finite()) || max_iter == 0 {
        return Err(CoreError::InvalidConfig(alloc::string::String::from(
            "barycenter_tol/max_iter",
        )));
    }
    if geometries.len() == 1 {
        return Ok(geometries[0].clone());
    }
    if dim == 0 {
        return Ok(SymMat::zeros(0));
    }

    let mut current = SymMat::zeros(dim);
    for (g, &w) in geometries.iter().zip(weights) {
        current.add_scaled(w, g);
    }

    let mut residual = f64::INFINITY;
    for _iter in 0..max_iter {
        let floor = default_eig_floor(&current);
        let half = sqrt_spd(&current, floor)?;
        let inv_half = inv_sqrt_spd(&current, floor)?;

        let mut mixed = SymMat::zeros(dim);
        for (g, &w) in geometries.iter().zip(weights) {
            let inner = half.as_mat().matmul(g.as_mat()).matmul(half.as_mat());
            let root = sqrt_spd(&SymMat::symmetrize(inner), 0.0)?;
            mixed.add_scaled(w, &root);
        }
        let squared = mixed.as_mat().matmul(mixed.as_mat());
        let next = SymMat::symmetrize(
            inv_half.as_mat().matmul(&squared).matmul(inv_half.as_mat()),
        );

        residual = next.as_mat().sub(current.as_mat()).frobenius_norm()
            / current.frobenius_norm().max(1e-30);
        if residual <= fp_tol {
            return Ok(current);
        }
        current = next;
    }
    Err(CoreError::Convergence {
        residual,
        iterations: max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {a} ≈ {b} within {tol}, diff {}",
            (a - b).abs()
        );
    }

    #[test]
    fn eig_identity() {
        let eig = sym_eig(&SymMat::identity(3));
        for &v in &eig.values {
            assert_close(v, 1.0, 1e-14);
        }
    }

    #[test]
    fn eig_diagonal_with_sign_convention() {
        let eig = sym_eig(&SymMat::from_diag(&[2.0, 5.0]));
        assert_close(eig.values[0], 2.0, 1e-14);
        assert_close(eig.values[1], 5.0, 1e-14);
        // Sign convention: each eigenvector's largest entry is positive.
        assert_close(eig.vectors[(0, 0)], 1.0, 1e-14);
        assert_close(eig.vectors[(1, 1)], 1.0, 1e-14);
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        // Deterministic pseudo-random symmetric 6x6.
        let n = 6;
        let mut m = Mat::zeros(n, n);
        let mut x = 0.37_f64;
        for i in 0..n {
            for j in i..n {
                x = libm::sin(43758.5453 * x + 1.0);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        let sym = SymMat::new(m.clone()).unwrap();
        let eig = sym_eig(&sym);
        let rebuilt = eig.compose(|l| l);
        let err = rebuilt.as_mat().sub(&m).frobenius_norm();
        assert!(err <= 1e-10 * m.frobenius_norm().max(1.0));
        // Orthogonality of the eigenvector matrix.
        let vtv = eig.vectors.gram();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_close(vtv[(i, j)], want, 1e-12);
            }
        }
    }

    #[test]
    fn sqrt_of_diagonal() {
        let s = sqrt_spd(&SymMat::from_diag(&[4.0, 9.0]), 0.0).unwrap();
        assert_close(s[(0, 0)], 2.0, 1e-14);
        assert_close(s[(1, 1)], 3.0, 1e-14);
        assert_close(s[(0, 1)], 0.0, 1e-14);
    }

    #[test]
    fn inv_sqrt_of_diagonal() {
        let s = inv_sqrt_spd(&SymMat::from_diag(&[4.0, 1.0]), 1e-12).unwrap();
        assert_close(s[(0, 0)], 0.5, 1e-14);
        assert_close(s[(1, 1)], 1.0, 1e-14);
    }

    #[test]
    fn inv_sqrt_rejects_zero_floor() {
        let r = inv_sqrt_spd(&SymMat::identity(2), 0.0);
        assert!(matches!(r, Err(CoreError::InvalidConfig(_))));
    }

    #[test]
    fn sqrt_clamps_at_floor() {
        let s = sqrt_spd(&SymMat::from_diag(&[-1e-9, 4.0]), 1e-12).unwrap();
        assert_close(s[(0, 0)], 1e-6, 1e-12);
        assert_close(s[(1, 1)], 2.0, 1e-14);
    }

    #[test]
    fn svd_identity_fixed_rank() {
        let f = truncated_svd(&Mat::identity(4), RankPolicy::FixedRank(4)).unwrap();
        assert_eq!(f.rank(), 4);
        for &s in &f.singular {
            assert_close(s, 1.0, 1e-14);
        }
    }

    #[test]
    fn svd_rank_one_energy() {
        // u vᵀ with ‖u‖ = 2, ‖v‖ = 3 → one singular value 6.
        let u = [2.0, 0.0, 0.0];
        let v = [0.0, 3.0];
        let mut m = Mat::zeros(3, 2);
        for i in 0..3 {
            for j in 0..2 {
                m[(i, j)] = u[i] * v[j];
            }
        }
        let f = truncated_svd(&m, RankPolicy::Energy(0.9)).unwrap();
        assert_eq!(f.rank(), 1);
        assert_close(f.singular[0], 6.0, 1e-12);
    }

    #[test]
    fn svd_zero_input_gives_empty_factors() {
        let f = truncated_svd(&Mat::zeros(3, 2), RankPolicy::Energy(0.9)).unwrap();
        assert_eq!(f.rank(), 0);
        assert_eq!(f.left.shape(), (3, 0));
        assert_eq!(f.right.shape(), (2, 0));
        let f2 = truncated_svd(&Mat::zeros(3, 2), RankPolicy::FixedRank(2)).unwrap();
        assert_eq!(f2.rank(), 0);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Mat::zeros(2, 2);
        m[(0, 0)] = f64::INFINITY;
        assert!(truncated_svd(&m, RankPolicy::FixedRank(1)).is_err());
    }

    #[test]
    fn svd_policy_validation() {
        assert!(truncated_svd(&Mat::identity(2), RankPolicy::FixedRank(0)).is_err());
        assert!(truncated_svd(&Mat::identity(2), RankPolicy::Energy(0.0)).is_err());
        assert!(truncated_svd(&Mat::identity(2), RankPolicy::Energy(1.5)).is_err());
    }

    #[test]
    fn basis_of_orthonormal_input_keeps_rank() {
        let v = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let q = orthonormal_basis(&v);
        assert_eq!(q.cols(), 2);
        // Duplicated columns do not inflate the rank.
        let doubled = v.hcat(&v);
        let q2 = orthonormal_basis(&doubled);
        assert_eq!(q2.cols(), 2);
    }

    #[test]
    fn basis_of_zero_is_empty() {
        let q = orthonormal_basis(&Mat::zeros(4, 3));
        assert_eq!(q.shape(), (4, 0));
    }

    #[test]
    fn bures_self_distance_zero() {
        let a = SymMat::identity(2);
        assert_close(bures_distance_sq(&a, &a).unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn bures_diagonal_closed_form() {
        // Commuting case: Σ (√a_i - √b_i)².
        let a = SymMat::from_diag(&[1.0, 4.0]);
        let b = SymMat::from_diag(&[4.0, 1.0]);
        assert_close(bures_distance_sq(&a, &b).unwrap(), 2.0, 1e-10);
    }

    #[test]
    fn bures_dimension_mismatch() {
        let a = SymMat::identity(2);
        let b = SymMat::identity(3);
        assert!(matches!(
            bures_distance_sq(&a, &b),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn barycenter_of_identical_inputs_is_exact() {
        let a = SymMat::from_diag(&[2.0, 7.0]);
        let b = wasserstein_barycenter(
            &[a.clone(), a.clone()],
            &[0.5, 0.5],
            tol::BARYCENTER,
            tol::BARYCENTER_MAX_ITER,
        )
        .unwrap();
        assert_eq!(b.as_mat(), a.as_mat());
    }

    #[test]
    fn barycenter_diagonal_closed_form() {
        // Commuting case: diag((Σ ω √λ)²); here ((1+3)/2)² = 4.
        let g1 = SymMat::from_diag(&[1.0, 1.0]);
        let g2 = SymMat::from_diag(&[9.0, 9.0]);
        let b = wasserstein_barycenter(&[g1, g2], &[0.5, 0.5], 1e-12, 500).unwrap();
        assert_close(b[(0, 0)], 4.0, 1e-10);
        assert_close(b[(1, 1)], 4.0, 1e-10);
        assert_close(b[(0, 1)], 0.0, 1e-10);
    }

    #[test]
    fn barycenter_single_input_unchanged() {
        let a = SymMat::from_diag(&[3.0, 5.0]);
        let b = wasserstein_barycenter(&[a.clone()], &[1.0], 1e-9, 10).unwrap();
        assert_eq!(b.as_mat(), a.as_mat());
    }

    #[test]
    fn barycenter_rejects_bad_weights() {
        let a = SymMat::identity(2);
        let r = wasserstein_barycenter(&[a.clone(), a], &[0.7, 0.7], 1e-9, 10);
        assert!(matches!(r, Err(CoreError::InvalidConfig(_))));
    }

    #[test]
    fn barycenter_convergence_error_carries_residual() {
        let g1 = SymMat::from_diag(&[1.0, 1.0]);
        let g2 = SymMat::from_diag(&[9.0, 4.0]);
        let r = wasserstein_barycenter(&[g1, g2], &[0.5, 0.5], 1e-16, 1);
        match r {
            Err(CoreError::Convergence { residual, iterations }) => {
                assert!(residual.is_finite());
                assert_eq!(iterations, 1);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }
}
