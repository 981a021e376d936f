//! Task-update geometometry: task vectors, per-layer covariance geometries,
//! shared bases, projected geometries and the full-space regularized metric.
//!
//! For a layer update `Δ` (d_out x d_in) the covariance geometry is
//! `C = ΔᵀΔ + λI`. Active updates are compared inside a shared basis
//! `Q = orth([V_1, ..., V_m])` built from their retained right-singular
//! directions, either as `B = QᵀCQ` or as the SVD-energy form
//! `B = (QᵀV) diag(σ²) (QᵀV)ᵀ + λI`. The full-space metric
//! `B̃ = Q B̄ Qᵀ + λ(I - QQᵀ)` extends a shared q×q metric to the whole input
//! space, scaling the orthogonal complement by λ.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::config::{Construction, LayerFilter};
use crate::error::{CoreError, Result};
use crate::linalg::{self, SvdFactors};
use crate::mat::{Mat, SymMat};

/// Named 2-D tensors, ordered by name. The in-memory view of an archive.
pub type LayerMap = BTreeMap<String, Mat>;

/// A task update: one dense delta matrix per target layer.
///
/// Layer shapes are fixed per layer name across all task vectors in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub task_id: String,
    layers: LayerMap,
}

impl TaskVector {
    /// Wrap prebuilt deltas; the layer set must be nonempty and finite.
    pub fn new(task_id: impl Into<String>, layers: LayerMap) -> Result<Self> {
        if layers.is_empty() {
            return Err(CoreError::InvalidInput(String::from(
                "task vector has no layers",
            )));
        }
        for (name, m) in &layers {
            if !m.is_finite() {
                return Err(CoreError::InvalidInput(alloc::format!(
                    "layer `{name}` has non-finite entries"
                )));
            }
        }
        Ok(TaskVector {
            task_id: task_id.into(),
            layers,
        })
    }

    /// `Δ = θ_task - θ_pre` over the targeted layers.
    ///
    /// The target set is every 2-D tensor of `theta_pre` accepted by the
    /// filter; `theta_task` must provide each with an identical shape.
    /// Non-targeted tensors on either side are ignored.
    pub fn from_difference(
        task_id: impl Into<String>,
        theta_task: &LayerMap,
        theta_pre: &LayerMap,
        filter: &LayerFilter,
    ) -> Result<Self> {
        let mut layers = LayerMap::new();
        for (name, pre) in theta_pre {
            if !filter.matches(name) {
                continue;
            }
            let task = theta_task
                .get(name)
                .ok_or_else(|| CoreError::MissingTensor(name.clone()))?;
            if task.shape() != pre.shape() {
                return Err(CoreError::Shape(alloc::format!(
                    "layer `{name}`: task is {}x{}, base is {}x{}",
                    task.shape().0,
                    task.shape().1,
                    pre.shape().0,
                    pre.shape().1
                )));
            }
            layers.insert(name.clone(), task.sub(pre));
        }
        TaskVector::new(task_id, layers)
    }

    pub fn layers(&self) -> &LayerMap {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Mat> {
        self.layers.get(name)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &String> {
        self.layers.keys()
    }

    /// True when the layer name sets coincide.
    pub fn same_schema(&self, other: &TaskVector) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.keys().zip(other.layers.keys()).all(|(a, b)| a == b)
    }

    /// Uniformly scaled copy (fixture construction).
    pub fn scaled(&self, factor: f64, task_id: impl Into<String>) -> TaskVector {
        TaskVector {
            task_id: task_id.into(),
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (k.clone(), v.scale(factor)))
                .collect(),
        }
    }
}

/// Dense covariance geometry of one layer update: `C = ΔᵀΔ + λI`.
#[derive(Debug, Clone)]
pub struct LayerGeometry {
    pub layer_name: String,
    pub c: SymMat,
    pub lambda: f64,
}

/// `C = ΔᵀΔ + λI`; requires λ > 0.
pub fn covariance_geometry(layer_name: &str, delta: &Mat, lambda: f64) -> Result<LayerGeometry> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(CoreError::InvalidConfig(String::from("lambda")));
    }
    if !delta.is_finite() {
        return Err(CoreError::InvalidInput(alloc::format!(
            "layer `{layer_name}`: non-finite delta"
        )));
    }
    let mut c = delta.gram();
    for i in 0..c.rows() {
        c[(i, i)] += lambda;
    }
    Ok(LayerGeometry {
        layer_name: layer_name.to_string(),
        c: SymMat::symmetrize(c),
        lambda,
    })
}

/// Shared orthonormal basis for the active updates of one layer.
#[derive(Debug, Clone)]
pub struct SharedBasis {
    pub layer_name: String,
    /// d_in x q, orthonormal columns.
    pub q: Mat,
    /// Retained rank of each contributing task, in active-set order.
    pub source_ranks: Vec<usize>,
}

impl SharedBasis {
    pub fn dim(&self) -> usize {
        self.q.cols()
    }
}

/// `Q = orth([V_1, ..., V_m])`, concatenated in active-set order.
pub fn shared_basis(layer_name: &str, task_svds: &[&SvdFactors]) -> Result<SharedBasis> {
    if task_svds.is_empty() {
        return Err(CoreError::InvalidInput(String::from(
            "shared_basis: no SVD factors",
        )));
    }
    let d_in = task_svds[0].d_in();
    if task_svds.iter().any(|f| f.d_in() != d_in) {
        return Err(CoreError::Shape(String::from(
            "shared_basis: mixed input dimensions",
        )));
    }
    let mut stacked = Mat::zeros(d_in, 0);
    let mut source_ranks = Vec::with_capacity(task_svds.len());
    for f in task_svds {
        source_ranks.push(f.rank());
        if f.rank() > 0 {
            stacked = stacked.hcat(&f.right);
        }
    }
    Ok(SharedBasis {
        layer_name: layer_name.to_string(),
        q: linalg::orthonormal_basis(&stacked),
        source_ranks,
    })
}

/// One task's geometry expressed in the shared basis.
#[derive(Debug, Clone)]
pub struct ProjectedGeometry {
    pub layer_name: String,
    pub task_id: String,
    pub b: SymMat,
    pub construction: Construction,
}

/// Input selector for [`project_geometry`].
#[derive(Debug, Clone, Copy)]
pub enum GeometrySource<'a> {
    /// Project a dense covariance geometry: `B = QᵀCQ`.
    Covariance(&'a LayerGeometry),
    /// Assemble from retained SVD factors: `B = (QᵀV) diag(σ²) (QᵀV)ᵀ + λI`.
    SvdEnergy(&'a SvdFactors),
}

/// Express one task's geometry in the shared basis.
///
/// The two constructions agree whenever the SVD retains the full rank of the
/// update (then `QᵀCQ = (QᵀV) diag(σ²) (QᵀV)ᵀ + λQᵀQ`).
pub fn project_geometry(
    task_id: &str,
    source: GeometrySource<'_>,
    basis: &SharedBasis,
    lambda: f64,
) -> Result<ProjectedGeometry> {
    let q = &basis.q;
    let (b, construction) = match source {
        GeometrySource::Covariance(geom) => {
            if geom.c.dim() != q.rows() {
                return Err(CoreError::Shape(alloc::format!(
                    "project_geometry: C is {0}x{0} but basis has d_in {1}",
                    geom.c.dim(),
                    q.rows()
                )));
            }
            let b = q.transpose().matmul(geom.c.as_mat()).matmul(q);
            (SymMat::symmetrize(b), Construction::ProjectedCovariance)
        }
        GeometrySource::SvdEnergy(factors) => {
            if factors.d_in() != q.rows() {
                return Err(CoreError::Shape(alloc::format!(
                    "project_geometry: factors have d_in {} but basis has d_in {}",
                    factors.d_in(),
                    q.rows()
                )));
            }
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(CoreError::InvalidConfig(String::from("lambda")));
            }
            // (QᵀV) diag(σ²) (QᵀV)ᵀ + λI, built as the Gram of σ-scaled rows.
            let mut projected = q.transpose().matmul(&factors.right); // q x r
            for j in 0..projected.cols() {
                for i in 0..projected.rows() {
                    projected[(i, j)] *= factors.singular[j];
                }
            }
            let mut b = projected.transpose().gram();
            for i in 0..b.rows() {
                b[(i, i)] += lambda;
            }
            (SymMat::symmetrize(b), Construction::SvdEnergy)
        }
    };
    Ok(ProjectedGeometry {
        layer_name: basis.layer_name.clone(),
        task_id: task_id.to_string(),
        b,
        construction,
    })
}

/// Full-space regularized metric `B̃ = Q B̄ Qᵀ + λ(I - QQᵀ)`.
///
/// Square roots of the shared metric are cached from a single
/// eigendecomposition of `B̄`, so whitening and recoloring are exact inverse
/// transforms of each other up to round-off.
#[derive(Debug, Clone)]
pub struct FullSpaceMetric {
    pub layer_name: String,
    q: Mat,
    b_bar: SymMat,
    lambda: f64,
    b_bar_half: Mat,
    b_bar_inv_half: Mat,
}

/// Build the full-space metric from a shared basis and projected metric.
pub fn full_space_metric(
    basis: &SharedBasis,
    b_bar: &SymMat,
    lambda: f64,
) -> Result<FullSpaceMetric> {
    FullSpaceMetric::new(basis.layer_name.clone(), basis.q.clone(), b_bar.clone(), lambda)
}

impl FullSpaceMetric {
    pub fn new(layer_name: String, q: Mat, b_bar: SymMat, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CoreError::InvalidConfig(String::from("lambda")));
        }
        if b_bar.dim() != q.cols() {
            return Err(CoreError::Shape(alloc::format!(
                "full_space_metric: B̄ is {0}x{0} but basis has q = {1}",
                b_bar.dim(),
                q.cols()
            )));
        }
        let eig = linalg::sym_eig(&b_bar);
        let floor = linalg::default_eig_floor(&b_bar);
        let half = eig.compose(|l| libm::sqrt(l.max(floor)));
        let inv_half = eig.compose(|l| 1.0 / libm::sqrt(l.max(floor)));
        Ok(FullSpaceMetric {
            layer_name,
            q,
            b_bar,
            lambda,
            b_bar_half: half.into_mat(),
            b_bar_inv_half: inv_half.into_mat(),
        })
    }

    /// Metric over the full input space with `B̄ = λ I_q`: reduces to `λ I`.
    pub fn isotropic(layer_name: String, d_in: usize, lambda: f64) -> Result<Self> {
        FullSpaceMetric::new(layer_name, Mat::zeros(d_in, 0), SymMat::zeros(0), lambda)
    }

    pub fn basis(&self) -> &Mat {
        &self.q
    }

    pub fn shared(&self) -> &SymMat {
        &self.b_bar
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn d_in(&self) -> usize {
        self.q.rows()
    }

    /// Dense `B̃ = Q B̄ Qᵀ + λ(I - QQᵀ)`.
    pub fn materialize(&self) -> SymMat {
        let d = self.d_in();
        let qb = self.q.matmul(self.b_bar.as_mat());
        let mut m = qb.matmul(&self.q.transpose());
        let qqt = self.q.matmul(&self.q.transpose());
        for i in 0..d {
            for j in 0..d {
                let proj = if i == j { 1.0 - qqt[(i, j)] } else { -qqt[(i, j)] };
                m[(i, j)] += self.lambda * proj;
            }
        }
        SymMat::symmetrize(m)
    }

    /// `X ↦ X B̃^{1/2}` applied through the split structure.
    pub fn apply_sqrt(&self, x: &Mat) -> Mat {
        self.apply_split(x, &self.b_bar_half, libm::sqrt(self.lambda))
    }

    /// `X ↦ X B̃^{-1/2}` applied through the split structure.
    pub fn apply_inv_sqrt(&self, x: &Mat) -> Mat {
        self.apply_split(x, &self.b_bar_inv_half, 1.0 / libm::sqrt(self.lambda))
    }

    fn apply_split(&self, x: &Mat, shared_factor: &Mat, complement_scale: f64) -> Mat {
        assert_eq!(
            x.cols(),
            self.d_in(),
            "metric application: X has {} columns, metric acts on {}",
            x.cols(),
            self.d_in()
        );
        let p = x.matmul(&self.q); // d_out x q
        let in_span = p.matmul(shared_factor).matmul(&self.q.transpose());
        let mut complement = x.sub(&p.matmul(&self.q.transpose()));
        complement = complement.scale(complement_scale);
        in_span.add(&complement)
    }

    /// `‖X‖²_B̃ = tr(X B̃ Xᵀ)`, clamped at zero against round-off.
    pub fn norm_sq(&self, x: &Mat) -> Result<f64> {
        if x.cols() != self.d_in() {
            return Err(CoreError::Shape(alloc::format!(
                "metric_norm_sq: X has {} columns, metric acts on {}",
                x.cols(),
                self.d_in()
            )));
        }
        let p = x.matmul(&self.q);
        let shared = p.matmul(&self.b_bar_half).frobenius_norm_sq();
        let complement = (x.frobenius_norm_sq() - p.frobenius_norm_sq()).max(0.0);
        Ok((shared + self.lambda * complement).max(0.0))
    }
}

/// `tr(X M Xᵀ)` for a dense PSD metric, clamped at zero.
pub fn metric_norm_sq_dense(x: &Mat, metric: &SymMat) -> Result<f64> {
    if x.cols() != metric.dim() {
        return Err(CoreError::Shape(alloc::format!(
            "metric_norm_sq: X has {} columns, metric is {}x{}",
            x.cols(),
            metric.dim(),
            metric.dim()
        )));
    }
    let xm = x.matmul(metric.as_mat());
    let mut acc = 0.0;
    for (a, b) in xm.data().iter().zip(x.data()) {
        acc += a * b;
    }
    Ok(acc.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RankPolicy;
    use crate::linalg::truncated_svd;

    fn layer_map(entries: &[(&str, Mat)]) -> LayerMap {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn task_vector_subtracts_elementwise() {
        let pre = layer_map(&[("w", Mat::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]))]);
        let task = layer_map(&[("w", Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]))]);
        let tv = TaskVector::from_difference("t", &task, &pre, &LayerFilter::all()).unwrap();
        assert_eq!(
            tv.layer("w").unwrap(),
            &Mat::from_rows(&[&[0.0, 1.0], &[2.0, 3.0]])
        );
    }

    #[test]
    fn task_vector_identical_archives_is_zero() {
        let pre = layer_map(&[
            ("a", Mat::from_rows(&[&[1.0, 2.0]])),
            ("b", Mat::from_rows(&[&[3.0], &[4.0]])),
        ]);
        let tv = TaskVector::from_difference("t", &pre, &pre, &LayerFilter::all()).unwrap();
        for (_, m) in tv.layers() {
            assert_eq!(m.max_abs(), 0.0);
        }
    }

    #[test]
    fn task_vector_missing_layer() {
        let pre = layer_map(&[("w", Mat::identity(2))]);
        let task = layer_map(&[("other", Mat::identity(2))]);
        let err = TaskVector::from_difference("t", &task, &pre, &LayerFilter::all());
        assert_eq!(err, Err(CoreError::MissingTensor(String::from("w"))));
    }

    #[test]
    fn task_vector_shape_mismatch() {
        let pre = layer_map(&[("w", Mat::identity(2))]);
        let task = layer_map(&[("w", Mat::identity(3))]);
        assert!(matches!(
            TaskVector::from_difference("t", &task, &pre, &LayerFilter::all()),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn covariance_geometry_zero_delta() {
        let g = covariance_geometry("w", &Mat::zeros(2, 3), 1e-6).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1e-6 } else { 0.0 };
                assert!((g.c[(i, j)] - want).abs() < 1e-20);
            }
        }
    }

    #[test]
    fn covariance_geometry_rank_one() {
        // Δ = e₁ e₁ᵀ in 3 dims → diag(1 + λ, λ, λ).
        let mut d = Mat::zeros(3, 3);
        d[(0, 0)] = 1.0;
        let g = covariance_geometry("w", &d, 1e-6).unwrap();
        assert!((g.c[(0, 0)] - (1.0 + 1e-6)).abs() < 1e-15);
        assert!((g.c[(1, 1)] - 1e-6).abs() < 1e-20);
        assert!((g.c[(2, 2)] - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn covariance_geometry_matches_explicit_multiply() {
        let d = Mat::from_rows(&[
            &[0.3, -1.2, 0.7],
            &[1.1, 0.4, -0.2],
            &[-0.5, 0.9, 0.6],
            &[0.2, -0.8, 1.3],
        ]);
        let lambda = 1e-4;
        let g = covariance_geometry("w", &d, lambda).unwrap();
        let mut explicit = d.transpose().matmul(&d);
        for i in 0..3 {
            explicit[(i, i)] += lambda;
        }
        assert!(g.c.as_mat().sub(&explicit).max_abs() < 1e-12);
    }

    #[test]
    fn covariance_geometry_rejects_bad_lambda() {
        assert!(covariance_geometry("w", &Mat::identity(2), 0.0).is_err());
        assert!(covariance_geometry("w", &Mat::identity(2), -1.0).is_err());
    }

    #[test]
    fn shared_basis_ranks() {
        // Two tasks with identical retained directions: q stays r.
        let d = Mat::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]]);
        let f = truncated_svd(&d, RankPolicy::FixedRank(2)).unwrap();
        let b = shared_basis("w", &[&f, &f]).unwrap();
        assert_eq!(b.dim(), 2);
        assert_eq!(b.source_ranks, alloc::vec![2, 2]);

        // Orthogonal spans in d_in = 8 → q = 4.
        let mut d1 = Mat::zeros(2, 8);
        d1[(0, 0)] = 1.0;
        d1[(1, 1)] = 1.0;
        let mut d2 = Mat::zeros(2, 8);
        d2[(0, 4)] = 1.0;
        d2[(1, 5)] = 1.0;
        let f1 = truncated_svd(&d1, RankPolicy::FixedRank(2)).unwrap();
        let f2 = truncated_svd(&d2, RankPolicy::FixedRank(2)).unwrap();
        let b = shared_basis("w", &[&f1, &f2]).unwrap();
        assert_eq!(b.dim(), 4);
    }

    #[test]
    fn shared_basis_rejects_empty() {
        assert!(shared_basis("w", &[]).is_err());
    }

    #[test]
    fn projected_covariance_with_identity_basis() {
        let geom = LayerGeometry {
            layer_name: String::from("w"),
            c: SymMat::from_diag(&[2.0, 3.0]),
            lambda: 1e-6,
        };
        let basis = SharedBasis {
            layer_name: String::from("w"),
            q: Mat::identity(2),
            source_ranks: alloc::vec![2],
        };
        let p = project_geometry("t", GeometrySource::Covariance(&geom), &basis, 1e-6).unwrap();
        assert!((p.b[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((p.b[(1, 1)] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn projected_svd_energy_of_zero_delta_is_lambda_identity() {
        let f = truncated_svd(&Mat::zeros(3, 4), RankPolicy::Energy(0.9)).unwrap();
        let basis = SharedBasis {
            layer_name: String::from("w"),
            q: Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]]),
            source_ranks: alloc::vec![0],
        };
        let lambda = 1e-6;
        let p = project_geometry("t", GeometrySource::SvdEnergy(&f), &basis, lambda).unwrap();
        assert_eq!(p.b.dim(), 2);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { lambda } else { 0.0 };
                assert!((p.b[(i, j)] - want).abs() < 1e-20);
            }
        }
    }

    #[test]
    fn constructions_agree_at_full_rank() {
        let d = Mat::from_rows(&[
            &[0.4, -0.9, 0.3],
            &[1.2, 0.1, -0.6],
            &[-0.7, 0.8, 0.5],
        ]);
        let lambda = 1e-5;
        let f = truncated_svd(&d, RankPolicy::FixedRank(3)).unwrap();
        let basis = shared_basis("w", &[&f]).unwrap();
        let geom = covariance_geometry("w", &d, lambda).unwrap();
        let via_cov =
            project_geometry("t", GeometrySource::Covariance(&geom), &basis, lambda).unwrap();
        let via_svd =
            project_geometry("t", GeometrySource::SvdEnergy(&f), &basis, lambda).unwrap();
        let diff = via_cov.b.as_mat().sub(via_svd.b.as_mat()).max_abs();
        assert!(diff < 1e-8, "constructions differ by {diff}");
    }

    #[test]
    fn full_space_metric_action() {
        // B̄ = λ I_q collapses B̃ to λ I on the whole space.
        let basis = SharedBasis {
            layer_name: String::from("w"),
            q: Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]),
            source_ranks: alloc::vec![2],
        };
        let lambda = 0.25;
        let metric =
            full_space_metric(&basis, &SymMat::from_diag(&[lambda, lambda]), lambda).unwrap();
        let dense = metric.materialize();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { lambda } else { 0.0 };
                assert!((dense[(i, j)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn metric_norm_reduces_to_frobenius_for_identity() {
        let metric = FullSpaceMetric::new(
            String::from("w"),
            Mat::identity(3),
            SymMat::identity(3),
            1.0,
        )
        .unwrap();
        let x = Mat::from_rows(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, -1.0]]);
        let n = metric.norm_sq(&x).unwrap();
        assert!((n - x.frobenius_norm_sq()).abs() < 1e-12);
        assert_eq!(metric.norm_sq(&Mat::zeros(2, 3)).unwrap(), 0.0);
    }

    #[test]
    fn metric_norm_on_complement_scales_by_lambda() {
        // Rows of X orthogonal to span(Q) → λ ‖X‖_F².
        let basis = SharedBasis {
            layer_name: String::from("w"),
            q: Mat::from_rows(&[&[1.0], &[0.0], &[0.0]]),
            source_ranks: alloc::vec![1],
        };
        let lambda = 0.01;
        let metric = full_space_metric(&basis, &SymMat::from_diag(&[5.0]), lambda).unwrap();
        let x = Mat::from_rows(&[&[0.0, 2.0, -1.0]]);
        let n = metric.norm_sq(&x).unwrap();
        assert!((n - lambda * x.frobenius_norm_sq()).abs() < 1e-14);
    }
}
