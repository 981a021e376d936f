//! Compatibility signals: geometry conflict, the conflict gate, update norm,
//! subspace alignment ratio (SAR), gradient cosine and state-relative
//! variants.
//!
//! Geometry conflict between two PSD geometries is the trace-normalized
//! squared Bures distance
//!
//! ```text
//! γ = d_B²(B_i, B_j) / (tr(B_i) + tr(B_j) + ε)
//! ```
//!
//! aggregated per layer as `g = Σ_{i<j} w_ij γ_ij` with normalized pair
//! weights, and mapped to a blend weight by the sigmoid gate
//! `α = α_min + (α_max - α_min) σ(κ (g - τ))`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::{Construction, GateConfig, GeometryConfig, PairWeighting};
use crate::error::{CoreError, Result};
use crate::geometry::{
    covariance_geometry, project_geometry, shared_basis, GeometrySource, TaskVector,
};
use crate::linalg::{bures_distance_sq, truncated_svd};
use crate::mat::{dot, Mat, SymMat};

/// Orthonormality slack accepted on the columns of a SAR subspace.
pub const SAR_ORTHONORMAL_TOL: f64 = 1e-6;

/// Tolerance on |Σ w_ij - 1| for layer-conflict pair weights.
pub const PAIR_WEIGHT_SUM_TOL: f64 = 1e-9;

/// Normalized geometry conflict between two PSD geometries of equal dim.
///
/// Zero when the geometries coincide; invariant under a joint orthogonal
/// change of basis.
pub fn pairwise_conflict(b_i: &SymMat, b_j: &SymMat, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(CoreError::InvalidConfig(String::from("epsilon")));
    }
    let d2 = bures_distance_sq(b_i, b_j)?;
    Ok(d2 / (b_i.trace() + b_j.trace() + epsilon))
}

/// Normalized weights over the m(m-1)/2 unordered pairs, in (i, j) order
/// with i < j.
///
/// `OmegaProduct` uses `w_ij = ω_i ω_j / Z`; if every product vanishes (ω is
/// a simplex vertex) it falls back to uniform pair weights.
pub fn pair_weights(omegas: &[f64], scheme: PairWeighting) -> Vec<f64> {
    let m = omegas.len();
    if m < 2 {
        return Vec::new();
    }
    let n_pairs = m * (m - 1) / 2;
    match scheme {
        PairWeighting::Uniform => alloc::vec![1.0 / n_pairs as f64; n_pairs],
        PairWeighting::OmegaProduct => {
            let mut raw = Vec::with_capacity(n_pairs);
            let mut z = 0.0;
            for i in 0..m {
                for j in (i + 1)..m {
                    let p = omegas[i] * omegas[j];
                    raw.push(p);
                    z += p;
                }
            }
            if z > 0.0 {
                for w in &mut raw {
                    *w /= z;
                }
                raw
            } else {
                alloc::vec![1.0 / n_pairs as f64; n_pairs]
            }
        }
    }
}

/// Weighted mean of pairwise conflicts; `g = Σ w γ`.
///
/// No pairs (a single active task) yields `g = 0`.
pub fn layer_conflict(gammas: &[f64], weights: &[f64]) -> Result<f64> {
    if gammas.len() != weights.len() {
        return Err(CoreError::Shape(String::from(
            "layer_conflict: gamma/weight length mismatch",
        )));
    }
    if gammas.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > PAIR_WEIGHT_SUM_TOL {
        return Err(CoreError::InvalidConfig(String::from("pair_weights")));
    }
    Ok(gammas.iter().zip(weights).map(|(g, w)| g * w).sum())
}

/// Numerically stable logistic sigmoid; `σ(0) = 0.5` exactly.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Conflict gate `α = α_min + (α_max - α_min) σ(κ (g - τ))`.
///
/// Monotone nondecreasing in `g`, and exactly the midpoint
/// `α_min + (α_max - α_min)/2` at `g = τ`.
pub fn gate(g: f64, cfg: &GateConfig) -> f64 {
    cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) * sigmoid(cfg.kappa * (g - cfg.tau))
}

/// Root aggregate Frobenius norm of a task update: `√(Σ_ℓ ‖Δ^(ℓ)‖_F²)`.
pub fn update_norm(tv: &TaskVector) -> f64 {
    let sum: f64 = tv.layers().values().map(Mat::frobenius_norm_sq).sum();
    libm::sqrt(sum)
}

fn check_orthonormal_columns(v: &Mat) -> Result<()> {
    let g = v.gram();
    let mut max_dev = 0.0_f64;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let want = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((g[(i, j)] - want).abs());
        }
    }
    if max_dev > SAR_ORTHONORMAL_TOL {
        return Err(CoreError::InvalidInput(alloc::format!(
            "SAR subspace columns deviate from orthonormal by {max_dev:e}"
        )));
    }
    Ok(())
}

/// Directional subspace alignment ratio `‖Δ_i V_j‖_F / (‖Δ_i‖_F + ε)`.
///
/// One minus O(ε) when the rows of `Δ_i` lie in span(V_j), zero when
/// orthogonal to it.
pub fn sar_directional(delta_i: &Mat, v_j: &Mat, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(CoreError::InvalidConfig(String::from("epsilon")));
    }
    if delta_i.cols() != v_j.rows() {
        return Err(CoreError::Shape(alloc::format!(
            "sar: delta has d_in {} but subspace lives in {}",
            delta_i.cols(),
            v_j.rows()
        )));
    }
    check_orthonormal_columns(v_j)?;
    let projected = delta_i.matmul(v_j);
    Ok(projected.frobenius_norm() / (delta_i.frobenius_norm() + epsilon))
}

/// Symmetric SAR: the arithmetic mean of the two directional ratios.
pub fn sar_symmetric(
    delta_i: &Mat,
    v_i: &Mat,
    delta_j: &Mat,
    v_j: &Mat,
    epsilon: f64,
) -> Result<f64> {
    let ij = sar_directional(delta_i, v_j, epsilon)?;
    let ji = sar_directional(delta_j, v_i, epsilon)?;
    Ok(0.5 * (ij + ji))
}

/// Cosine similarity of two flattened gradients with an additive stabilizer:
/// `⟨g_i, g_j⟩ / (‖g_i‖ ‖g_j‖ + ε)`.
pub fn grad_cosine(g_i: &[f64], g_j: &[f64], epsilon: f64) -> Result<f64> {
    if g_i.len() != g_j.len() {
        return Err(CoreError::Shape(alloc::format!(
            "grad_cosine: lengths {} vs {}",
            g_i.len(),
            g_j.len()
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(CoreError::InvalidConfig(String::from("epsilon")));
    }
    let ni = libm::sqrt(dot(g_i, g_i));
    let nj = libm::sqrt(dot(g_j, g_j));
    Ok(dot(g_i, g_j) / (ni * nj + epsilon))
}

/// Mean/min/negative-fraction summary over a set of pairwise cosines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCosineSummary {
    pub mean: f64,
    pub min: f64,
    pub negative_fraction: f64,
}

pub fn grad_cosine_summary(cosines: &[f64]) -> Option<GradCosineSummary> {
    if cosines.is_empty() {
        return None;
    }
    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    let min = cosines.iter().fold(f64::INFINITY, |m, &c| m.min(c));
    let negative = cosines.iter().filter(|&&c| c < 0.0).count();
    Some(GradCosineSummary {
        mean,
        min,
        negative_fraction: negative as f64 / cosines.len() as f64,
    })
}

/// One pairwise conflict entry of a layer profile.
#[derive(Debug, Clone, PartialEq)]
pub struct PairConflict {
    pub task_i: String,
    pub task_j: String,
    pub gamma: f64,
    pub weight: f64,
}

/// Per-layer conflict/gate record: pairwise conflicts, their weights, the
/// aggregate `g` and the gate value `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictGateProfile {
    pub layer_name: String,
    pub pairs: Vec<PairConflict>,
    pub g: f64,
    pub alpha: f64,
}

impl ConflictGateProfile {
    pub fn gammas(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|p| p.gamma)
    }
}

/// State-relative conflict of an incoming update against an accumulated
/// state update.
#[derive(Debug, Clone, PartialEq)]
pub struct StateConflict {
    pub per_layer: BTreeMap<String, f64>,
    /// Arithmetic mean over target layers.
    pub aggregate: f64,
}

/// Run the full geometry pipeline (SVD → shared basis over the two inputs →
/// projected geometries → γ) treating the accumulated state as one task.
///
/// The shared basis is built from [state, incoming] in that order; γ is
/// computed per common layer and averaged.
pub fn state_relative_conflict(
    state: &TaskVector,
    incoming: &TaskVector,
    cfg: &GeometryConfig,
) -> Result<StateConflict> {
    cfg.validate()?;
    let mut per_layer = BTreeMap::new();
    for (name, state_delta) in state.layers() {
        let Some(incoming_delta) = incoming.layer(name) else {
            continue;
        };
        if state_delta.shape() != incoming_delta.shape() {
            return Err(CoreError::Shape(alloc::format!(
                "state_relative_conflict: layer `{name}` shapes differ"
            )));
        }
        let lambda = cfg.lambda.resolve(&[state_delta, incoming_delta]);
        let state_svd = truncated_svd(state_delta, cfg.rank)?;
        let incoming_svd = truncated_svd(incoming_delta, cfg.rank)?;
        let basis = shared_basis(name, &[&state_svd, &incoming_svd])?;
        let (b_state, b_incoming) = match cfg.construction {
            Construction::SvdEnergy => (
                project_geometry("state", GeometrySource::SvdEnergy(&state_svd), &basis, lambda)?,
                project_geometry(
                    "incoming",
                    GeometrySource::SvdEnergy(&incoming_svd),
                    &basis,
                    lambda,
                )?,
            ),
            Construction::ProjectedCovariance => {
                let gs = covariance_geometry(name, state_delta, lambda)?;
                let gi = covariance_geometry(name, incoming_delta, lambda)?;
                (
                    project_geometry("state", GeometrySource::Covariance(&gs), &basis, lambda)?,
                    project_geometry("incoming", GeometrySource::Covariance(&gi), &basis, lambda)?,
                )
            }
        };
        let gamma = pairwise_conflict(&b_state.b, &b_incoming.b, cfg.epsilon)?;
        per_layer.insert(name.clone(), gamma);
    }
    if per_layer.is_empty() {
        return Err(CoreError::MissingTensor(String::from(
            "state_relative_conflict: no common layers",
        )));
    }
    let aggregate = per_layer.values().sum::<f64>() / per_layer.len() as f64;
    Ok(StateConflict {
        per_layer,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LambdaPolicy, RankPolicy};
    use alloc::string::ToString;

    #[test]
    fn conflict_of_identical_geometries_is_zero() {
        let b = SymMat::from_diag(&[1.0, 2.0]);
        let g = pairwise_conflict(&b, &b, 1e-8).unwrap();
        assert!(g.abs() < 1e-12);
    }

    #[test]
    fn conflict_of_proportional_pair() {
        // γ(B, 4B) = (1 + 4 - 2·2) / (1 + 4) = 0.2 for tr(B) = 1.
        let b = SymMat::from_diag(&[0.6, 0.4]);
        let b4 = b.scale(4.0);
        let g = pairwise_conflict(&b, &b4, 1e-12).unwrap();
        assert!((g - 0.2).abs() < 1e-9, "got {g}");
    }

    #[test]
    fn conflict_of_near_orthogonal_diagonals() {
        // diag(1+λ, λ) vs diag(λ, 1+λ) with λ = 1e-6, ε = 1e-8:
        // d² = 2 (√(1+λ) - √λ)², normalized by 2(1 + 2λ) + ε.
        let lam = 1e-6;
        let b1 = SymMat::from_diag(&[1.0 + lam, lam]);
        let b2 = SymMat::from_diag(&[lam, 1.0 + lam]);
        let g = pairwise_conflict(&b1, &b2, 1e-8).unwrap();
        let root_diff = libm::sqrt(1.0 + lam) - libm::sqrt(lam);
        let expect = 2.0 * root_diff * root_diff / (2.0 * (1.0 + 2.0 * lam) + 1e-8);
        assert!((g - expect).abs() < 1e-9, "got {g}, expected {expect}");
        assert!(g > 0.99 && g < 1.0);
    }

    #[test]
    fn conflict_dimension_mismatch() {
        let a = SymMat::identity(2);
        let b = SymMat::identity(3);
        assert!(matches!(
            pairwise_conflict(&a, &b, 1e-8),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn layer_conflict_weighted_mean() {
        assert_eq!(layer_conflict(&[0.37], &[1.0]).unwrap(), 0.37);
        let g = layer_conflict(&[0.1, 0.2, 0.3], &[1.0 / 3.0; 3]).unwrap();
        assert!((g - 0.2).abs() < 1e-15);
        assert_eq!(layer_conflict(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn layer_conflict_rejects_unnormalized_weights() {
        assert!(matches!(
            layer_conflict(&[0.1, 0.2], &[0.6, 0.6]),
            Err(CoreError::InvalidConfig(_))
        ));
    }

    #[test]
    fn lemma_weights_match_hand_computation() {
        // ω = (0.5, 0.25, 0.25): products are (1/8, 1/8, 1/16), Z = 5/16.
        let w = pair_weights(&[0.5, 0.25, 0.25], PairWeighting::OmegaProduct);
        assert!((w[0] - 0.4).abs() < 1e-15);
        assert!((w[1] - 0.4).abs() < 1e-15);
        assert!((w[2] - 0.2).abs() < 1e-15);

        // The weighted mean with γ = (0.1, 0.2, 0.3) is 0.4·0.1+0.4·0.2+0.2·0.3.
        let g = layer_conflict(&[0.1, 0.2, 0.3], &w).unwrap();
        assert!((g - 0.18).abs() < 1e-15);
    }

    #[test]
    fn gate_midpoint_and_saturation() {
        let cfg = GateConfig::default();
        assert_eq!(gate(cfg.tau, &cfg), 0.5);
        let high = gate(cfg.tau + 1000.0 / cfg.kappa, &cfg);
        assert!((high - cfg.alpha_max).abs() < 1e-9);
        let low = gate(cfg.tau - 1000.0 / cfg.kappa, &cfg);
        assert!((low - cfg.alpha_min).abs() < 1e-9);
    }

    #[test]
    fn gate_matches_scalar_sigmoid() {
        // τ = 0.12, κ = 10, g = 0.32 → σ(2) ≈ 0.8807970779778823.
        let cfg = GateConfig::default();
        let a = gate(0.32, &cfg);
        assert!((a - 0.880_797_077_977_882_3).abs() < 1e-12, "got {a}");
    }

    #[test]
    fn update_norm_pythagorean() {
        let mut layers = BTreeMap::new();
        layers.insert("a".to_string(), Mat::from_rows(&[&[3.0, 4.0]]));
        let tv = TaskVector::new("t", layers).unwrap();
        assert!((update_norm(&tv) - 5.0).abs() < 1e-15);

        let mut layers = BTreeMap::new();
        layers.insert("a".to_string(), Mat::from_rows(&[&[3.0]]));
        layers.insert("b".to_string(), Mat::from_rows(&[&[4.0]]));
        let tv = TaskVector::new("t", layers).unwrap();
        assert!((update_norm(&tv) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn sar_inside_and_orthogonal() {
        let v = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let inside = Mat::from_rows(&[&[2.0, -1.0, 0.0]]);
        let s = sar_directional(&inside, &v, 1e-8).unwrap();
        assert!((s - 1.0).abs() < 1e-7);
        let orthogonal = Mat::from_rows(&[&[0.0, 0.0, 3.0]]);
        let s = sar_directional(&orthogonal, &v, 1e-8).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn sar_matches_projection_oracle() {
        let v = Mat::from_rows(&[&[0.6, 0.8], &[0.8, -0.6], &[0.0, 0.0]]).scale(1.0);
        let delta = Mat::from_rows(&[&[0.2, -1.1, 0.4], &[0.9, 0.3, -0.7]]);
        let s = sar_directional(&delta, &v, 1e-8).unwrap();
        let oracle = delta.matmul(&v).frobenius_norm() / (delta.frobenius_norm() + 1e-8);
        assert_eq!(s, oracle);
        assert!((0.0..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn sar_rejects_non_orthonormal() {
        let v = Mat::from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let delta = Mat::from_rows(&[&[1.0, 1.0]]);
        assert!(matches!(
            sar_directional(&delta, &v, 1e-8),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn sar_symmetric_is_mean_of_directions() {
        let vi = Mat::from_rows(&[&[1.0], &[0.0]]);
        let vj = Mat::from_rows(&[&[0.0], &[1.0]]);
        let di = Mat::from_rows(&[&[1.0, 0.0]]);
        let dj = Mat::from_rows(&[&[0.0, 1.0]]);
        let s = sar_symmetric(&di, &vi, &dj, &vj, 1e-8).unwrap();
        let ij = sar_directional(&di, &vj, 1e-8).unwrap();
        let ji = sar_directional(&dj, &vi, 1e-8).unwrap();
        assert_eq!(s, 0.5 * (ij + ji));
    }

    #[test]
    fn grad_cosine_basic() {
        let g = [1.0, -2.0, 0.5];
        let pos = grad_cosine(&g, &g, 1e-8).unwrap();
        assert!((pos - 1.0).abs() < 1e-7);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let n = grad_cosine(&g, &neg, 1e-8).unwrap();
        assert!((n + 1.0).abs() < 1e-7);
        let orth = [2.0, 1.0, 0.0];
        let o = grad_cosine(&[1.0, -2.0, 0.0], &orth, 1e-8).unwrap();
        assert!(o.abs() < 1e-12);
        assert!(grad_cosine(&g, &[1.0], 1e-8).is_err());
    }

    #[test]
    fn grad_summary_counts_negative_pairs() {
        let s = grad_cosine_summary(&[0.5, -0.25, 0.75, -0.5]).unwrap();
        assert!((s.mean - 0.125).abs() < 1e-15);
        assert_eq!(s.min, -0.5);
        assert_eq!(s.negative_fraction, 0.5);
        assert!(grad_cosine_summary(&[]).is_none());
    }

    fn single_layer_tv(id: &str, m: Mat) -> TaskVector {
        let mut layers = BTreeMap::new();
        layers.insert("w".to_string(), m);
        TaskVector::new(id, layers).unwrap()
    }

    fn geometry_cfg() -> GeometryConfig {
        GeometryConfig {
            rank: RankPolicy::Energy(0.99),
            lambda: LambdaPolicy::Relative(1e-9),
            epsilon: 1e-10,
            construction: Construction::SvdEnergy,
        }
    }

    #[test]
    fn state_relative_identical_is_zero() {
        let d = Mat::from_rows(&[&[1.0, 0.5, -0.2], &[0.3, -0.9, 0.1]]);
        let state = single_layer_tv("state", d.clone());
        let incoming = single_layer_tv("in", d);
        let c = state_relative_conflict(&state, &incoming, &geometry_cfg()).unwrap();
        assert!(c.aggregate < 1e-10, "got {}", c.aggregate);
    }

    #[test]
    fn state_relative_proportional_closed_form() {
        // Incoming = 2·state scales the geometry by 4: γ → (1-2)²/(1+4) = 0.2.
        let d = Mat::from_rows(&[&[1.0, 0.5, -0.2], &[0.3, -0.9, 0.1]]);
        let state = single_layer_tv("state", d.clone());
        let incoming = single_layer_tv("in", d.scale(2.0));
        let c = state_relative_conflict(&state, &incoming, &geometry_cfg()).unwrap();
        assert!(
            (c.aggregate - 0.2).abs() < 1e-6,
            "got {} (λ should be negligible)",
            c.aggregate
        );

        // Scale 4 on the update means geometry scale 16: (1-4)²/(1+16) = 9/17.
        let incoming4 = single_layer_tv("in4", d.scale(4.0));
        let c4 = state_relative_conflict(&state, &incoming4, &geometry_cfg()).unwrap();
        assert!((c4.aggregate - 9.0 / 17.0).abs() < 1e-6, "got {}", c4.aggregate);
    }

    #[test]
    fn state_relative_disjoint_layers_is_missing_tensor() {
        let state = single_layer_tv("state", Mat::identity(2));
        let mut layers = BTreeMap::new();
        layers.insert("other".to_string(), Mat::identity(2));
        let incoming = TaskVector::new("in", layers).unwrap();
        assert!(matches!(
            state_relative_conflict(&state, &incoming, &geometry_cfg()),
            Err(CoreError::MissingTensor(_))
        ));
    }
}
