//! Per-layer merging: plain base-operator merges, geometry-aware
//! whiten/merge/recolor under the shared metric, conflict-gated blending and
//! branch skipping.
//!
//! The geometry-aware branch computes
//!
//! ```text
//! Δ_geo = M({Δ_i B̃^{-1/2}}; ω) B̃^{1/2}
//! ```
//!
//! for a base operator `M` and the full-space regularized metric `B̃`, then
//! blends `Δ_merge = α Δ_geo + (1 - α) Δ_plain`. Gate values below `skip_low`
//! short-circuit to the plain merge (geometry work is skipped entirely);
//! values above `1 - skip_high` return the pure geometry branch. Layers whose
//! input dimension is small enough use a dense local metric built from the
//! unprojected covariance geometries instead of the SVD/shared-basis path.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::config::{BaseOperator, Construction, MergeConfig, SharedMetric};
use crate::error::{CoreError, Result};
use crate::geometry::{
    covariance_geometry, full_space_metric, project_geometry, shared_basis, FullSpaceMetric,
    GeometrySource,
};
use crate::linalg::{truncated_svd, wasserstein_barycenter};
use crate::mat::{Mat, SymMat};
use crate::signals::{
    gate, layer_conflict, pair_weights, pairwise_conflict, ConflictGateProfile, PairConflict,
};

/// Simplex weights over the active set, aligned with the delta list.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights {
    values: Vec<f64>,
}

impl MergeWeights {
    /// All weights nonnegative and summing to one within 1e-12.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::InvalidConfig(String::from("omega")));
        }
        if values.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoreError::InvalidConfig(String::from("omega")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > crate::linalg::tol::WEIGHT_SUM {
            return Err(CoreError::InvalidConfig(String::from("omega")));
        }
        Ok(MergeWeights { values })
    }

    pub fn uniform(m: usize) -> Self {
        MergeWeights {
            values: alloc::vec![1.0 / m as f64; m],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// A base merge operator acting on (optionally whitened) deltas.
pub trait MergeOperator: Sync {
    fn name(&self) -> &'static str;
    fn merge(&self, deltas: &[&Mat], weights: &MergeWeights) -> Result<Mat>;
}

fn check_equal_shapes(deltas: &[&Mat], weights: &MergeWeights) -> Result<()> {
    if deltas.is_empty() {
        return Err(CoreError::InvalidInput(String::from("no deltas to merge")));
    }
    if deltas.len() != weights.len() {
        return Err(CoreError::Shape(String::from(
            "weights/deltas length mismatch",
        )));
    }
    let shape = deltas[0].shape();
    if deltas.iter().any(|d| d.shape() != shape) {
        return Err(CoreError::Shape(String::from("deltas have mixed shapes")));
    }
    Ok(())
}

/// `Σ_i ω_i Δ_i`.
pub struct WeightedMean;

impl MergeOperator for WeightedMean {
    fn name(&self) -> &'static str {
        "weighted_mean"
    }

    fn merge(&self, deltas: &[&Mat], weights: &MergeWeights) -> Result<Mat> {
        check_equal_shapes(deltas, weights)?;
        let mut out = Mat::zeros(deltas[0].rows(), deltas[0].cols());
        for (d, &w) in deltas.iter().zip(weights.as_slice()) {
            out.add_scaled(w, d);
        }
        Ok(out)
    }
}

/// Weighted mean over entries whose nonzero signs agree across every task;
/// entries with conflicting signs are zeroed. Zeros count as agreeing.
pub struct SignClippedMean;

impl MergeOperator for SignClippedMean {
    fn name(&self) -> &'static str {
        "sign_clipped"
    }

    fn merge(&self, deltas: &[&Mat], weights: &MergeWeights) -> Result<Mat> {
        check_equal_shapes(deltas, weights)?;
        let (rows, cols) = deltas[0].shape();
        let mut out = Mat::zeros(rows, cols);
        let n = rows * cols;
        for idx in 0..n {
            let mut sign = 0.0_f64;
            let mut agree = true;
            for d in deltas {
                let v = d.data()[idx];
                if v == 0.0 {
                    continue;
                }
                let s = if v > 0.0 { 1.0 } else { -1.0 };
                if sign == 0.0 {
                    sign = s;
                } else if s != sign {
                    agree = false;
                    break;
                }
            }
            if agree && sign != 0.0 {
                let mut acc = 0.0;
                for (d, &w) in deltas.iter().zip(weights.as_slice()) {
                    acc += w * d.data()[idx];
                }
                out.data_mut()[idx] = acc;
            }
        }
        Ok(out)
    }
}

impl BaseOperator {
    /// The built-in operator implementation behind a config selection.
    pub fn instance(&self) -> &'static dyn MergeOperator {
        match self {
            BaseOperator::WeightedMean => &WeightedMean,
            BaseOperator::SignClipped => &SignClippedMean,
        }
    }
}

/// Plain (ungated) merge: the base operator applied to the raw deltas.
pub fn plain_merge(
    deltas: &[&Mat],
    weights: &MergeWeights,
    operator: &dyn MergeOperator,
) -> Result<Mat> {
    operator.merge(deltas, weights)
}

/// Whitening transform `Δ ↦ Δ B̃^{-1/2}`.
pub fn whiten(delta: &Mat, metric: &FullSpaceMetric) -> Mat {
    metric.apply_inv_sqrt(delta)
}

/// Recoloring transform `Δ ↦ Δ B̃^{1/2}`; inverse of [`whiten`].
pub fn recolor(delta_white: &Mat, metric: &FullSpaceMetric) -> Mat {
    metric.apply_sqrt(delta_white)
}

/// Geometry-aware merge: whiten each delta, apply the base operator, recolor.
///
/// With a linear base operator this equals the plain merge exactly (the
/// metric transforms commute with linear combinations).
pub fn geometry_merge(
    deltas: &[&Mat],
    weights: &MergeWeights,
    metric: &FullSpaceMetric,
    operator: &dyn MergeOperator,
) -> Result<Mat> {
    check_equal_shapes(deltas, weights)?;
    let whitened: Vec<Mat> = deltas.iter().map(|d| whiten(d, metric)).collect();
    let refs: Vec<&Mat> = whitened.iter().collect();
    let merged_white = operator.merge(&refs, weights)?;
    Ok(recolor(&merged_white, metric))
}

/// `α Δ_geo + (1 - α) Δ_plain`, elementwise.
pub fn blend(alpha: f64, geo: &Mat, plain: &Mat) -> Mat {
    let mut out = geo.scale(alpha);
    out.add_scaled(1.0 - alpha, plain);
    out
}

/// Which path produced a layer's merged delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeBranch {
    /// Gate below `skip_low` (or a single active task): plain merge only.
    SkippedLow,
    /// Gate above `1 - skip_high`: pure geometry branch.
    SkippedHigh,
    /// Gated blend under the projected shared metric.
    Blended,
    /// Gated blend under the dense local metric.
    DenseLocal,
}

impl MergeBranch {
    pub fn name(&self) -> &'static str {
        match self {
            MergeBranch::SkippedLow => "skipped_low",
            MergeBranch::SkippedHigh => "skipped_high",
            MergeBranch::Blended => "blended",
            MergeBranch::DenseLocal => "dense_local",
        }
    }
}

/// Merged proposal for one layer.
///
/// Invariants: under `Blended`/`DenseLocal`, `delta_merge` is exactly the
/// elementwise blend of `delta_geo` and `delta_plain`; under `SkippedLow` it
/// is `delta_plain` (and `delta_geo` is absent); under `SkippedHigh` it is
/// `delta_geo`.
#[derive(Debug, Clone)]
pub struct MergeProposal {
    pub layer_name: String,
    pub delta_plain: Mat,
    pub delta_geo: Option<Mat>,
    pub delta_merge: Mat,
    pub alpha: f64,
    pub g: f64,
    pub branch: MergeBranch,
}

/// One active task's contribution to a layer merge.
#[derive(Debug, Clone, Copy)]
pub struct LayerTask<'a> {
    pub task_id: &'a str,
    pub delta: &'a Mat,
}

/// Proposal plus the conflict/gate profile that produced it.
#[derive(Debug, Clone)]
pub struct LayerMergeOutcome {
    pub proposal: MergeProposal,
    pub profile: ConflictGateProfile,
}

/// Pairwise conflicts and the aggregate for a set of geometries.
fn conflict_profile(
    layer_name: &str,
    tasks: &[LayerTask<'_>],
    geometries: &[SymMat],
    weights: &MergeWeights,
    cfg: &MergeConfig,
) -> Result<ConflictGateProfile> {
    let m = geometries.len();
    let w = pair_weights(weights.as_slice(), cfg.pair_weighting);
    let mut pairs = Vec::with_capacity(w.len());
    let mut gammas = Vec::with_capacity(w.len());
    let mut k = 0;
    for i in 0..m {
        for j in (i + 1)..m {
            let gamma = pairwise_conflict(&geometries[i], &geometries[j], cfg.geometry.epsilon)?;
            pairs.push(PairConflict {
                task_i: tasks[i].task_id.to_string(),
                task_j: tasks[j].task_id.to_string(),
                gamma,
                weight: w[k],
            });
            gammas.push(gamma);
            k += 1;
        }
    }
    let g = layer_conflict(&gammas, &w)?;
    let alpha = gate(g, &cfg.gate);
    Ok(ConflictGateProfile {
        layer_name: layer_name.to_string(),
        pairs,
        g,
        alpha,
    })
}

/// Merge one layer's active deltas into a gated proposal.
///
/// A single active task reduces to the plain merge with `g = 0`
/// (`SkippedLow`). Barycenter non-convergence propagates as a
/// `Convergence` error for the caller to wrap with layer context.
pub fn merge_layer(
    layer_name: &str,
    tasks: &[LayerTask<'_>],
    weights: &MergeWeights,
    cfg: &MergeConfig,
) -> Result<LayerMergeOutcome> {
    cfg.validate()?;
    let deltas: Vec<&Mat> = tasks.iter().map(|t| t.delta).collect();
    check_equal_shapes(&deltas, weights)?;
    let operator = cfg.base_operator.instance();
    let delta_plain = plain_merge(&deltas, weights, operator)?;

    if tasks.len() == 1 {
        let alpha = gate(0.0, &cfg.gate);
        return Ok(LayerMergeOutcome {
            proposal: MergeProposal {
                layer_name: layer_name.to_string(),
                delta_merge: delta_plain.clone(),
                delta_plain,
                delta_geo: None,
                alpha,
                g: 0.0,
                branch: MergeBranch::SkippedLow,
            },
            profile: ConflictGateProfile {
                layer_name: layer_name.to_string(),
                pairs: Vec::new(),
                g: 0.0,
                alpha,
            },
        });
    }

    let d_in = deltas[0].cols();
    let lambda = cfg.geometry.lambda.resolve(&deltas);
    let dense = cfg.use_dense_local(d_in);

    // Conflict geometries plus everything needed to build the shared metric
    // lazily (the metric is only constructed when the gate does not skip low).
    enum MetricPlan {
        Dense(Vec<SymMat>),
        Projected {
            basis: crate::geometry::SharedBasis,
            geometries: Vec<SymMat>,
        },
    }

    let plan = if dense {
        let mut sigmas = Vec::with_capacity(deltas.len());
        for d in &deltas {
            sigmas.push(covariance_geometry(layer_name, d, lambda)?.c);
        }
        MetricPlan::Dense(sigmas)
    } else {
        let mut svds = Vec::with_capacity(deltas.len());
        for d in &deltas {
            svds.push(truncated_svd(d, cfg.geometry.rank)?);
        }
        let svd_refs: Vec<_> = svds.iter().collect();
        let basis = shared_basis(layer_name, &svd_refs)?;
        let mut geometries = Vec::with_capacity(deltas.len());
        for (task, svd) in tasks.iter().zip(&svds) {
            let projected = match cfg.geometry.construction {
                Construction::SvdEnergy => {
                    project_geometry(task.task_id, GeometrySource::SvdEnergy(svd), &basis, lambda)?
                }
                Construction::ProjectedCovariance => {
                    let geom = covariance_geometry(layer_name, task.delta, lambda)?;
                    project_geometry(task.task_id, GeometrySource::Covariance(&geom), &basis, lambda)?
                }
            };
            geometries.push(projected.b);
        }
        MetricPlan::Projected { basis, geometries }
    };

    let conflict_geoms = match &plan {
        MetricPlan::Dense(sigmas) => sigmas,
        MetricPlan::Projected { geometries, .. } => geometries,
    };
    let profile = conflict_profile(layer_name, tasks, conflict_geoms, weights, cfg)?;
    let (g, alpha) = (profile.g, profile.alpha);

    if alpha < cfg.skip_low {
        return Ok(LayerMergeOutcome {
            proposal: MergeProposal {
                layer_name: layer_name.to_string(),
                delta_merge: delta_plain.clone(),
                delta_plain,
                delta_geo: None,
                alpha,
                g,
                branch: MergeBranch::SkippedLow,
            },
            profile,
        });
    }

    let (metric, blended_branch) = match plan {
        MetricPlan::Dense(sigmas) => {
            let mut shared = SymMat::zeros(d_in);
            for (sigma, &w) in sigmas.iter().zip(weights.as_slice()) {
                shared.add_scaled(w, sigma);
            }
            let metric = FullSpaceMetric::new(
                layer_name.to_string(),
                Mat::identity(d_in),
                shared,
                lambda,
            )?;
            (metric, MergeBranch::DenseLocal)
        }
        MetricPlan::Projected { basis, geometries } => {
            let shared = match cfg.shared_metric {
                SharedMetric::Barycenter => wasserstein_barycenter(
                    &geometries,
                    weights.as_slice(),
                    cfg.barycenter_tol,
                    cfg.barycenter_max_iter,
                )?,
                SharedMetric::WeightedMean => {
                    let mut mean = SymMat::zeros(basis.dim());
                    for (b, &w) in geometries.iter().zip(weights.as_slice()) {
                        mean.add_scaled(w, b);
                    }
                    mean
                }
            };
            (full_space_metric(&basis, &shared, lambda)?, MergeBranch::Blended)
        }
    };

    let delta_geo = geometry_merge(&deltas, weights, &metric, operator)?;
    let (delta_merge, branch) = if alpha > 1.0 - cfg.skip_high {
        (delta_geo.clone(), MergeBranch::SkippedHigh)
    } else {
        (blend(alpha, &delta_geo, &delta_plain), blended_branch)
    };

    Ok(LayerMergeOutcome {
        proposal: MergeProposal {
            layer_name: layer_name.to_string(),
            delta_plain,
            delta_geo: Some(delta_geo),
            delta_merge,
            alpha,
            g,
            branch,
        },
        profile,
    })
}

/// Boxed operator from a dynamic name (CLI plumbing).
pub fn operator_by_name(name: &str) -> Option<Box<dyn MergeOperator>> {
    match name {
        "weighted_mean" => Some(Box::new(WeightedMean)),
        "sign_clipped" => Some(Box::new(SignClippedMean)),
        _ => None,
    }
}
