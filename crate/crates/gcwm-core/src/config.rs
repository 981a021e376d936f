//! Configuration surface for geometry construction, gating and the runner.
//!
//! Defaults follow the engine's reference configuration: energy-0.90 rank
//! retention, relative λ of 1e-6, gate (τ=0.12, κ=10, α∈[0,1], ε=1e-8),
//! skip thresholds 0.05, anchor-based memory, uniform ω, weighted-mean base
//! operator and η=0.1.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;

pub use crate::linalg::RankPolicy;

/// Regularization policy for the λ added to every covariance geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy {
    /// `λ = coeff * (mean_i ‖Δ_i‖_F² / d_in + 1e-30)`: relative to the mean
    /// per-dimension update energy of the active set.
    Relative(f64),
    /// Fixed λ.
    Absolute(f64),
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::Relative(1e-6)
    }
}

impl LambdaPolicy {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            LambdaPolicy::Relative(c) => c,
            LambdaPolicy::Absolute(a) => a,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(String::from("lambda")))
        }
    }

    /// Resolve λ for one layer from the active-set deltas at that layer.
    pub fn resolve(&self, deltas: &[&Mat]) -> f64 {
        match *self {
            LambdaPolicy::Absolute(a) => a,
            LambdaPolicy::Relative(c) => {
                let mut energy = 0.0;
                let mut count = 0.0;
                for d in deltas {
                    let d_in = d.cols().max(1) as f64;
                    energy += d.frobenius_norm_sq() / d_in;
                    count += 1.0;
                }
                let mean = if count > 0.0 { energy / count } else { 0.0 };
                c * (mean + 1e-30)
            }
        }
    }
}

/// How a projected geometry is assembled in the shared basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Construction {
    /// `B_i = Qᵀ V_i diag(σ_i²) V_iᵀ Q + λI` from the retained SVD factors.
    #[default]
    SvdEnergy,
    /// `B_i = Qᵀ C_i Q` from the dense covariance geometry.
    ProjectedCovariance,
}

/// Shared-metric choice for the geometry-aware branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SharedMetric {
    /// Gaussian Wasserstein barycenter of the projected geometries.
    #[default]
    Barycenter,
    /// Weighted arithmetic mean `Σ_i ω_i B_i`.
    WeightedMean,
}

/// Weighting scheme for aggregating pairwise conflicts into a layer score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairWeighting {
    /// Uniform over the m(m-1)/2 unordered pairs.
    #[default]
    Uniform,
    /// `w_ij = ω_i ω_j / Z` with `Z = Σ_{i<j} ω_i ω_j`.
    OmegaProduct,
}

/// Conflict-gate parameters: `α = α_min + (α_max - α_min) σ(κ (g - τ))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub tau: f64,
    pub kappa: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Stabilizer added to the trace normalization of pairwise conflicts.
    pub epsilon: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau: 0.12,
            kappa: 10.0,
            alpha_min: 0.0,
            alpha_max: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(CoreError::InvalidConfig(String::from("tau")));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(CoreError::InvalidConfig(String::from("kappa")));
        }
        if !(self.alpha_min >= 0.0
            && self.alpha_min <= self.alpha_max
            && self.alpha_max <= 1.0)
        {
            return Err(CoreError::InvalidConfig(String::from("alpha_min/alpha_max")));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CoreError::InvalidConfig(String::from("epsilon")));
        }
        Ok(())
    }

    /// Gate value at the threshold `g = τ`; the midpoint of the α range.
    pub fn midpoint(&self) -> f64 {
        self.alpha_min + (self.alpha_max - self.alpha_min) * 0.5
    }
}

/// Built-in base merge operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseOperator {
    /// `Σ_i ω_i Δ_i` — linear, commutes with the metric transforms.
    #[default]
    WeightedMean,
    /// Weighted mean restricted to entries whose sign agrees across every
    /// task; conflicting entries are zeroed. Nonlinear on purpose.
    SignClipped,
}

impl BaseOperator {
    pub fn name(&self) -> &'static str {
        match self {
            BaseOperator::WeightedMean => "weighted_mean",
            BaseOperator::SignClipped => "sign_clipped",
        }
    }
}

/// Parameters of the geometry pipeline shared by merging and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryConfig {
    pub rank: RankPolicy,
    pub lambda: LambdaPolicy,
    pub epsilon: f64,
    pub construction: Construction,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            rank: RankPolicy::Energy(0.90),
            lambda: LambdaPolicy::default(),
            epsilon: 1e-8,
            construction: Construction::default(),
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        self.rank.validate()?;
        self.lambda.validate()?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CoreError::InvalidConfig(String::from("epsilon")));
        }
        Ok(())
    }
}

/// Per-layer merge configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeConfig {
    pub geometry: GeometryConfig,
    pub gate: GateConfig,
    pub pair_weighting: PairWeighting,
    pub shared_metric: SharedMetric,
    /// `α < skip_low` short-circuits to the plain merge.
    pub skip_low: f64,
    /// `α > 1 - skip_high` short-circuits to the geometry branch.
    pub skip_high: f64,
    /// Layers with `d_in` at or below this use the dense local metric.
    pub dense_local_max_dim: usize,
    pub force_dense_local: bool,
    pub barycenter_tol: f64,
    pub barycenter_max_iter: usize,
    pub base_operator: BaseOperator,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            geometry: GeometryConfig::default(),
            gate: GateConfig::default(),
            pair_weighting: PairWeighting::default(),
            shared_metric: SharedMetric::default(),
            skip_low: 0.05,
            skip_high: 0.05,
            dense_local_max_dim: 64,
            force_dense_local: false,
            barycenter_tol: crate::linalg::tol::BARYCENTER,
            barycenter_max_iter: crate::linalg::tol::BARYCENTER_MAX_ITER,
            base_operator: BaseOperator::default(),
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.gate.validate()?;
        if !(self.skip_low >= 0.0 && self.skip_low.is_finite()) {
            return Err(CoreError::InvalidConfig(String::from("skip_low")));
        }
        if !(self.skip_high >= 0.0 && self.skip_high.is_finite()) {
            return Err(CoreError::InvalidConfig(String::from("skip_high")));
        }
        if !(self.barycenter_tol > 0.0 && self.barycenter_tol.is_finite()) {
            return Err(CoreError::InvalidConfig(String::from("barycenter_tol")));
        }
        if self.barycenter_max_iter == 0 {
            return Err(CoreError::InvalidConfig(String::from("barycenter_max_iter")));
        }
        Ok(())
    }

    /// Whether the dense local metric applies to a layer of width `d_in`.
    pub fn use_dense_local(&self, d_in: usize) -> bool {
        self.force_dense_local || d_in <= self.dense_local_max_dim
    }
}

/// Which updates form the active set at each continual step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemoryPolicy {
    /// Previous task vectors (optionally only the `window` most recent) plus
    /// the incoming task.
    HistoryAware { window: Option<usize> },
    /// The previous merged proposal as a synthetic "anchor" task plus the
    /// incoming task.
    AnchorBased,
}

impl Default for MemoryPolicy {
    fn default() -> Self {
        MemoryPolicy::AnchorBased
    }
}

impl MemoryPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            MemoryPolicy::HistoryAware { window: Some(0) } => {
                Err(CoreError::InvalidConfig(String::from("memory.window")))
            }
            _ => Ok(()),
        }
    }
}

/// Merge-weight policy over the active set.
#[derive(Debug, Clone, PartialEq)]
pub enum OmegaPolicy {
    /// Uniform over the active set; under anchor-based memory the anchor
    /// takes `anchor_weight` and the incoming task the rest.
    Uniform,
    /// Relative weights by task id, renormalized over each step's active set.
    /// Every active id (including the reserved "anchor") must be present.
    Explicit(BTreeMap<String, f64>),
}

impl Default for OmegaPolicy {
    fn default() -> Self {
        OmegaPolicy::Uniform
    }
}

/// Step-size schedule for applying incremental updates.
#[derive(Debug, Clone, PartialEq)]
pub enum EtaSchedule {
    Constant(f64),
    /// One η per step; running more steps than provided is a config error.
    PerStep(Vec<f64>),
}

impl Default for EtaSchedule {
    fn default() -> Self {
        EtaSchedule::Constant(0.1)
    }
}

impl EtaSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            EtaSchedule::Constant(v) => *v > 0.0 && v.is_finite(),
            EtaSchedule::PerStep(vs) => {
                !vs.is_empty() && vs.iter().all(|v| *v > 0.0 && v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(String::from("eta")))
        }
    }

    /// η for step `t` (0-based).
    pub fn at(&self, step: usize) -> Result<f64> {
        match self {
            EtaSchedule::Constant(v) => Ok(*v),
            EtaSchedule::PerStep(vs) => vs
                .get(step)
                .copied()
                .ok_or_else(|| CoreError::InvalidConfig(String::from("eta"))),
        }
    }
}

/// Name filter selecting which 2-D tensors count as target layers.
///
/// Empty pattern list accepts every 2-D tensor; otherwise a layer is targeted
/// when any pattern is a substring of its name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerFilter {
    pub patterns: Vec<String>,
}

impl LayerFilter {
    pub fn all() -> Self {
        LayerFilter::default()
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.is_empty() || self.patterns.iter().any(|p| name.contains(p.as_str()))
    }
}

/// Full runner configuration for a continual merge sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RunnerConfig {
    pub merge: MergeConfig,
    pub eta: EtaSchedule,
    pub memory: MemoryPolicy,
    pub omega: OmegaPolicy,
    /// Weight of the synthetic anchor task under anchor-based memory with
    /// uniform ω; the incoming task receives the complement.
    pub anchor_weight: f64,
    pub layer_filter: LayerFilter,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        RunnerConfig {
            merge: MergeConfig::default(),
            eta: EtaSchedule::default(),
            memory: MemoryPolicy::default(),
            omega: OmegaPolicy::default(),
            anchor_weight: 0.5,
            layer_filter: LayerFilter::default(),
        }
    }
}

impl RunnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.merge.validate()?;
        self.eta.validate()?;
        self.memory.validate()?;
        if !(self.anchor_weight > 0.0 && self.anchor_weight < 1.0) {
            return Err(CoreError::InvalidConfig(String::from("anchor_weight")));
        }
        if let OmegaPolicy::Explicit(map) = &self.omega {
            if map.values().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return Err(CoreError::InvalidConfig(String::from("omega")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunnerConfig::default().validate().unwrap();
    }

    #[test]
    fn gate_rejects_nonpositive_kappa() {
        let cfg = GateConfig {
            kappa: -1.0,
            ..GateConfig::default()
        };
        assert_eq!(
            cfg.validate(),
            Err(CoreError::InvalidConfig(String::from("kappa")))
        );
    }

    #[test]
    fn gate_rejects_inverted_alpha_range() {
        let cfg = GateConfig {
            alpha_min: 0.9,
            alpha_max: 0.1,
            ..GateConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lambda_relative_tracks_update_energy() {
        let d = Mat::from_rows(&[&[3.0, 0.0], &[0.0, 4.0]]);
        // tr(ΔᵀΔ)/d_in = 25/2.
        let lam = LambdaPolicy::Relative(1e-6).resolve(&[&d]);
        assert!((lam - 1e-6 * (12.5 + 1e-30)).abs() < 1e-20);
        let lam0 = LambdaPolicy::Relative(1e-6).resolve(&[]);
        assert!(lam0 > 0.0);
    }

    #[test]
    fn eta_schedule_bounds() {
        let s = EtaSchedule::PerStep(alloc::vec![0.1, 0.2]);
        assert_eq!(s.at(1).unwrap(), 0.2);
        assert!(s.at(2).is_err());
        assert!(EtaSchedule::Constant(0.0).validate().is_err());
    }

    #[test]
    fn layer_filter_substring_semantics() {
        let f = LayerFilter {
            patterns: alloc::vec![String::from("q_proj"), String::from("up_proj")],
        };
        assert!(f.matches("model.layers.0.q_proj.weight"));
        assert!(!f.matches("model.layers.0.k_proj.weight"));
        assert!(LayerFilter::all().matches("anything"));
    }

    #[test]
    fn memory_window_zero_rejected() {
        assert!(MemoryPolicy::HistoryAware { window: Some(0) }.validate().is_err());
    }
}
