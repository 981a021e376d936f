//! Data-free continual model merging driven by update geometry.
//!
//! The crate merges a sequence of task updates (parameter deltas relative to a
//! shared base model) without access to any training data. Each layer update
//! `Δ` induces an SPD covariance geometry `ΔᵀΔ + λI`; pairs of geometries are
//! compared with the normalized Bures-Wasserstein distance, and the resulting
//! layer conflict score gates how strongly a geometry-aware merge (whitening
//! under a shared Wasserstein-barycenter metric, merging, recoloring) is
//! blended with a plain weighted merge. Continual steps apply only the
//! increment between consecutive merged proposals.
//!
//! The crate is `no_std` (with `alloc`); all I/O, file formats and the CLI
//! live in the companion `gcwm-cli` crate.
//!
//! Module map:
//! - [`mat`]: dense row-major matrices and symmetric wrappers
//! - [`linalg`]: symmetric eigendecomposition, SPD square roots, truncated
//!   SVD, orthonormal bases, Bures distance, Wasserstein barycenter
//! - [`config`]: rank/regularization/gate/runner configuration
//! - [`geometry`]: task vectors, covariance geometries, shared bases,
//!   projected geometries and the full-space regularized metric
//! - [`signals`]: conflict, gate, SAR, gradient-cosine and state-relative
//!   compatibility signals
//! - [`merge`]: plain and geometry-aware per-layer merging with skip logic
//! - [`runner`]: memory policies and the incremental continual loop
//! - [`verify`]: numerical verification of the gate/blend identities and the
//!   conflict bound

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod config;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod mat;
pub mod merge;
pub mod runner;
pub mod signals;
pub mod verify;

pub use config::{
    BaseOperator, Construction, EtaSchedule, GateConfig, GeometryConfig, LambdaPolicy,
    LayerFilter, MemoryPolicy, MergeConfig, OmegaPolicy, PairWeighting, RankPolicy,
    RunnerConfig, SharedMetric,
};
pub use error::{CoreError, Result, StepError};
pub use geometry::{
    FullSpaceMetric, GeometrySource, LayerGeometry, LayerMap, ProjectedGeometry, SharedBasis,
    TaskVector,
};
pub use linalg::{SvdFactors, SymEig};
pub use mat::{Mat, SymMat};
pub use merge::{
    LayerMergeOutcome, LayerTask, MergeBranch, MergeOperator, MergeProposal, MergeWeights,
};
pub use runner::{
    BranchCounts, LayerJob, MergedState, SignalReport, StepOutcome, StepPlan, ANCHOR_TASK_ID,
};
pub use signals::{ConflictGateProfile, GradCosineSummary, StateConflict};
pub use verify::{QuadraticSurrogate, Sampler, VerificationReport};
