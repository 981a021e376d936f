//! The continual merge loop.
//!
//! A sequence run owns a [`MergedState`]: the current and previous merged
//! proposals, the applied model parameters over the targeted layers, the
//! accumulated applied update (state minus base), and the consumed task
//! history. Each step builds an active set from the memory policy, merges
//! every layer, and applies only the increment between consecutive merged
//! proposals:
//!
//! ```text
//! Δ_inc,t = Δ_merge,t - Δ_merge,t-1        (Δ_merge,0 = 0)
//! θ_t     = θ_{t-1} + η_t Δ_inc,t
//! ```
//!
//! Steps are strictly sequential; within a step the per-layer jobs from
//! [`plan_step`] are pure and may be executed on any scheduler before
//! [`complete_step`] gathers them in layer order. [`merge_step`] is the
//! sequential reference path; a parallel executor over the same jobs produces
//! bit-identical results.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::config::{MemoryPolicy, MergeConfig, OmegaPolicy, RunnerConfig};
use crate::error::{CoreError, Result, StepError};
use crate::geometry::{LayerMap, TaskVector};
use crate::linalg::truncated_svd;
use crate::mat::Mat;
use crate::merge::{merge_layer, LayerMergeOutcome, LayerTask, MergeBranch, MergeWeights};
use crate::signals::{
    sar_symmetric, state_relative_conflict, update_norm, GradCosineSummary,
};

/// Reserved task id for the previous merged proposal under anchor memory.
pub const ANCHOR_TASK_ID: &str = "anchor";

/// Sequence-level state of a continual run.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedState {
    step: usize,
    merge_current: LayerMap,
    merge_previous: LayerMap,
    model_params: LayerMap,
    state_delta: LayerMap,
    history: Vec<TaskVector>,
}

impl MergedState {
    /// State at t = 0: zero merged proposals, parameters at the base model.
    ///
    /// `theta_pre` holds the 2-D tensors of the base model; the filter picks
    /// the targeted layers.
    pub fn initial(theta_pre: &LayerMap, filter: &crate::config::LayerFilter) -> Result<Self> {
        let mut merge_current = LayerMap::new();
        let mut model_params = LayerMap::new();
        for (name, tensor) in theta_pre {
            if !filter.matches(name) {
                continue;
            }
            merge_current.insert(name.clone(), Mat::zeros(tensor.rows(), tensor.cols()));
            model_params.insert(name.clone(), tensor.clone());
        }
        if merge_current.is_empty() {
            return Err(CoreError::InvalidInput(String::from(
                "no target layers selected from the base model",
            )));
        }
        Ok(MergedState {
            step: 0,
            merge_previous: merge_current.clone(),
            state_delta: merge_current.clone(),
            merge_current,
            model_params,
            history: Vec::new(),
        })
    }

    /// Number of consumed tasks (the continual step index t).
    pub fn step(&self) -> usize {
        self.step
    }

    /// Δ_merge,t per layer.
    pub fn merge_current(&self) -> &LayerMap {
        &self.merge_current
    }

    /// Δ_merge,t-1 per layer.
    pub fn merge_previous(&self) -> &LayerMap {
        &self.merge_previous
    }

    /// θ_t over the targeted layers.
    pub fn model_params(&self) -> &LayerMap {
        &self.model_params
    }

    /// θ_t - θ_pre over the targeted layers (the applied accumulated update).
    pub fn state_delta(&self) -> &LayerMap {
        &self.state_delta
    }

    /// Consumed task vectors, oldest first.
    pub fn history(&self) -> &[TaskVector] {
        &self.history
    }

    pub fn history_ids(&self) -> Vec<String> {
        self.history.iter().map(|t| t.task_id.clone()).collect()
    }

    fn check_schema(&self, incoming: &TaskVector) -> Result<()> {
        for name in self.merge_current.keys() {
            let delta = incoming
                .layer(name)
                .ok_or_else(|| CoreError::MissingTensor(name.clone()))?;
            let expect = self.merge_current[name].shape();
            if delta.shape() != expect {
                return Err(CoreError::Shape(alloc::format!(
                    "layer `{name}`: task is {}x{}, run schema is {}x{}",
                    delta.shape().0,
                    delta.shape().1,
                    expect.0,
                    expect.1
                )));
            }
        }
        if let Some(extra) = incoming
            .layer_names()
            .find(|n| !self.merge_current.contains_key(*n))
        {
            return Err(CoreError::MissingTensor(alloc::format!(
                "{extra} (present in task, absent from run schema)"
            )));
        }
        Ok(())
    }
}

/// Assemble the ordered active set for the next step.
///
/// History-aware: the (windowed) previous tasks oldest-first, then the
/// incoming task. Anchor-based: the previous merged proposal as a synthetic
/// task named "anchor", then the incoming task; at t = 0 just the incoming.
pub fn build_active_set(
    state: &MergedState,
    incoming: &TaskVector,
    policy: &MemoryPolicy,
) -> Result<Vec<TaskVector>> {
    state.check_schema(incoming)?;
    let mut active = Vec::new();
    match policy {
        MemoryPolicy::AnchorBased => {
            if state.step >= 1 {
                active.push(TaskVector::new(ANCHOR_TASK_ID, state.merge_current.clone())?);
            }
        }
        MemoryPolicy::HistoryAware { window } => {
            let keep = window.unwrap_or(state.history.len()).min(state.history.len());
            for task in &state.history[state.history.len() - keep..] {
                active.push(task.clone());
            }
        }
    }
    active.push(incoming.clone());
    Ok(active)
}

fn omega_for_active(active: &[TaskVector], cfg: &RunnerConfig) -> Result<MergeWeights> {
    match &cfg.omega {
        OmegaPolicy::Explicit(map) => {
            let mut raw = Vec::with_capacity(active.len());
            for task in active {
                let w = map
                    .get(&task.task_id)
                    .copied()
                    .ok_or_else(|| CoreError::InvalidConfig(alloc::format!(
                        "omega (missing id `{}`)",
                        task.task_id
                    )))?;
                raw.push(w);
            }
            let sum: f64 = raw.iter().sum();
            if !(sum > 0.0) {
                return Err(CoreError::InvalidConfig(String::from("omega")));
            }
            for w in &mut raw {
                *w /= sum;
            }
            MergeWeights::new(raw)
        }
        OmegaPolicy::Uniform => {
            if active.len() == 2 && active[0].task_id == ANCHOR_TASK_ID {
                MergeWeights::new(alloc::vec![cfg.anchor_weight, 1.0 - cfg.anchor_weight])
            } else {
                Ok(MergeWeights::uniform(active.len()))
            }
        }
    }
}

/// One pure per-layer merge job.
#[derive(Debug, Clone)]
pub struct LayerJob {
    pub layer_name: String,
    pub task_ids: Vec<String>,
    pub deltas: Vec<Mat>,
    pub weights: MergeWeights,
    pub config: MergeConfig,
}

impl LayerJob {
    pub fn execute(&self) -> Result<LayerMergeOutcome> {
        let tasks: Vec<LayerTask<'_>> = self
            .task_ids
            .iter()
            .zip(&self.deltas)
            .map(|(task_id, delta)| LayerTask {
                task_id,
                delta,
            })
            .collect();
        merge_layer(&self.layer_name, &tasks, &self.weights, &self.config)
    }
}

/// The planned work of one continual step.
#[derive(Debug, Clone)]
pub struct StepPlan {
    /// 1-based index of the step being computed.
    pub step: usize,
    pub task_id: String,
    pub active_set: Vec<TaskVector>,
    pub omega: MergeWeights,
    pub jobs: Vec<LayerJob>,
}

fn wrap<T>(r: Result<T>, step: usize, task_id: &str, layer: Option<&str>) -> core::result::Result<T, StepError> {
    r.map_err(|e| StepError::new(step, task_id.to_string(), layer.map(|l| l.to_string()), e))
}

/// Validate the step and lay out one pure merge job per target layer.
pub fn plan_step(
    state: &MergedState,
    incoming: &TaskVector,
    cfg: &RunnerConfig,
) -> core::result::Result<StepPlan, StepError> {
    let step = state.step + 1;
    let task_id = incoming.task_id.clone();
    wrap(cfg.validate(), step, &task_id, None)?;
    if incoming.task_id == ANCHOR_TASK_ID {
        return wrap(
            Err(CoreError::InvalidInput(alloc::format!(
                "task id `{ANCHOR_TASK_ID}` is reserved"
            ))),
            step,
            &task_id,
            None,
        );
    }
    let active_set = wrap(
        build_active_set(state, incoming, &cfg.memory),
        step,
        &task_id,
        None,
    )?;
    let omega = wrap(omega_for_active(&active_set, cfg), step, &task_id, None)?;

    let task_ids: Vec<String> = active_set.iter().map(|t| t.task_id.clone()).collect();
    let mut jobs = Vec::with_capacity(state.merge_current.len());
    for layer_name in state.merge_current.keys() {
        let deltas: Vec<Mat> = active_set
            .iter()
            .map(|t| {
                t.layer(layer_name)
                    .expect("active set schema was validated")
                    .clone()
            })
            .collect();
        jobs.push(LayerJob {
            layer_name: layer_name.clone(),
            task_ids: task_ids.clone(),
            deltas,
            weights: omega.clone(),
            config: cfg.merge.clone(),
        });
    }
    Ok(StepPlan {
        step,
        task_id,
        active_set,
        omega,
        jobs,
    })
}

/// Per-branch layer counts of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BranchCounts {
    pub skipped_low: usize,
    pub skipped_high: usize,
    pub blended: usize,
    pub dense_local: usize,
}

impl BranchCounts {
    fn record(&mut self, branch: MergeBranch) {
        match branch {
            MergeBranch::SkippedLow => self.skipped_low += 1,
            MergeBranch::SkippedHigh => self.skipped_high += 1,
            MergeBranch::Blended => self.blended += 1,
            MergeBranch::DenseLocal => self.dense_local += 1,
        }
    }
}

/// Per-step diagnostic record emitted by the runner.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalReport {
    pub step: usize,
    pub task_id: String,
    /// Layer conflict g per layer.
    pub per_layer_g: BTreeMap<String, f64>,
    /// Gate value α per layer.
    pub per_layer_alpha: BTreeMap<String, f64>,
    pub g_mean: f64,
    pub g_max: f64,
    /// Over all pairwise conflicts across layers; absent when m = 1.
    pub gamma_mean: Option<f64>,
    pub gamma_max: Option<f64>,
    pub alpha_min: f64,
    pub alpha_mean: f64,
    pub alpha_max: f64,
    pub branches: BranchCounts,
    pub update_norm: f64,
    /// Mean-layer conflict between the applied state update and the incoming
    /// task.
    pub state_gap: f64,
    /// Mean over all consumed tasks (incoming included) of their conflict
    /// against the applied state update.
    pub global_gap: f64,
    /// Symmetric SAR over active pairs and layers; absent when m = 1.
    pub sar_mean: Option<f64>,
    pub sar_max: Option<f64>,
    /// Filled by callers that hold per-task gradients; the runner itself
    /// has none.
    pub grad_cosine: Option<GradCosineSummary>,
}

/// The result of one continual step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: MergedState,
    pub report: SignalReport,
    /// Per-layer merged deltas Δ_merge,t (layer name order).
    pub proposals: BTreeMap<String, crate::merge::MergeProposal>,
}

/// Fold executed layer outcomes into the next state and its report.
pub fn complete_step(
    state: &MergedState,
    incoming: &TaskVector,
    plan: &StepPlan,
    outcomes: BTreeMap<String, LayerMergeOutcome>,
    cfg: &RunnerConfig,
) -> core::result::Result<StepOutcome, StepError> {
    let step = plan.step;
    let task_id = &plan.task_id;
    for layer in state.merge_current.keys() {
        if !outcomes.contains_key(layer) {
            return wrap(
                Err(CoreError::MissingTensor(alloc::format!(
                    "{layer} (no merge outcome gathered)"
                ))),
                step,
                task_id,
                Some(layer),
            );
        }
    }
    let eta = wrap(cfg.eta.at(state.step), step, task_id, None)?;

    // Signals are measured against the pre-step state.
    let state_tv = TaskVector::new("state", state.state_delta.clone())
        .expect("state delta schema is nonempty");
    let state_gap = wrap(
        state_relative_conflict(&state_tv, incoming, &cfg.merge.geometry),
        step,
        task_id,
        None,
    )?
    .aggregate;
    let mut global_acc = 0.0;
    let mut global_n = 0.0;
    for task in state.history.iter().chain(core::iter::once(incoming)) {
        let c = wrap(
            state_relative_conflict(&state_tv, task, &cfg.merge.geometry),
            step,
            task_id,
            None,
        )?;
        global_acc += c.aggregate;
        global_n += 1.0;
    }
    let global_gap = global_acc / global_n;

    let mut sar_values = Vec::new();
    if plan.active_set.len() >= 2 {
        for layer_name in state.merge_current.keys() {
            let deltas: Vec<&Mat> = plan
                .active_set
                .iter()
                .map(|t| t.layer(layer_name).expect("validated schema"))
                .collect();
            let mut bases = Vec::with_capacity(deltas.len());
            for d in &deltas {
                let svd = wrap(
                    truncated_svd(d, cfg.merge.geometry.rank),
                    step,
                    task_id,
                    Some(layer_name),
                )?;
                bases.push(svd.right);
            }
            for i in 0..deltas.len() {
                for j in (i + 1)..deltas.len() {
                    let s = wrap(
                        sar_symmetric(
                            deltas[i],
                            &bases[i],
                            deltas[j],
                            &bases[j],
                            cfg.merge.geometry.epsilon,
                        ),
                        step,
                        task_id,
                        Some(layer_name),
                    )?;
                    sar_values.push(s);
                }
            }
        }
    }

    let mut merge_new = LayerMap::new();
    let mut model_new = LayerMap::new();
    let mut state_delta_new = LayerMap::new();
    let mut per_layer_g = BTreeMap::new();
    let mut per_layer_alpha = BTreeMap::new();
    let mut branches = BranchCounts::default();
    let mut gammas = Vec::new();
    let mut proposals = BTreeMap::new();

    for (layer_name, outcome) in &outcomes {
        per_layer_g.insert(layer_name.clone(), outcome.profile.g);
        per_layer_alpha.insert(layer_name.clone(), outcome.profile.alpha);
        branches.record(outcome.proposal.branch);
        gammas.extend(outcome.profile.gammas());

        let merged = outcome.proposal.delta_merge.clone();
        let previous = &state.merge_current[layer_name];
        let increment = merged.sub(previous);

        let mut params = state.model_params[layer_name].clone();
        params.add_scaled(eta, &increment);
        let mut applied = state.state_delta[layer_name].clone();
        applied.add_scaled(eta, &increment);

        merge_new.insert(layer_name.clone(), merged);
        model_new.insert(layer_name.clone(), params);
        state_delta_new.insert(layer_name.clone(), applied);
    }
    for (layer_name, outcome) in outcomes {
        proposals.insert(layer_name, outcome.proposal);
    }

    let n_layers = per_layer_g.len() as f64;
    let g_mean = per_layer_g.values().sum::<f64>() / n_layers;
    let g_max = per_layer_g.values().fold(0.0_f64, |m, &v| m.max(v));
    let alpha_min = per_layer_alpha
        .values()
        .fold(f64::INFINITY, |m, &v| m.min(v));
    let alpha_max = per_layer_alpha
        .values()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let alpha_mean = per_layer_alpha.values().sum::<f64>() / n_layers;
    let (gamma_mean, gamma_max) = if gammas.is_empty() {
        (None, None)
    } else {
        (
            Some(gammas.iter().sum::<f64>() / gammas.len() as f64),
            Some(gammas.iter().fold(0.0_f64, |m, &v| m.max(v))),
        )
    };
    let (sar_mean, sar_max) = if sar_values.is_empty() {
        (None, None)
    } else {
        (
            Some(sar_values.iter().sum::<f64>() / sar_values.len() as f64),
            Some(sar_values.iter().fold(0.0_f64, |m, &v| m.max(v))),
        )
    };

    let report = SignalReport {
        step,
        task_id: task_id.clone(),
        per_layer_g,
        per_layer_alpha,
        g_mean,
        g_max,
        gamma_mean,
        gamma_max,
        alpha_min,
        alpha_mean,
        alpha_max,
        branches,
        update_norm: update_norm(incoming),
        state_gap,
        global_gap,
        sar_mean,
        sar_max,
        grad_cosine: None,
    };

    let mut history = state.history.clone();
    history.push(incoming.clone());
    let new_state = MergedState {
        step,
        merge_previous: state.merge_current.clone(),
        merge_current: merge_new,
        model_params: model_new,
        state_delta: state_delta_new,
        history,
    };
    Ok(StepOutcome {
        state: new_state,
        report,
        proposals,
    })
}

/// Run one continual step sequentially (plan, execute every layer, complete).
pub fn merge_step(
    state: &MergedState,
    incoming: &TaskVector,
    cfg: &RunnerConfig,
) -> core::result::Result<StepOutcome, StepError> {
    let plan = plan_step(state, incoming, cfg)?;
    let mut outcomes = BTreeMap::new();
    for job in &plan.jobs {
        let outcome = wrap(job.execute(), plan.step, &plan.task_id, Some(&job.layer_name))?;
        outcomes.insert(job.layer_name.clone(), outcome);
    }
    complete_step(state, incoming, &plan, outcomes, cfg)
}

/// Drive a full task sequence from the base model.
///
/// Fails fast: the first failing step aborts with step index and cause, and
/// no partial state is returned.
pub fn run_sequence(
    theta_pre: &LayerMap,
    tasks: &[TaskVector],
    cfg: &RunnerConfig,
) -> core::result::Result<(MergedState, Vec<SignalReport>), StepError> {
    let init = |r: Result<MergedState>| wrap(r, 0, "-", None);
    wrap(cfg.validate(), 0, "-", None)?;
    let mut state = init(MergedState::initial(theta_pre, &cfg.layer_filter))?;
    let mut reports = Vec::with_capacity(tasks.len());
    for task in tasks {
        let outcome = merge_step(&state, task, cfg)?;
        state = outcome.state;
        reports.push(outcome.report);
    }
    Ok((state, reports))
}
