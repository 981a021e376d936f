//! Error types shared across the engine.

use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Non-finite entries or otherwise malformed numeric input.
    InvalidInput(String),
    /// A matrix required to be symmetric deviates beyond tolerance.
    NotSymmetric { max_asym: f64, tol: f64 },
    /// Dimension mismatch between operands.
    Shape(String),
    /// A configuration value is out of its admissible range; carries the key.
    InvalidConfig(String),
    /// A named tensor/layer expected by an operation is absent.
    MissingTensor(String),
    /// An iterative solver failed to reach its tolerance.
    Convergence { residual: f64, iterations: usize },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            CoreError::NotSymmetric { max_asym, tol } => write!(
                f,
                "matrix is not symmetric: max |a_ij - a_ji| = {max_asym:e} exceeds tol {tol:e}"
            ),
            CoreError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            CoreError::InvalidConfig(key) => write!(f, "invalid config value for `{key}`"),
            CoreError::MissingTensor(name) => write!(f, "missing tensor `{name}`"),
            CoreError::Convergence {
                residual,
                iterations,
            } => write!(
                f,
                "no convergence after {iterations} iterations (last residual {residual:e})"
            ),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

/// A [`CoreError`] annotated with the continual step and layer it occurred in.
///
/// Returned by the runner so a failing sequence aborts with full context.
#[derive(Debug, Clone, PartialEq)]
pub struct StepError {
    pub step: usize,
    pub task_id: String,
    pub layer: Option<String>,
    pub source: Box<CoreError>,
}

impl StepError {
    pub fn new(step: usize, task_id: String, layer: Option<String>, source: CoreError) -> Self {
        StepError {
            step,
            task_id,
            layer,
            source: Box::new(source),
        }
    }
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.layer {
            Some(layer) => write!(
                f,
                "step {} (task `{}`, layer `{}`): {}",
                self.step, self.task_id, layer, self.source
            ),
            None => write!(f, "step {} (task `{}`): {}", self.step, self.task_id, self.source),
        }
    }
}

impl core::error::Error for StepError {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        Some(self.source.as_ref())
    }
}
