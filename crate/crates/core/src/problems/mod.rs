//! The fitness/gradient interface and the built-in desk-scale problems.

mod data;
mod mlp;
mod quadratic;

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::population::{Fitness, ParamVector};

pub use data::{csv_dataset, read_csv_matrix, synthetic_classification, write_csv_matrix, Dataset, Split, Targets};
pub use mlp::{mlp_problem, Activation, MlpProblem};
pub use quadratic::{quadratic_problem, QuadraticProblem};

/// Which set the fitness is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetChoice {
    #[default]
    Train,
    Holdout,
}

/// Stochastic gradient of the average loss over a minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSample {
    pub grad: Vec<f64>,
    pub batch_loss: f64,
}

/// An empirical-risk minimization problem.
///
/// Implementations are immutable after construction; every method is a pure
/// function of its arguments and may be called from several threads.
pub trait Problem: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of training samples `n`.
    fn train_size(&self) -> usize;

    /// Default minibatch size.
    fn batch_size(&self) -> usize {
        32
    }

    /// Fresh random parameters.
    fn init_params(&self, rng: &mut dyn RngCore) -> ParamVector;

    /// Gradient of the average loss over the training samples in `batch`.
    fn minibatch_gradient(&self, params: &[f64], batch: &[usize]) -> Result<GradientSample>;

    /// Average loss over the chosen set.
    fn fitness(&self, params: &[f64], set: DatasetChoice) -> Result<Fitness>;

    /// Whether the holdout set differs from the training set.
    fn has_holdout(&self) -> bool {
        false
    }

    /// Short human-readable identifier.
    fn name(&self) -> String;
}

pub type SharedProblem = Arc<dyn Problem>;

/// Gradient over the whole training set.
pub fn full_gradient(problem: &dyn Problem, params: &[f64]) -> Result<GradientSample> {
    let all: Vec<usize> = (0..problem.train_size()).collect();
    problem.minibatch_gradient(params, &all)
}

/// Central finite-difference gradient of the training fitness.
pub fn finite_difference_gradient(problem: &dyn Problem, params: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = problem.fitness(&probe, DatasetChoice::Train)?.0;
        probe[i] = orig - step;
        let down = problem.fitness(&probe, DatasetChoice::Train)?.0;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
