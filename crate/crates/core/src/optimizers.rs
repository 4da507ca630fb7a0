//! Gradient update rules and the per-individual SGD step with back-off.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{EsgdError, Result};
use crate::population::{Fitness, Individual, OptimizerFamily, OptimizerSpec, OptimizerState, ParamVector};
use crate::problems::{DatasetChoice, GradientSample, Problem};
use crate::rng::{self, tags};

pub const ADAM_EPSILON: f64 = 1e-8;

fn check_gradient(params: &[f64], grad: &GradientSample) -> Result<()> {
    if grad.grad.len() != params.len() {
        return Err(EsgdError::DimensionMismatch {
            expected: params.len(),
            got: grad.grad.len(),
        });
    }
    if grad.grad.iter().any(|g| !g.is_finite()) {
        return Err(EsgdError::DivergentGradient);
    }
    Ok(())
}

fn ensure_len(buf: &mut Vec<f64>, dim: usize) {
    if buf.len() != dim {
        *buf = vec![0.0; dim];
    }
}

/// One plain, momentum or Nesterov SGD update.
///
/// - plain: `θ' = θ − α·g`
/// - momentum: `v' = μ·v − α·g`, `θ' = θ + v'`
/// - nesterov: `v' = μ·v − α·g`, `θ' = θ + (μ·v' − α·g)`
pub fn sgd_step(
    mut params: ParamVector,
    mut state: OptimizerState,
    spec: &OptimizerSpec,
    grad: &GradientSample,
) -> Result<(ParamVector, OptimizerState)> {
    check_gradient(&params, grad)?;
    let lr = spec.learning_rate;
    let mu = spec.momentum;
    match spec.family {
        OptimizerFamily::PlainSgd => {
            for (t, g) in params.iter_mut().zip(&grad.grad) {
                *t -= lr * g;
            }
        }
        OptimizerFamily::MomentumSgd => {
            ensure_len(&mut state.velocity, params.dim());
            for ((t, v), g) in params.iter_mut().zip(state.velocity.iter_mut()).zip(&grad.grad) {
                *v = mu * *v - lr * g;
                *t += *v;
            }
        }
        OptimizerFamily::NesterovSgd => {
            ensure_len(&mut state.velocity, params.dim());
            for ((t, v), g) in params.iter_mut().zip(state.velocity.iter_mut()).zip(&grad.grad) {
                *v = mu * *v - lr * g;
                *t += mu * *v - lr * g;
            }
        }
        OptimizerFamily::Adam => {
            return Err(EsgdError::InvalidArgument("sgd_step called with an adam spec".into()));
        }
    }
    Ok((params, state))
}

/// One bias-corrected Adam update with `ε = 1e-8`.
pub fn adam_step(
    mut params: ParamVector,
    mut state: OptimizerState,
    spec: &OptimizerSpec,
    grad: &GradientSample,
) -> Result<(ParamVector, OptimizerState)> {
    if spec.family != OptimizerFamily::Adam {
        return Err(EsgdError::InvalidArgument(format!(
            "adam_step called with a {} spec",
            spec.family
        )));
    }
    check_gradient(&params, grad)?;
    let dim = params.dim();
    ensure_len(&mut state.first_moment, dim);
    ensure_len(&mut state.second_moment, dim);
    state.step += 1;
    let (b1, b2) = (spec.beta1, spec.beta2);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..dim {
        let g = grad.grad[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= spec.learning_rate * (m / c1) / ((v / c2).sqrt() + ADAM_EPSILON);
    }
    Ok((params, state))
}

/// Dispatches on the spec's family.
pub fn apply_update(
    params: ParamVector,
    state: OptimizerState,
    spec: &OptimizerSpec,
    grad: &GradientSample,
) -> Result<(ParamVector, OptimizerState)> {
    match spec.family {
        OptimizerFamily::Adam => adam_step(params, state, spec, grad),
        _ => sgd_step(params, state, spec, grad),
    }
}

/// One pass over the training set in a seeded random order.
///
/// Fails with [`EsgdError::DivergentGradient`] when a gradient or the
/// updated parameters become non-finite.
pub fn train_epoch(
    params: ParamVector,
    state: OptimizerState,
    spec: &OptimizerSpec,
    problem: &dyn Problem,
    shuffle_seed: u64,
) -> Result<(ParamVector, OptimizerState)> {
    let mut order: Vec<usize> = (0..problem.train_size()).collect();
    order.shuffle(&mut rng::stream(shuffle_seed, &[tags::SHUFFLE]));
    let batch = problem.batch_size().max(1);
    let (mut params, mut state) = (params, state);
    for chunk in order.chunks(batch) {
        let grad = problem.minibatch_gradient(&params, chunk)?;
        (params, state) = apply_update(params, state, spec, &grad)?;
    }
    if !params.is_finite() {
        return Err(EsgdError::DivergentGradient);
    }
    Ok((params, state))
}

/// Outcome of [`run_sgd_epochs`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SgdReport {
    /// Epochs rolled back to their pre-epoch snapshot.
    pub backed_off: usize,
    /// Degraded epochs kept because the back-off coin said so.
    pub accepted_degraded: usize,
    /// Epochs whose update diverged (always rolled back).
    pub diverged: usize,
    pub evaluations: usize,
}

/// Trains `ind` for `epochs` epochs with its assigned spec.
///
/// After each epoch the fitness on `set` is compared with the pre-epoch
/// value. A strictly worse epoch is rolled back (parameters, optimizer state
/// and fitness) with probability `p_backoff`; an epoch whose update diverged
/// is always rolled back. Shuffle order and back-off draws come from streams
/// keyed by the individual's `rng_seed` and the epoch index.
pub fn run_sgd_epochs(
    mut ind: Individual,
    problem: &dyn Problem,
    epochs: usize,
    p_backoff: f64,
    set: DatasetChoice,
) -> Result<(Individual, SgdReport)> {
    if !(0.0..=1.0).contains(&p_backoff) {
        return Err(EsgdError::InvalidArgument(format!(
            "p_backoff must lie in [0, 1], got {p_backoff}"
        )));
    }
    let mut fitness = ind.fitness()?;
    let mut report = SgdReport::default();
    for epoch in 0..epochs as u64 {
        let before_params = ind.params().clone();
        let before_state = ind.opt_state.clone();
        let shuffle_seed = rng::mix_seed(ind.rng_seed, &[tags::SHUFFLE, epoch]);
        let trained = train_epoch(
            before_params.clone(),
            before_state.clone(),
            &ind.spec,
            problem,
            shuffle_seed,
        );
        let (params, state) = match trained {
            Ok(v) => v,
            Err(EsgdError::DivergentGradient) => {
                report.diverged += 1;
                report.backed_off += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let new_fitness = problem.fitness(&params, set)?;
        report.evaluations += 1;
        if !new_fitness.is_finite() {
            report.diverged += 1;
            report.backed_off += 1;
            continue;
        }
        if new_fitness > fitness {
            let coin: f64 = rng::stream(ind.rng_seed, &[tags::BACKOFF, epoch]).random();
            if coin < p_backoff {
                report.backed_off += 1;
                continue;
            }
            report.accepted_degraded += 1;
        }
        ind.set_params(params);
        ind.opt_state = state;
        ind.set_fitness(new_fitness);
        fitness = new_fitness;
    }
    // rolled-back epochs leave params untouched, so the cache still holds
    debug_assert_eq!(ind.cached_fitness(), Some(fitness));
    Ok((ind, report))
}

/// Evaluates and caches the fitness of `ind` on `set`.
pub fn evaluate(ind: &mut Individual, problem: &dyn Problem, set: DatasetChoice) -> Result<Fitness> {
    let f = problem.fitness(ind.params(), set)?;
    ind.set_fitness(f);
    Ok(f)
}
