use rand::{Rng, RngCore};

use crate::error::{EsgdError, Result};
use crate::population::{Fitness, ParamVector};

use super::{DatasetChoice, GradientSample, Problem};

/// `f(θ) = ½ θᵀ D θ` with diagonal `D` log-spaced on `[1, condition]`.
///
/// Sample `i` is coordinate `i`, with loss `l_i(θ) = (d/2)·D_ii·θ_i²`, so the
/// average over all `d` samples is exactly `f` and minibatch gradients are
/// unbiased. There is no separate holdout set.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    diag: Vec<f64>,
    batch_size: usize,
}

pub fn quadratic_problem(dim: usize, condition: f64) -> Result<QuadraticProblem> {
    if dim == 0 {
        return Err(EsgdError::Config("quadratic dimension must be >= 1".into()));
    }
    if !(condition >= 1.0 && condition.is_finite()) {
        return Err(EsgdError::Config(format!(
            "quadratic condition number must be >= 1, got {condition}"
        )));
    }
    let diag = (0..dim)
        .map(|i| {
            if dim == 1 {
                1.0
            } else {
                condition.powf(i as f64 / (dim - 1) as f64)
            }
        })
        .collect();
    Ok(QuadraticProblem {
        diag,
        batch_size: dim.min(32),
    })
}

impl QuadraticProblem {
    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }
}

impl Problem for QuadraticProblem {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn train_size(&self) -> usize {
        self.diag.len()
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> ParamVector {
        (0..self.dim()).map(|_| rng.random_range(-1.0..=1.0)).collect::<Vec<_>>().into()
    }

    fn minibatch_gradient(&self, params: &[f64], batch: &[usize]) -> Result<GradientSample> {
        let d = self.dim();
        if params.len() != d {
            return Err(EsgdError::DimensionMismatch { expected: d, got: params.len() });
        }
        if batch.is_empty() {
            return Err(EsgdError::InvalidArgument("empty minibatch".into()));
        }
        let scale = d as f64 / batch.len() as f64;
        let mut grad = vec![0.0; d];
        let mut loss = 0.0;
        for &i in batch {
            let di = self.diag[i];
            grad[i] += scale * di * params[i];
            loss += 0.5 * d as f64 * di * params[i] * params[i];
        }
        Ok(GradientSample {
            grad,
            batch_loss: loss / batch.len() as f64,
        })
    }

    fn fitness(&self, params: &[f64], _set: DatasetChoice) -> Result<Fitness> {
        if params.len() != self.dim() {
            return Err(EsgdError::DimensionMismatch {
                expected: self.dim(),
                got: params.len(),
            });
        }
        let sum: f64 = params
            .iter()
            .zip(&self.diag)
            .map(|(t, d)| 0.5 * d * t * t)
            .sum();
        Ok(Fitness(sum))
    }

    fn name(&self) -> String {
        format!("quadratic(dim={}, condition={})", self.dim(), self.diag.last().copied().unwrap_or(1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::full_gradient;

    #[test]
    fn optimum_at_origin() {
        let q = quadratic_problem(5, 10.0).unwrap();
        assert_eq!(q.fitness(&[0.0; 5], DatasetChoice::Train).unwrap().0, 0.0);
        assert!(full_gradient(&q, &[0.0; 5]).unwrap().grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_at_unit_vector() {
        let q = quadratic_problem(4, 100.0).unwrap();
        let mut e1 = vec![0.0; 4];
        e1[0] = 1.0;
        let g = full_gradient(&q, &e1).unwrap().grad;
        assert_eq!(g, vec![q.diagonal()[0], 0.0, 0.0, 0.0]);
        assert_eq!(q.diagonal()[0], 1.0);
        assert!((q.diagonal()[3] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn full_batch_loss_is_fitness() {
        let q = quadratic_problem(6, 30.0).unwrap();
        let theta = [0.3, -0.2, 0.5, 1.0, -0.7, 0.1];
        let gs = full_gradient(&q, &theta).unwrap();
        let f = q.fitness(&theta, DatasetChoice::Train).unwrap().0;
        assert!((gs.batch_loss - f).abs() < 1e-12);
    }

    #[test]
    fn gradient_descent_below_stability_bound_is_monotone() {
        let cond = 100.0;
        let q = quadratic_problem(10, cond).unwrap();
        let alpha = 1.9 / cond;
        let mut theta: Vec<f64> = (0..10).map(|i| 1.0 - 0.15 * i as f64).collect();
        let mut prev = q.fitness(&theta, DatasetChoice::Train).unwrap().0;
        for _ in 0..500 {
            let g = full_gradient(&q, &theta).unwrap().grad;
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= alpha * gi;
            }
            let f = q.fitness(&theta, DatasetChoice::Train).unwrap().0;
            assert!(f <= prev, "{f} > {prev}");
            prev = f;
        }
        assert!(prev < 1e-6);

        // just above the bound the stiffest mode blows up
        let alpha = 2.1 / cond;
        let mut theta = vec![1.0; 10];
        for _ in 0..500 {
            let g = full_gradient(&q, &theta).unwrap().grad;
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= alpha * gi;
            }
        }
        assert!(q.fitness(&theta, DatasetChoice::Train).unwrap().0 > 1.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(quadratic_problem(0, 1.0).is_err());
        assert!(quadratic_problem(3, 0.5).is_err());
    }
}
