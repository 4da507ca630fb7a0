use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{EsgdError, Result};
use crate::population::{Fitness, ParamVector};

use super::{Dataset, DatasetChoice, GradientSample, Problem, Split, Targets};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

/// Upper bound on parameter count for the built-in network.
pub const MAX_MLP_PARAMS: usize = 20_000;

/// Fully-connected network trained with manual backpropagation.
///
/// Hidden layers use `activation`; the output layer is linear and feeds a
/// softmax cross-entropy loss for labelled data or `½‖ŷ − y‖²` for real
/// targets. Parameters are laid out layer by layer, each layer as its
/// row-major `out × in` weight matrix followed by `out` biases.
#[derive(Clone, Debug)]
pub struct MlpProblem {
    data: Dataset,
    layers: Vec<usize>,
    activation: Activation,
    batch_size: usize,
    dim: usize,
}

pub fn mlp_problem(data: Dataset, layers: &[usize], activation: Activation) -> Result<MlpProblem> {
    if layers.len() < 2 {
        return Err(EsgdError::Config("an MLP needs at least input and output layer sizes".into()));
    }
    if layers.iter().any(|&s| s == 0) {
        return Err(EsgdError::Config("layer sizes must be positive".into()));
    }
    if layers[0] != data.input_dim() {
        return Err(EsgdError::Config(format!(
            "input layer size {} does not match dataset input dimension {}",
            layers[0],
            data.input_dim()
        )));
    }
    let out = *layers.last().unwrap();
    if out != data.output_dim() {
        return Err(EsgdError::Config(format!(
            "output layer size {out} does not match dataset output dimension {}",
            data.output_dim()
        )));
    }
    if data.train.is_empty() {
        return Err(EsgdError::Config("training split is empty".into()));
    }
    let dim = layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if dim > MAX_MLP_PARAMS {
        return Err(EsgdError::Config(format!(
            "network has {dim} parameters, more than the {MAX_MLP_PARAMS} supported"
        )));
    }
    Ok(MlpProblem {
        data,
        layers: layers.to_vec(),
        activation,
        batch_size: 32,
        dim,
    })
}

impl MlpProblem {
    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    fn split(&self, set: DatasetChoice) -> Result<&Split> {
        let split = match set {
            DatasetChoice::Train => &self.data.train,
            DatasetChoice::Holdout => &self.data.holdout,
        };
        if split.is_empty() {
            return Err(EsgdError::Config(format!("{set:?} split is empty")));
        }
        Ok(split)
    }

    fn check_dim(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.dim {
            return Err(EsgdError::DimensionMismatch {
                expected: self.dim,
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Pre-activations and activations of every layer for one input.
    fn forward(&self, params: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n_layers = self.layers.len() - 1;
        let mut zs = Vec::with_capacity(n_layers);
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for (l, w) in self.layers.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &params[offset..offset + fan_in * fan_out];
            let bias = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let input = &acts[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(input).fold(bias[o], |acc, (w, a)| acc + w * a)
                })
                .collect();
            let a = if l + 1 < n_layers {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            zs.push(z);
            acts.push(a);
        }
        (zs, acts)
    }

    /// Loss of the output `out` against target row `i`, and dLoss/dout.
    fn loss(&self, out: &[f64], targets: &Targets, i: usize, want_delta: bool) -> (f64, Vec<f64>) {
        match targets {
            Targets::Labels { labels, .. } => {
                let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = out.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let y = labels[i];
                let loss = sum.ln() + max - out[y];
                let delta = if want_delta {
                    exps.iter()
                        .enumerate()
                        .map(|(k, e)| e / sum - if k == y { 1.0 } else { 0.0 })
                        .collect()
                } else {
                    Vec::new()
                };
                (loss, delta)
            }
            Targets::Values { values, dim } => {
                let y = &values[i * dim..(i + 1) * dim];
                let delta: Vec<f64> = out.iter().zip(y).map(|(o, t)| o - t).collect();
                let loss = 0.5 * delta.iter().map(|d| d * d).sum::<f64>();
                (loss, delta)
            }
        }
    }

    /// Fraction of correctly classified rows; `None` for regression data.
    pub fn accuracy(&self, params: &[f64], set: DatasetChoice) -> Result<Option<f64>> {
        self.check_dim(params)?;
        let split = self.split(set)?;
        let Targets::Labels { labels, .. } = &split.targets else {
            return Ok(None);
        };
        let correct = (0..split.len())
            .filter(|&i| {
                let (_, acts) = self.forward(params, split.row(i));
                let out = acts.last().unwrap();
                let pred = out
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(k, _)| k)
                    .unwrap();
                pred == labels[i]
            })
            .count();
        Ok(Some(correct as f64 / split.len() as f64))
    }
}

impl Problem for MlpProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn train_size(&self) -> usize {
        self.data.train.len()
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> ParamVector {
        let mut params = Vec::with_capacity(self.dim);
        for w in self.layers.windows(2) {
            let limit = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        params.into()
    }

    fn minibatch_gradient(&self, params: &[f64], batch: &[usize]) -> Result<GradientSample> {
        self.check_dim(params)?;
        if batch.is_empty() {
            return Err(EsgdError::InvalidArgument("empty minibatch".into()));
        }
        let split = &self.data.train;
        let mut grad = vec![0.0; self.dim];
        let mut total = 0.0;
        let n_layers = self.layers.len() - 1;
        let offsets: Vec<usize> = self
            .layers
            .windows(2)
            .scan(0, |acc, w| {
                let start = *acc;
                *acc += w[0] * w[1] + w[1];
                Some(start)
            })
            .collect();

        for &i in batch {
            if i >= split.len() {
                return Err(EsgdError::InvalidArgument(format!("sample index {i} out of range")));
            }
            let (zs, acts) = self.forward(params, split.row(i));
            let (loss, mut delta) = self.loss(acts.last().unwrap(), &split.targets, i, true);
            total += loss;
            for l in (0..n_layers).rev() {
                let (fan_in, fan_out) = (self.layers[l], self.layers[l + 1]);
                let off = offsets[l];
                let input = &acts[l];
                for o in 0..fan_out {
                    let d = delta[o];
                    let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grad[off + fan_in * fan_out + o] += d;
                }
                if l > 0 {
                    let weights = &params[off..off + fan_in * fan_out];
                    delta = (0..fan_in)
                        .map(|j| {
                            let back: f64 = (0..fan_out).map(|o| weights[o * fan_in + j] * delta[o]).sum();
                            back * self.activation.derivative(zs[l - 1][j], acts[l][j])
                        })
                        .collect();
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        Ok(GradientSample {
            grad,
            batch_loss: total * scale,
        })
    }

    fn fitness(&self, params: &[f64], set: DatasetChoice) -> Result<Fitness> {
        self.check_dim(params)?;
        let split = self.split(set)?;
        let mut total = 0.0;
        for i in 0..split.len() {
            let (_, acts) = self.forward(params, split.row(i));
            total += self.loss(acts.last().unwrap(), &split.targets, i, false).0;
        }
        Ok(Fitness(total / split.len() as f64))
    }

    fn has_holdout(&self) -> bool {
        !self.data.holdout.is_empty()
    }

    fn name(&self) -> String {
        let sizes: Vec<String> = self.layers.iter().map(usize::to_string).collect();
        format!("mlp({}, {})", sizes.join("-"), self.activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{finite_difference_gradient, full_gradient, relative_error, synthetic_classification};
    use crate::rng;

    #[test]
    fn logistic_regression_separates_two_points() {
        let data = Dataset {
            train: Split {
                inputs: vec![-1.0, 1.0],
                input_dim: 1,
                targets: Targets::Labels { labels: vec![0, 1], classes: 2 },
            },
            holdout: Split {
                inputs: vec![],
                input_dim: 1,
                targets: Targets::Labels { labels: vec![], classes: 2 },
            },
        };
        let p = mlp_problem(data, &[1, 2], Activation::Tanh).unwrap();
        let mut theta = vec![0.0; p.dim()];
        let start = p.fitness(&theta, DatasetChoice::Train).unwrap().0;
        assert!((start - 2f64.ln()).abs() < 1e-12);
        for _ in 0..5000 {
            let g = full_gradient(&p, &theta).unwrap().grad;
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= 1.0 * gi;
            }
        }
        assert!(p.fitness(&theta, DatasetChoice::Train).unwrap().0 < 1e-3);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let data = synthetic_classification(40, 0.1, 3).unwrap();
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Relu] {
            let p = mlp_problem(data.clone(), &[2, 5, 4, 2], act).unwrap();
            let mut r = rng::stream(11, &[act as u64]);
            for _ in 0..10 {
                // offset every parameter so no pre-activation sits on the relu kink
                let mut theta = p.init_params(&mut r);
                for t in theta.iter_mut() {
                    *t += r.random_range(-0.5..0.5);
                }
                let analytic = full_gradient(&p, &theta).unwrap().grad;
                let numeric = finite_difference_gradient(&p, &theta, 1e-6).unwrap();
                let err = relative_error(&analytic, &numeric);
                assert!(err <= 1e-5, "{act}: relative error {err}");
            }
        }
    }

    #[test]
    fn swapping_hidden_units_preserves_fitness() {
        let data = synthetic_classification(30, 0.1, 4).unwrap();
        let p = mlp_problem(data, &[2, 3, 2], Activation::Tanh).unwrap();
        let mut theta = p.init_params(&mut rng::stream(1, &[]));
        for (i, t) in theta.iter_mut().enumerate() {
            *t += 0.01 * i as f64;
        }
        let before = p.fitness(&theta, DatasetChoice::Train).unwrap();
        // hidden units 0 and 2: rows of W1, entries of b1, columns of W2
        let mut swapped = theta.clone();
        for j in 0..2 {
            swapped.swap(j, 2 * 2 + j);
        }
        swapped.swap(6, 8);
        let w2 = 9;
        for o in 0..2 {
            swapped.swap(w2 + o * 3, w2 + o * 3 + 2);
        }
        assert_ne!(*theta, *swapped);
        let after = p.fitness(&swapped, DatasetChoice::Train).unwrap();
        assert!((before.0 - after.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_inconsistent_layers() {
        let data = synthetic_classification(20, 0.1, 1).unwrap();
        assert!(mlp_problem(data.clone(), &[3, 4, 2], Activation::Tanh).is_err());
        assert!(mlp_problem(data.clone(), &[2, 4, 3], Activation::Tanh).is_err());
        assert!(mlp_problem(data, &[2], Activation::Tanh).is_err());
    }

    #[test]
    fn regression_loss_and_gradient() {
        let data = Dataset::shuffle_split(
            Split {
                inputs: vec![0.0, 1.0, 2.0, 3.0],
                input_dim: 1,
                targets: Targets::Values { values: vec![1.0, 3.0, 5.0, 7.0], dim: 1 },
            },
            1.0,
            0,
        )
        .unwrap();
        let p = mlp_problem(data, &[1, 1], Activation::Tanh).unwrap();
        // y = 2x + 1 exactly
        assert_eq!(p.fitness(&[2.0, 1.0], DatasetChoice::Train).unwrap().0, 0.0);
        let theta = [0.5, -0.3];
        let a = full_gradient(&p, &theta).unwrap().grad;
        let n = finite_difference_gradient(&p, &theta, 1e-6).unwrap();
        assert!(relative_error(&a, &n) < 1e-7);
    }
}
