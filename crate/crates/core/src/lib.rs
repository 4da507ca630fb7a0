//! Evolutionary stochastic gradient descent (ESGD).
//!
//! A population of parameter vectors alternates between an SGD phase, in
//! which every individual trains with its own randomly drawn optimizer, and
//! an evolution phase driven by a (μ/ρ + λ) evolution strategy with
//! m-elitist survivor selection. With strict back-off the average fitness of
//! the m best individuals never increases from one generation to the next.
//!
//! Randomness is derived from the master seed per individual, generation and
//! purpose, so runs are reproducible for any worker count and resume from a
//! checkpoint bit for bit.

pub mod ablation;
pub mod config;
pub mod engine;
pub mod error;
pub mod evolution;
pub mod optimizers;
pub mod population;
pub mod problems;
pub mod report;
pub mod rng;
pub mod sampler;

pub use config::{ExperimentConfig, Mode};
pub use engine::{run_experiment, Engine, GenerationRecord};
pub use error::{EsgdError, Result};
pub use population::{Fitness, Individual, OptimizerFamily, OptimizerSpec, ParamVector, Population};
pub use problems::{DatasetChoice, Problem, SharedProblem};
