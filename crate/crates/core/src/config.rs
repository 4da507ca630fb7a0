//! Experiment configuration and its TOML file format.
//!
//! A config file is TOML with a required top-level `schema_version`. Unknown
//! keys anywhere are rejected. See the README for the full schema.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EsgdError, Result};
use crate::evolution::Weighting;
use crate::population::{OptimizerFamily, OptimizerSpec};
use crate::problems::{
    csv_dataset, mlp_problem, quadratic_problem, synthetic_classification, Activation, DatasetChoice, SharedProblem,
};
use crate::sampler::{self, LrScale, Range, SamplerConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ELITIST_FRACTION: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SingleBaseline,
    PopulationBaseline,
    Esgd,
    EsgdNoEvolution,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::SingleBaseline,
        Mode::PopulationBaseline,
        Mode::EsgdNoEvolution,
        Mode::Esgd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SingleBaseline => "single-baseline",
            Mode::PopulationBaseline => "population-baseline",
            Mode::Esgd => "esgd",
            Mode::EsgdNoEvolution => "esgd-no-evolution",
        }
    }

    pub fn is_population(self) -> bool {
        self != Mode::SingleBaseline
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub mu: usize,
    pub lambda: usize,
    pub rho: usize,
    /// Elitist count; defaults to `round(elitist_fraction · mu)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default = "default_elitist_fraction")]
    pub elitist_fraction: f64,
}

fn default_elitist_fraction() -> f64 {
    DEFAULT_ELITIST_FRACTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Number of generations `K`.
    pub generations: u64,
    /// SGD epochs per generation `K_s`.
    pub sgd_epochs: usize,
    /// Evolution steps per generation `K_v`.
    #[serde(default = "one")]
    pub evolution_steps: usize,
    /// Probability of rolling back a degraded epoch; 1.0 is strict back-off.
    #[serde(default = "one_f")]
    pub p_backoff: f64,
    /// Optional plain-SGD fine-tuning after the last generation.
    #[serde(default)]
    pub fine_tune_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_tune_lr: Option<f64>,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    #[serde(default)]
    pub weighting: Weighting,
    /// Adds a frozen copy of the reference model to every selection pool.
    #[serde(default)]
    pub inject_reference: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Independent fan-in scaled random initializations.
    #[default]
    Random,
    /// Gaussian perturbations of one base model.
    Perturb,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub scheme: InitScheme,
    /// Base model file (flat parameter format). Without one, `perturb`
    /// perturbs a single random initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub perturb_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleBaselineConfig {
    #[serde(default = "plain_sgd")]
    pub family: OptimizerFamily,
    /// Defaults to the midpoint of `sampler.lr_sgd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub momentum: f64,
}

fn plain_sgd() -> OptimizerFamily {
    OptimizerFamily::PlainSgd
}

impl Default for SingleBaselineConfig {
    fn default() -> Self {
        SingleBaselineConfig {
            family: OptimizerFamily::PlainSgd,
            learning_rate: None,
            momentum: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        n: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        target_columns: Vec<usize>,
        #[serde(default = "default_split")]
        split: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        task: Task,
    },
}

fn default_split() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        dim: usize,
        condition: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_size: Option<usize>,
    },
    Mlp {
        layers: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_size: Option<usize>,
        data: DataSpec,
    },
}

impl ProblemSpec {
    /// Constructs the problem, loading data files where needed.
    pub fn build(&self) -> Result<SharedProblem> {
        match self {
            ProblemSpec::Quadratic {
                dim,
                condition,
                batch_size,
            } => {
                let mut q = quadratic_problem(*dim, *condition)?;
                if let Some(b) = batch_size {
                    q = q.with_batch_size(*b);
                }
                Ok(std::sync::Arc::new(q))
            }
            ProblemSpec::Mlp {
                layers,
                activation,
                batch_size,
                data,
            } => {
                let dataset = match data {
                    DataSpec::Synthetic { n, noise, seed } => synthetic_classification(*n, *noise, *seed)?,
                    DataSpec::Csv {
                        path,
                        target_columns,
                        split,
                        seed,
                        task,
                    } => {
                        let d = csv_dataset(path, target_columns, *split, *seed)?;
                        match task {
                            Task::Classification => d.into_classification()?,
                            Task::Regression => d,
                        }
                    }
                };
                let mut p = mlp_problem(dataset, layers, *activation)?;
                if let Some(b) = batch_size {
                    p = p.with_batch_size(*b);
                }
                Ok(std::sync::Arc::new(p))
            }
        }
    }
}

/// File form of the sampler section: an optional preset plus overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplerSection {
    preset: Option<String>,
    mix_sgd: Option<f64>,
    mix_adam: Option<f64>,
    lr_sgd: Option<Range>,
    lr_adam: Option<Range>,
    gamma: Option<f64>,
    lr_scale: Option<LrScale>,
    p_use_momentum: Option<f64>,
    p_nesterov_given_momentum: Option<f64>,
    momentum_range: Option<Range>,
    sigma_0: Option<f64>,
}

impl TryFrom<SamplerSection> for SamplerConfig {
    type Error = EsgdError;

    fn try_from(s: SamplerSection) -> Result<Self> {
        let base = sampler::preset(s.preset.as_deref().unwrap_or("bn50"))?;
        Ok(SamplerConfig {
            mix_sgd: s.mix_sgd.unwrap_or(base.mix_sgd),
            mix_adam: s.mix_adam.unwrap_or(base.mix_adam),
            lr_sgd: s.lr_sgd.unwrap_or(base.lr_sgd),
            lr_adam: s.lr_adam.unwrap_or(base.lr_adam),
            gamma: s.gamma.unwrap_or(base.gamma),
            lr_scale: s.lr_scale.unwrap_or(base.lr_scale),
            p_use_momentum: s.p_use_momentum.unwrap_or(base.p_use_momentum),
            p_nesterov_given_momentum: s.p_nesterov_given_momentum.unwrap_or(base.p_nesterov_given_momentum),
            momentum_range: s.momentum_range.unwrap_or(base.momentum_range),
            sigma_0: s.sigma_0.unwrap_or(base.sigma_0),
        })
    }
}

fn deserialize_sampler<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<SamplerConfig, D::Error> {
    let section = SamplerSection::deserialize(d)?;
    SamplerConfig::try_from(section).map_err(serde::de::Error::custom)
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub master_seed: u64,
    #[serde(default)]
    pub fitness_dataset: DatasetChoice,
    pub population: PopulationConfig,
    pub schedule: ScheduleConfig,
    #[serde(default, deserialize_with = "deserialize_sampler")]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub single_baseline: SingleBaselineConfig,
    pub problem: ProblemSpec,
}

impl ExperimentConfig {
    /// Elitist count `m`.
    pub fn m(&self) -> usize {
        match self.population.m {
            Some(m) => m,
            None => ((self.population.elitist_fraction * self.population.mu as f64).round() as usize)
                .clamp(1, self.population.mu.max(1)),
        }
    }

    /// Effective (μ, λ, m) for the configured mode.
    pub fn sizes(&self) -> (usize, usize, usize) {
        match self.mode {
            Mode::SingleBaseline => (1, 0, 1),
            Mode::Esgd => (self.population.mu, self.population.lambda, self.m()),
            _ => (self.population.mu, 0, self.m()),
        }
    }

    pub fn single_baseline_spec(&self) -> OptimizerSpec {
        let sb = &self.single_baseline;
        let lr = sb
            .learning_rate
            .unwrap_or(0.5 * (self.sampler.lr_sgd.lo + self.sampler.lr_sgd.hi));
        match sb.family {
            OptimizerFamily::PlainSgd => OptimizerSpec::plain(lr),
            OptimizerFamily::MomentumSgd => OptimizerSpec::momentum(lr, sb.momentum),
            OptimizerFamily::NesterovSgd => OptimizerSpec::nesterov(lr, sb.momentum),
            OptimizerFamily::Adam => OptimizerSpec::adam(lr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EsgdError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.master_seed > i64::MAX as u64 {
            return err(format!(
                "master_seed must be at most {} (TOML integer range), got {}",
                i64::MAX,
                self.master_seed
            ));
        }
        let p = &self.population;
        if p.mu == 0 {
            return err("population.mu must be >= 1".into());
        }
        if p.rho == 0 || p.rho > p.mu {
            return err(format!("population.rho must lie in 1..=mu ({}), got {}", p.mu, p.rho));
        }
        if !(p.elitist_fraction > 0.0 && p.elitist_fraction <= 1.0) {
            return err(format!(
                "population.elitist_fraction must lie in (0, 1], got {}",
                p.elitist_fraction
            ));
        }
        if let Some(m) = p.m {
            if m == 0 || m > p.mu {
                return err(format!("population.m must lie in 1..=mu ({}), got {m}", p.mu));
            }
        }
        let s = &self.schedule;
        if s.sgd_epochs == 0 && self.mode != Mode::Esgd {
            return err("schedule.sgd_epochs must be >= 1 outside esgd mode".into());
        }
        if !(0.0..=1.0).contains(&s.p_backoff) {
            return err(format!("schedule.p_backoff must lie in [0, 1], got {}", s.p_backoff));
        }
        if s.fine_tune_epochs > 0 {
            match s.fine_tune_lr {
                Some(lr) if lr > 0.0 && lr.is_finite() => {}
                _ => return err("schedule.fine_tune_lr must be set and positive when fine_tune_epochs > 0".into()),
            }
        }
        self.sampler.validate()?;
        if self.evolution.inject_reference && self.mode != Mode::Esgd {
            return err("evolution.inject_reference requires mode = \"esgd\"".into());
        }
        if !(self.init.perturb_std >= 0.0 && self.init.perturb_std.is_finite()) {
            return err(format!("init.perturb_std must be non-negative, got {}", self.init.perturb_std));
        }
        let sb = self.single_baseline_spec();
        if !(sb.learning_rate > 0.0) {
            return err("single_baseline.learning_rate must be positive".into());
        }
        sb.validate().map_err(|e| EsgdError::Config(format!("single_baseline: {e}")))?;
        Ok(())
    }

    /// Parses config text, applying `key.path=value` overrides first.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| EsgdError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| EsgdError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative data and model paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EsgdError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(model) = self.init.model.as_mut() {
            fix(model);
        }
        if let ProblemSpec::Mlp {
            data: DataSpec::Csv { path, .. },
            ..
        } = &mut self.problem
        {
            fix(path);
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| EsgdError::Config(format!("cannot serialize config: {e}")))
    }
}

/// Sets `dotted.key=value` in a TOML table. The value is parsed as a TOML
/// literal when possible and taken as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| EsgdError::Config(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(EsgdError::Config(format!("override {spec:?} has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| EsgdError::Config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
