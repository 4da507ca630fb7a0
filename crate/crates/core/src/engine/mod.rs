//! End-to-end orchestration: initialization, generations of SGD followed by
//! evolution, the baseline and ablation modes, and checkpointing.

mod checkpoint;
mod model;
mod output;
mod record;

use std::sync::Arc;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::config::{ExperimentConfig, InitScheme, Mode};
use crate::error::{EsgdError, Result};
use crate::evolution::{evolution_step, EvolutionParams, StepContext};
use crate::optimizers::{evaluate, run_sgd_epochs, train_epoch, SgdReport};
use crate::population::{elitist_average, rank_population, Individual, OptimizerSpec, Origin, ParamVector, Population};
use crate::problems::{DatasetChoice, Problem, SharedProblem};
use crate::rng::{self, tags};
use crate::sampler::{mutation_strength, sample_optimizer};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{read_model_file, write_model_file};
pub use output::{run_to_dir, RunFiles};
pub use record::{read_jsonl, write_jsonl, GenerationRecord, Phase};

/// Builds the initial population: μ seeded initializations (or
/// perturbations of one base model), evaluated and ranked. Also returns the
/// frozen reference individual when reference injection is enabled.
pub fn initialize_population(
    cfg: &ExperimentConfig,
    problem: &dyn Problem,
) -> Result<(Population, Option<Individual>, u64)> {
    let (mu, lambda, m) = cfg.sizes();
    let dim = problem.dim();
    let set = cfg.fitness_dataset;
    let seed = cfg.master_seed;

    let base_model = match (&cfg.init.scheme, &cfg.init.model) {
        (_, Some(path)) => {
            let params = read_model_file(path)?;
            if params.dim() != dim {
                return Err(EsgdError::DimensionMismatch {
                    expected: dim,
                    got: params.dim(),
                });
            }
            Some(params)
        }
        (InitScheme::Perturb, None) => Some(problem.init_params(&mut rng::stream(seed, &[tags::INIT, u64::MAX]))),
        (InitScheme::Random, None) => None,
    };

    let members: Vec<Individual> = (0..mu as u64)
        .into_par_iter()
        .map(|id| {
            let params = match (&cfg.init.scheme, &base_model) {
                (InitScheme::Perturb, Some(base)) => perturb(base, cfg.init.perturb_std, seed, id),
                (InitScheme::Random, _) => problem.init_params(&mut rng::stream(seed, &[tags::INIT, id])),
                (InitScheme::Perturb, None) => unreachable!("perturb always has a base model"),
            };
            let spec = if cfg.mode == Mode::SingleBaseline {
                cfg.single_baseline_spec()
            } else {
                sample_optimizer(&cfg.sampler, 0, &mut rng::stream(seed, &[tags::SAMPLER, 0, id]))?
            };
            let mut ind = Individual::new(id, params, spec, Origin::Initial, rng::individual_seed(seed, id, 0));
            evaluate(&mut ind, problem, set)?;
            Ok(ind)
        })
        .collect::<Result<_>>()?;
    let mut evaluations = members.len() as u64;
    let pop = rank_population(Population::new(members, mu, lambda, m)?)?;

    let reference = if cfg.evolution.inject_reference {
        let mut r = match (&cfg.init.model, &base_model) {
            (Some(_), Some(base)) => {
                let mut r = Individual::new(u64::MAX, base.clone(), pop.members[0].spec, Origin::Reference, 0);
                evaluate(&mut r, problem, set)?;
                evaluations += 1;
                r
            }
            _ => pop.members[0].clone(),
        };
        r.origin = Origin::Reference;
        Some(r)
    } else {
        None
    };
    Ok((pop, reference, evaluations))
}

fn perturb(base: &ParamVector, std: f64, seed: u64, id: u64) -> ParamVector {
    if std == 0.0 {
        return base.clone();
    }
    let noise = Normal::new(0.0, std).expect("std validated");
    let mut r = rng::stream(seed, &[tags::PERTURB, id]);
    base.iter().map(|v| v + noise.sample(&mut r)).collect::<Vec<_>>().into()
}

/// Runs an experiment in memory and returns every record.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<GenerationRecord>> {
    let problem = cfg.problem.build()?;
    let mut engine = Engine::new(cfg.clone(), problem)?;
    engine.run()?;
    Ok(engine.into_records())
}

/// Stateful driver for one experiment.
pub struct Engine {
    cfg: ExperimentConfig,
    problem: SharedProblem,
    pop: Population,
    reference: Option<Individual>,
    records: Vec<GenerationRecord>,
    next_id: u64,
    cumulative_evaluations: u64,
    pool: Option<Arc<ThreadPool>>,
}

struct PhaseTotals {
    backoffs: usize,
    failures: usize,
    evaluations: u64,
}

impl Engine {
    /// Validates the config, initializes the population and emits the
    /// generation-0 record.
    pub fn new(cfg: ExperimentConfig, problem: SharedProblem) -> Result<Self> {
        cfg.validate()?;
        let start = Instant::now();
        let (pop, reference, evaluations) = initialize_population(&cfg, problem.as_ref())?;
        let next_id = pop.mu as u64;
        let mut engine = Engine {
            cfg,
            problem,
            pop,
            reference,
            records: Vec::new(),
            next_id,
            cumulative_evaluations: 0,
            pool: None,
        };
        let totals = PhaseTotals {
            backoffs: 0,
            failures: 0,
            evaluations,
        };
        engine.push_record(Phase::Init, 0.0, totals, start)?;
        Ok(engine)
    }

    /// Restores an engine from a checkpoint. The problem must be the one the
    /// checkpoint's config describes.
    pub fn from_checkpoint(ckpt: Checkpoint, problem: SharedProblem) -> Result<Self> {
        ckpt.config.validate()?;
        if let Some(bad) = ckpt.population.members.iter().find(|i| i.params().dim() != problem.dim()) {
            return Err(EsgdError::DimensionMismatch {
                expected: problem.dim(),
                got: bad.params().dim(),
            });
        }
        Ok(Engine {
            cfg: ckpt.config,
            problem,
            pop: ckpt.population,
            reference: ckpt.reference,
            records: ckpt.records,
            next_id: ckpt.next_id,
            cumulative_evaluations: ckpt.cumulative_evaluations,
            pool: None,
        })
    }

    /// Runs parallel sections on a dedicated pool of `workers` threads
    /// (0 keeps rayon's global pool). Results do not depend on this.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        self.pool = if workers == 0 {
            None
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| EsgdError::Config(format!("cannot start {workers} workers: {e}")))?;
            Some(Arc::new(pool))
        };
        Ok(self)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn problem(&self) -> &SharedProblem {
        &self.problem
    }

    pub fn population(&self) -> &Population {
        &self.pop
    }

    pub fn reference(&self) -> Option<&Individual> {
        self.reference.as_ref()
    }

    pub fn records(&self) -> &[GenerationRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<GenerationRecord> {
        self.records
    }

    /// Best member of the current population.
    pub fn best(&self) -> &Individual {
        &self.pop.members[0]
    }

    /// Last completed generation (0 after initialization).
    pub fn generation(&self) -> u64 {
        self.records.last().map(|r| r.generation).unwrap_or(0)
    }

    /// Generations including the optional fine-tuning phase.
    pub fn total_generations(&self) -> u64 {
        self.cfg.schedule.generations + u64::from(self.cfg.schedule.fine_tune_epochs > 0)
    }

    pub fn is_finished(&self) -> bool {
        self.generation() >= self.total_generations()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            generation: self.generation(),
            next_id: self.next_id,
            cumulative_evaluations: self.cumulative_evaluations,
            reference: self.reference.clone(),
            population: self.pop.clone(),
            records: self.records.clone(),
        }
    }

    /// Runs all remaining generations.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Runs the next generation and returns its record.
    pub fn step(&mut self) -> Result<&GenerationRecord> {
        if self.is_finished() {
            return Err(EsgdError::InvalidArgument("experiment already finished".into()));
        }
        let k = self.generation() + 1;
        match self.pool.clone() {
            Some(pool) => pool.install(|| self.run_generation(k))?,
            None => self.run_generation(k)?,
        }
        Ok(self.records.last().expect("record pushed"))
    }

    fn run_generation(&mut self, k: u64) -> Result<()> {
        let start = Instant::now();
        let fine_tune = k > self.cfg.schedule.generations;
        let mut totals = match (fine_tune, self.cfg.mode) {
            (true, _) => self.fine_tune_phase(k)?,
            (false, Mode::SingleBaseline) => self.single_baseline_phase(k)?,
            (false, _) => self.sgd_phase(k)?,
        };
        self.pop = rank_population(std::mem::replace(&mut self.pop, empty_population()))?;

        let mut offspring_fraction = 0.0;
        if !fine_tune && self.cfg.mode == Mode::Esgd {
            let (fraction, evaluations) = self.evolution_phase(k)?;
            offspring_fraction = fraction;
            totals.evaluations += evaluations;
        }
        self.pop.generation = k;
        let phase = if fine_tune { Phase::FineTune } else { Phase::Generation };
        self.push_record(phase, offspring_fraction, totals, start)?;
        self.check_guarantees()
    }

    /// Every member draws a spec (ESGD modes) or anneals its fixed one
    /// (population baseline), then trains for `K_s` epochs with back-off.
    /// Members are independent and run in parallel.
    fn sgd_phase(&mut self, k: u64) -> Result<PhaseTotals> {
        let cfg = &self.cfg;
        let problem = self.problem.as_ref();
        let resample = matches!(cfg.mode, Mode::Esgd | Mode::EsgdNoEvolution);
        let members = std::mem::take(&mut self.pop.members);
        let results: Vec<(Individual, SgdReport, bool)> = members
            .into_par_iter()
            .map(|ind| {
                let mut ind = ind;
                ind.rng_seed = rng::individual_seed(cfg.master_seed, ind.id, k);
                ind.origin = Origin::SgdSurvivor;
                let start = ind.clone();
                if resample {
                    let spec = sample_optimizer(&cfg.sampler, k, &mut rng::stream(ind.rng_seed, &[tags::SAMPLER]))?;
                    ind.assign_spec(spec);
                } else {
                    // fixed optimizer on the same annealing schedule as the sampled ranges
                    ind.spec.learning_rate *= cfg.sampler.gamma;
                }
                let (out, report) = run_sgd_epochs(
                    ind,
                    problem,
                    cfg.schedule.sgd_epochs,
                    cfg.schedule.p_backoff,
                    cfg.fitness_dataset,
                )?;
                Ok(finish_member(out, start, report))
            })
            .collect::<Result<_>>()?;
        Ok(self.absorb(results))
    }

    fn fine_tune_phase(&mut self, k: u64) -> Result<PhaseTotals> {
        let cfg = &self.cfg;
        let problem = self.problem.as_ref();
        let lr = cfg.schedule.fine_tune_lr.expect("validated with fine_tune_epochs");
        let members = std::mem::take(&mut self.pop.members);
        let results: Vec<(Individual, SgdReport, bool)> = members
            .into_par_iter()
            .map(|mut ind| {
                ind.rng_seed = rng::individual_seed(cfg.master_seed, ind.id, k);
                ind.origin = Origin::SgdSurvivor;
                let start = ind.clone();
                ind.assign_spec(OptimizerSpec::plain(lr));
                let (out, report) = run_sgd_epochs(
                    ind,
                    problem,
                    cfg.schedule.fine_tune_epochs,
                    cfg.schedule.p_backoff,
                    cfg.fitness_dataset,
                )?;
                Ok(finish_member(out, start, report))
            })
            .collect::<Result<_>>()?;
        Ok(self.absorb(results))
    }

    /// One model trained with a fixed spec. After every epoch the loss on
    /// the holdout set (or the fitness set when there is none) is compared
    /// with the previous epoch; a worse epoch is rolled back and the learning
    /// rate halved.
    fn single_baseline_phase(&mut self, k: u64) -> Result<PhaseTotals> {
        let problem = self.problem.as_ref();
        let set = self.cfg.fitness_dataset;
        let watch = if problem.has_holdout() { DatasetChoice::Holdout } else { set };
        let mut ind = self.pop.members.pop().expect("single member");
        ind.rng_seed = rng::individual_seed(self.cfg.master_seed, ind.id, k);
        ind.origin = Origin::SgdSurvivor;
        let mut totals = PhaseTotals {
            backoffs: 0,
            failures: 0,
            evaluations: 0,
        };
        let mut watched = problem.fitness(ind.params(), watch)?;
        totals.evaluations += 1;
        for epoch in 0..self.cfg.schedule.sgd_epochs as u64 {
            let seed = rng::mix_seed(ind.rng_seed, &[tags::SHUFFLE, epoch]);
            let trained = train_epoch(ind.params().clone(), ind.opt_state.clone(), &ind.spec, problem, seed);
            let accepted = match trained {
                Ok((params, state)) => {
                    let after = problem.fitness(&params, watch)?;
                    totals.evaluations += 1;
                    (after <= watched && after.is_finite()).then_some((params, state, after))
                }
                Err(EsgdError::DivergentGradient) => None,
                Err(e) => return Err(e),
            };
            match accepted {
                Some((params, state, after)) => {
                    ind.set_params(params);
                    ind.opt_state = state;
                    watched = after;
                }
                None => {
                    totals.backoffs += 1;
                    ind.spec.learning_rate *= 0.5;
                }
            }
        }
        if ind.cached_fitness().is_none() {
            evaluate(&mut ind, problem, set)?;
            totals.evaluations += 1;
        }
        self.pop.members.push(ind);
        Ok(totals)
    }

    fn absorb(&mut self, results: Vec<(Individual, SgdReport, bool)>) -> PhaseTotals {
        let mut totals = PhaseTotals {
            backoffs: 0,
            failures: 0,
            evaluations: 0,
        };
        for (ind, report, failed) in results {
            totals.backoffs += report.backed_off;
            totals.evaluations += report.evaluations as u64;
            totals.failures += usize::from(failed);
            self.pop.members.push(ind);
        }
        totals
    }

    /// `K_v` evolution steps; returns the offspring share among the elites
    /// after the last step and the number of evaluations spent.
    fn evolution_phase(&mut self, k: u64) -> Result<(f64, u64)> {
        let cfg = &self.cfg;
        let (_, lambda, m) = cfg.sizes();
        let params = EvolutionParams {
            rho: cfg.population.rho,
            lambda,
            sigma: mutation_strength(&cfg.sampler, k)?,
            m,
            weighting: cfg.evolution.weighting,
        };
        let mut fraction = 0.0;
        let mut evaluations = 0;
        for step in 0..cfg.schedule.evolution_steps as u64 {
            let mut extra = Vec::new();
            if let Some(reference) = &self.reference {
                let mut copy = reference.clone();
                copy.id = self.next_id;
                copy.origin = Origin::Reference;
                copy.rng_seed = rng::individual_seed(cfg.master_seed, copy.id, k);
                self.next_id += 1;
                extra.push(copy);
            }
            let ctx = StepContext {
                master_seed: cfg.master_seed,
                generation: k,
                step,
                first_offspring_id: self.next_id,
                fitness_set: cfg.fitness_dataset,
            };
            let pop = std::mem::replace(&mut self.pop, empty_population());
            let (next, outcome) = evolution_step(pop, self.problem.as_ref(), &params, extra, &ctx)?;
            self.pop = next;
            self.next_id += outcome.ids_used;
            fraction = outcome.offspring_elite_fraction;
            evaluations += outcome.evaluations as u64;
        }
        Ok((fraction, evaluations))
    }

    fn push_record(&mut self, phase: Phase, offspring_fraction: f64, totals: PhaseTotals, start: Instant) -> Result<()> {
        let fitness = self.pop.fitnesses()?;
        let m = self.pop.m;
        let best = &self.pop.members[0];
        self.cumulative_evaluations += totals.evaluations;
        let record = GenerationRecord {
            generation: self.pop.generation,
            phase,
            mode: self.cfg.mode,
            m,
            j_m_elitist: elitist_average(&fitness, m)?.0,
            best_fitness: fitness[0].0,
            whole_pop_avg: elitist_average(&fitness, fitness.len())?.0,
            population_fitness: fitness.iter().map(|f| f.0).collect(),
            offspring_elite_fraction: offspring_fraction,
            best_id: best.id,
            best_origin: best.origin,
            best_individual_spec: best.spec,
            backoff_count: totals.backoffs,
            failures: totals.failures,
            evaluations: totals.evaluations,
            cumulative_evaluations: self.cumulative_evaluations,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.records.push(record);
        Ok(())
    }

    /// With strict back-off the m-elitist average and the best fitness can
    /// never increase from one generation to the next.
    fn check_guarantees(&self) -> Result<()> {
        if self.cfg.schedule.p_backoff < 1.0 || self.cfg.mode == Mode::SingleBaseline {
            return Ok(());
        }
        let n = self.records.len();
        if n < 2 {
            return Ok(());
        }
        let (prev, cur) = (&self.records[n - 2], &self.records[n - 1]);
        if cur.j_m_elitist > prev.j_m_elitist {
            return Err(EsgdError::InvariantViolated(format!(
                "m-elitist average fitness rose from {} to {} in generation {}",
                prev.j_m_elitist, cur.j_m_elitist, cur.generation
            )));
        }
        if cur.best_fitness > prev.best_fitness {
            return Err(EsgdError::InvariantViolated(format!(
                "best fitness rose from {} to {} in generation {}",
                prev.best_fitness, cur.best_fitness, cur.generation
            )));
        }
        Ok(())
    }
}

/// Rolls a member back to its generation-start state when training left it
/// with non-finite parameters or fitness.
fn finish_member(out: Individual, start: Individual, report: SgdReport) -> (Individual, SgdReport, bool) {
    let healthy = out.params().is_finite() && out.cached_fitness().is_some_and(|f| f.is_finite());
    if healthy {
        (out, report, false)
    } else {
        let mut restored = start;
        restored.origin = Origin::SgdSurvivor;
        (restored, report, true)
    }
}

fn empty_population() -> Population {
    Population {
        members: Vec::new(),
        generation: 0,
        mu: 0,
        lambda: 0,
        m: 0,
    }
}
