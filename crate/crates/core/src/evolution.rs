//! The gradient-free (μ/ρ+λ) evolution step: roulette-wheel parent
//! selection, intermediate recombination with isotropic Gaussian mutation,
//! and m-elitist survivor selection.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EsgdError, Result};
use crate::population::{sort_ranked, Individual, OptimizerState, Origin, ParamVector, Population};
use crate::problems::{DatasetChoice, Problem};
use crate::rng::{self, tags};

/// How fitness values become roulette-wheel weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `w_j ∝ f_max − f_j + δ` with `δ = 1e-3·(f_max − f_min)`.
    #[default]
    Shifted,
    /// `w_j ∝ μ − rank_j` on the ranked population.
    Rank,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvolutionParams {
    pub rho: usize,
    pub lambda: usize,
    pub sigma: f64,
    pub m: usize,
    pub weighting: Weighting,
}

impl EvolutionParams {
    pub fn validate(&self) -> Result<()> {
        if self.rho == 0 {
            return Err(EsgdError::InvalidArgument("rho must be >= 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(EsgdError::InvalidArgument(format!(
                "mutation strength must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Roulette-wheel weights for a ranked population: non-negative, summing to
/// one, larger for lower (better) fitness.
pub fn selection_weights(pop: &Population, weighting: Weighting) -> Result<Vec<f64>> {
    if pop.is_empty() {
        return Err(EsgdError::InvalidArgument("cannot select from an empty population".into()));
    }
    let fs: Vec<f64> = pop.fitnesses()?.into_iter().map(|f| f.0).collect();
    if let Some(bad) = fs.iter().find(|f| !f.is_finite()) {
        return Err(EsgdError::InvalidArgument(format!("non-finite fitness {bad} in selection")));
    }
    let raw: Vec<f64> = match weighting {
        Weighting::Shifted => {
            let max = fs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = fs.iter().copied().fold(f64::INFINITY, f64::min);
            let spread = max - min;
            if spread == 0.0 {
                vec![1.0; fs.len()]
            } else {
                let delta = 1e-3 * spread;
                fs.iter().map(|f| max - f + delta).collect()
            }
        }
        Weighting::Rank => {
            let n = fs.len();
            (0..n).map(|r| (n - r) as f64).collect()
        }
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Draws one index by cumulative-weight inversion.
pub fn roulette_draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    // rounding can leave target == acc at the very end
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Selects `rho` members with replacement, returning their indices.
pub fn roulette_select<R: Rng + ?Sized>(
    pop: &Population,
    rho: usize,
    weighting: Weighting,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let weights = selection_weights(pop, weighting)?;
    Ok((0..rho).map(|_| roulette_draw(&weights, rng)).collect())
}

/// Intermediate recombination plus mutation: the parent mean with i.i.d.
/// `N(0, σ²)` noise added to every coordinate.
pub fn recombine_mutate<R: Rng + ?Sized>(parents: &[&ParamVector], sigma: f64, rng: &mut R) -> Result<ParamVector> {
    let first = parents
        .first()
        .ok_or_else(|| EsgdError::InvalidArgument("recombination needs at least one parent".into()))?;
    let dim = first.dim();
    if let Some(bad) = parents.iter().find(|p| p.dim() != dim) {
        return Err(EsgdError::DimensionMismatch { expected: dim, got: bad.dim() });
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(EsgdError::InvalidArgument(format!("invalid mutation strength {sigma}")));
    }
    let scale = 1.0 / parents.len() as f64;
    let mut child = vec![0.0; dim];
    for p in parents {
        for (c, v) in child.iter_mut().zip(p.iter()) {
            *c += v;
        }
    }
    for c in child.iter_mut() {
        *c *= scale;
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma checked above");
        for c in child.iter_mut() {
            *c += noise.sample(rng);
        }
    }
    Ok(child.into())
}

/// Survivor selection over `parents ∪ offspring`: the `m` best (ties by
/// ascending id) plus `μ − m` drawn uniformly without replacement from the
/// rest. The result is ranked and its generation counter incremented.
pub fn m_elitist_select<R: Rng + ?Sized>(
    parents: Population,
    offspring: Vec<Individual>,
    m: usize,
    rng: &mut R,
) -> Result<Population> {
    let mu = parents.mu;
    if m == 0 || m > mu {
        return Err(EsgdError::InvalidArgument(format!("need 1 <= m <= mu, got m={m}, mu={mu}")));
    }
    let Population {
        members,
        generation,
        lambda,
        ..
    } = parents;
    let mut pool = members;
    pool.extend(offspring);
    sort_ranked(&mut pool)?;
    assert!(pool.len() >= mu, "candidate pool smaller than mu");

    let mut rest = pool.split_off(m);
    let mut survivors = pool;
    let picks = index::sample(rng, rest.len(), mu - m).into_vec();
    let mut taken = vec![false; rest.len()];
    for &i in &picks {
        taken[i] = true;
    }
    let mut i = 0;
    rest.retain(|_| {
        let keep = taken[i];
        i += 1;
        keep
    });
    survivors.extend(rest);
    sort_ranked(&mut survivors)?;
    Ok(Population {
        members: survivors,
        generation: generation + 1,
        mu,
        lambda,
        m,
    })
}

/// Seeds and id allocation for one evolution step.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub master_seed: u64,
    pub generation: u64,
    /// Index of this step within the generation.
    pub step: u64,
    /// Id given to the first offspring; the rest follow consecutively.
    pub first_offspring_id: u64,
    pub fitness_set: DatasetChoice,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOutcome {
    /// Share of the `m` elites that are offspring of this step.
    pub offspring_elite_fraction: f64,
    pub evaluations: usize,
    /// Number of ids consumed by offspring.
    pub ids_used: u64,
}

/// Generates λ offspring, evaluates them and applies m-elitist selection.
///
/// `extra` candidates (for example a frozen reference model) join the
/// selection pool without being used as parents. Offspring are generated
/// and evaluated in parallel; each offspring has its own random stream, so
/// the result does not depend on the number of worker threads.
pub fn evolution_step(
    pop: Population,
    problem: &dyn Problem,
    params: &EvolutionParams,
    extra: Vec<Individual>,
    ctx: &StepContext,
) -> Result<(Population, StepOutcome)> {
    params.validate()?;
    let weights = selection_weights(&pop, params.weighting)?;
    let offspring: Vec<Individual> = (0..params.lambda as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(ctx.master_seed, &[tags::OFFSPRING, ctx.generation, ctx.step, i]);
            let chosen: Vec<usize> = (0..params.rho).map(|_| roulette_draw(&weights, &mut r)).collect();
            let parent_params: Vec<&ParamVector> = chosen.iter().map(|&j| pop.members[j].params()).collect();
            let child = recombine_mutate(&parent_params, params.sigma, &mut r)?;
            let fitness = problem.fitness(&child, ctx.fitness_set)?;
            let id = ctx.first_offspring_id + i;
            let template = &pop.members[chosen[0]];
            let mut ind = Individual::new(
                id,
                child,
                template.spec,
                Origin::Offspring,
                rng::individual_seed(ctx.master_seed, id, ctx.generation),
            );
            ind.opt_state = OptimizerState::zeroed(template.spec.family, ind.params().dim());
            ind.set_fitness(fitness);
            Ok(ind)
        })
        .collect::<Result<_>>()?;

    let evaluations = offspring.len();
    let mut candidates = offspring;
    candidates.extend(extra);
    let mut r = rng::stream(ctx.master_seed, &[tags::SURVIVORS, ctx.generation, ctx.step]);
    let m = params.m;
    let next = m_elitist_select(pop, candidates, m, &mut r)?;
    let from_offspring = next.members[..m]
        .iter()
        .filter(|ind| ind.origin == Origin::Offspring)
        .count();
    Ok((
        next,
        StepOutcome {
            offspring_elite_fraction: from_offspring as f64 / m as f64,
            evaluations,
            ids_used: params.lambda as u64,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{m_elitist_average_fitness, rank_population, Fitness, OptimizerSpec};
    use crate::problems::quadratic_problem;
    use proptest::prelude::*;

    fn ind(id: u64, f: f64, params: Vec<f64>) -> Individual {
        let mut i = Individual::new(id, params.into(), OptimizerSpec::plain(0.1), Origin::SgdSurvivor, id);
        i.set_fitness(Fitness(f));
        i
    }

    fn pop_of(fs: &[f64], m: usize) -> Population {
        let members = fs.iter().enumerate().map(|(i, &f)| ind(i as u64, f, vec![f])).collect();
        rank_population(Population::new(members, fs.len(), 0, m).unwrap()).unwrap()
    }

    #[test]
    fn uniform_weights_for_equal_fitness() {
        let w = selection_weights(&pop_of(&[2.0; 4], 1), Weighting::Shifted).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn better_fitness_weighs_more() {
        for weighting in [Weighting::Shifted, Weighting::Rank] {
            let w = selection_weights(&pop_of(&[1.0, 3.0], 1), weighting).unwrap();
            assert!(w[0] > w[1]);
            assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_population_has_no_weights() {
        let p = Population {
            members: vec![],
            generation: 0,
            mu: 1,
            lambda: 0,
            m: 1,
        };
        assert!(selection_weights(&p, Weighting::Shifted).is_err());
    }

    #[test]
    fn singleton_is_always_selected() {
        let p = pop_of(&[7.0], 1);
        let picks = roulette_select(&p, 5, Weighting::Shifted, &mut rng::stream(3, &[])).unwrap();
        assert_eq!(picks, vec![0; 5]);
    }

    #[test]
    fn dominant_parent_takes_nearly_all_draws() {
        // gap of 1e9 leaves the worst parent with weight δ/Σ ≈ 1e-3
        let p = pop_of(&[0.0, 1e9], 1);
        let w = selection_weights(&p, Weighting::Shifted).unwrap();
        assert!(w[0] > 0.998);
        let picks = roulette_select(&p, 10_000, Weighting::Shifted, &mut rng::stream(4, &[])).unwrap();
        let zeros = picks.iter().filter(|&&i| i == 0).count();
        assert!(zeros > 9_950);
    }

    #[test]
    fn seeded_draws_replay() {
        let p = pop_of(&[1.0, 2.0, 3.0, 4.0], 1);
        let a = roulette_select(&p, 50, Weighting::Shifted, &mut rng::stream(5, &[])).unwrap();
        let b = roulette_select(&p, 50, Weighting::Shifted, &mut rng::stream(5, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recombination_examples() {
        let a: ParamVector = vec![0.0, 0.0].into();
        let b: ParamVector = vec![2.0, 2.0].into();
        let mut r = rng::stream(0, &[]);
        assert_eq!(&*recombine_mutate(&[&a, &b], 0.0, &mut r).unwrap(), &[1.0, 1.0]);
        assert_eq!(recombine_mutate(&[&b], 0.0, &mut r).unwrap(), b);
        let c: ParamVector = vec![1.0].into();
        assert!(matches!(
            recombine_mutate(&[&a, &c], 0.0, &mut r),
            Err(EsgdError::DimensionMismatch { .. })
        ));
        assert!(recombine_mutate(&[], 0.1, &mut r).is_err());
    }

    #[test]
    fn plus_selection_keeps_best_mu() {
        let parents = pop_of(&[4.0, 6.0, 8.0], 3);
        let offspring = vec![ind(10, 5.0, vec![5.0]), ind(11, 9.0, vec![9.0]), ind(12, 1.0, vec![1.0])];
        let out = m_elitist_select(parents, offspring, 3, &mut rng::stream(0, &[])).unwrap();
        let fs: Vec<f64> = out.fitnesses().unwrap().iter().map(|f| f.0).collect();
        assert_eq!(fs, vec![1.0, 4.0, 5.0]);
        assert_eq!(out.generation, 1);
    }

    #[test]
    fn no_offspring_keeps_population() {
        let parents = pop_of(&[3.0, 1.0, 2.0], 2);
        let ids: Vec<u64> = parents.members.iter().map(|i| i.id).collect();
        let out = m_elitist_select(parents, vec![], 2, &mut rng::stream(0, &[])).unwrap();
        let out_ids: Vec<u64> = out.members.iter().map(|i| i.id).collect();
        assert_eq!(ids, out_ids);
    }

    #[test]
    fn non_elite_slot_is_uniform() {
        // pool [5,1,4,2,3], mu=3, m=2: elites {1,2}, third ∈ {3,4,5} w.p. 1/3
        let trials = 30_000;
        let mut counts = [0usize; 3];
        for s in 0..trials {
            let parents = {
                let members = vec![ind(0, 5.0, vec![5.0]), ind(1, 1.0, vec![1.0]), ind(2, 4.0, vec![4.0])];
                rank_population(Population::new(members, 3, 2, 2).unwrap()).unwrap()
            };
            let offspring = vec![ind(3, 2.0, vec![2.0]), ind(4, 3.0, vec![3.0])];
            let out = m_elitist_select(parents, offspring, 2, &mut rng::stream(s, &[9])).unwrap();
            let fs: Vec<f64> = out.fitnesses().unwrap().iter().map(|f| f.0).collect();
            assert_eq!(&fs[..2], &[1.0, 2.0]);
            counts[fs[2] as usize - 3] += 1;
        }
        for c in counts {
            assert!((c as f64 / trials as f64 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
    }

    fn step_ctx(seed: u64) -> StepContext {
        StepContext {
            master_seed: seed,
            generation: 1,
            step: 0,
            first_offspring_id: 1000,
            fitness_set: DatasetChoice::Train,
        }
    }

    fn quad_pop(q: &dyn Problem, mu: usize, m: usize, seed: u64) -> Population {
        let members = (0..mu as u64)
            .map(|id| {
                let mut i = Individual::new(id, q.init_params(&mut rng::stream(seed, &[id])), OptimizerSpec::plain(0.1), Origin::Initial, id);
                let f = q.fitness(i.params(), DatasetChoice::Train).unwrap();
                i.set_fitness(f);
                i
            })
            .collect();
        rank_population(Population::new(members, mu, 0, m).unwrap()).unwrap()
    }

    #[test]
    fn zero_lambda_is_noop() {
        let q = quadratic_problem(5, 10.0).unwrap();
        let pop = quad_pop(&q, 6, 4, 1);
        let ep = EvolutionParams { rho: 2, lambda: 0, sigma: 0.1, m: 4, weighting: Weighting::Shifted };
        let (out, o) = evolution_step(pop.clone(), &q, &ep, vec![], &step_ctx(1)).unwrap();
        assert_eq!(out.members, pop.members);
        assert_eq!(o.offspring_elite_fraction, 0.0);
    }

    #[test]
    fn clones_never_outrank_their_parent() {
        let q = quadratic_problem(5, 10.0).unwrap();
        let pop = quad_pop(&q, 6, 6, 2);
        let ep = EvolutionParams { rho: 1, lambda: 12, sigma: 0.0, m: 6, weighting: Weighting::Shifted };
        let (out, _) = evolution_step(pop.clone(), &q, &ep, vec![], &step_ctx(2)).unwrap();
        assert_eq!(out.members[0].id, pop.members[0].id);
        for (pos, child) in out.members.iter().enumerate().filter(|(_, i)| i.origin == Origin::Offspring) {
            let parent = pop.members.iter().position(|p| p.params() == child.params()).expect("clone of a parent");
            let parent_pos = out.members.iter().position(|p| p.id == pop.members[parent].id);
            assert!(parent_pos.is_some_and(|pp| pp < pos));
        }
    }

    #[test]
    fn identical_parents_survive_cloning_unchanged() {
        let q = quadratic_problem(3, 10.0).unwrap();
        let mut pop = quad_pop(&q, 4, 4, 3);
        let shared = pop.members[0].params().clone();
        for m in pop.members.iter_mut() {
            m.set_params(shared.clone());
            let f = q.fitness(m.params(), DatasetChoice::Train).unwrap();
            m.set_fitness(f);
        }
        let pop = rank_population(pop).unwrap();
        let ep = EvolutionParams { rho: 1, lambda: 8, sigma: 0.0, m: 4, weighting: Weighting::Shifted };
        let (out, o) = evolution_step(pop.clone(), &q, &ep, vec![], &step_ctx(3)).unwrap();
        assert_eq!(out.members, pop.members);
        assert_eq!(o.offspring_elite_fraction, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn elitist_average_never_increases(seed in any::<u64>(), mu in 1usize..10, lambda in 0usize..20, rho in 1usize..4, sigma in 0f64..0.5) {
            let q = quadratic_problem(6, 50.0).unwrap();
            let m = 1 + (seed as usize % mu);
            let pop = quad_pop(&q, mu, m, seed);
            let before = m_elitist_average_fitness(&pop, m).unwrap();
            let ep = EvolutionParams { rho, lambda, sigma, m, weighting: Weighting::Shifted };
            let (out, _) = evolution_step(pop.clone(), &q, &ep, vec![], &step_ctx(seed)).unwrap();
            prop_assert!(m_elitist_average_fitness(&out, m).unwrap() <= before);
            prop_assert_eq!(out.len(), mu);
            // parents are untouched
            for p in &pop.members {
                if let Some(survivor) = out.members.iter().find(|s| s.id == p.id) {
                    prop_assert_eq!(survivor.params(), p.params());
                }
            }
            let (again, _) = evolution_step(pop, &q, &ep, vec![], &step_ctx(seed)).unwrap();
            prop_assert_eq!(out.members, again.members);
        }

        #[test]
        fn weights_form_a_distribution(fs in prop::collection::vec(-1e6f64..1e6, 1..30)) {
            let p = pop_of(&fs, 1);
            for weighting in [Weighting::Shifted, Weighting::Rank] {
                let w = selection_weights(&p, weighting).unwrap();
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                let f: Vec<f64> = p.fitnesses().unwrap().iter().map(|x| x.0).collect();
                for i in 1..w.len() {
                    if f[i] > f[i - 1] && weighting == Weighting::Shifted {
                        prop_assert!(w[i] < w[i - 1]);
                    }
                }
            }
        }
    }
}
