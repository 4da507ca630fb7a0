//! Domain types shared by every stage of the optimizer: parameter vectors,
//! fitness values, individuals and populations.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{EsgdError, Result};

/// Flat dense model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Empirical risk of a parameter vector. Lower is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fitness(pub f64);

impl Fitness {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

impl Eq for Fitness {}

impl PartialOrd for Fitness {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fitness {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Fitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerFamily {
    PlainSgd,
    MomentumSgd,
    NesterovSgd,
    Adam,
}

impl OptimizerFamily {
    pub fn uses_velocity(self) -> bool {
        matches!(self, OptimizerFamily::MomentumSgd | OptimizerFamily::NesterovSgd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerFamily::PlainSgd => "plain-sgd",
            OptimizerFamily::MomentumSgd => "momentum-sgd",
            OptimizerFamily::NesterovSgd => "nesterov-sgd",
            OptimizerFamily::Adam => "adam",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            OptimizerFamily::PlainSgd => 0,
            OptimizerFamily::MomentumSgd => 1,
            OptimizerFamily::NesterovSgd => 2,
            OptimizerFamily::Adam => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => OptimizerFamily::PlainSgd,
            1 => OptimizerFamily::MomentumSgd,
            2 => OptimizerFamily::NesterovSgd,
            3 => OptimizerFamily::Adam,
            _ => return None,
        })
    }
}

impl fmt::Display for OptimizerFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;

/// Gradient algorithm and hyper-parameters an individual trains with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub family: OptimizerFamily,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl OptimizerSpec {
    pub fn plain(learning_rate: f64) -> Self {
        OptimizerSpec {
            family: OptimizerFamily::PlainSgd,
            learning_rate,
            momentum: 0.0,
            beta1: 0.0,
            beta2: 0.0,
        }
    }

    pub fn momentum(learning_rate: f64, momentum: f64) -> Self {
        OptimizerSpec {
            family: OptimizerFamily::MomentumSgd,
            momentum,
            ..Self::plain(learning_rate)
        }
    }

    pub fn nesterov(learning_rate: f64, momentum: f64) -> Self {
        OptimizerSpec {
            family: OptimizerFamily::NesterovSgd,
            momentum,
            ..Self::plain(learning_rate)
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerSpec {
            family: OptimizerFamily::Adam,
            learning_rate,
            momentum: 0.0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
        }
    }

    /// Checks the learning-rate and momentum ranges.
    ///
    /// A learning rate of exactly zero is accepted so that identity runs can
    /// be expressed; samplers never produce one.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(EsgdError::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(EsgdError::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Accumulators carried by an optimizer between steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    /// Zeroed accumulators sized for `family`.
    pub fn zeroed(family: OptimizerFamily, dim: usize) -> Self {
        match family {
            OptimizerFamily::PlainSgd => OptimizerState::default(),
            OptimizerFamily::MomentumSgd | OptimizerFamily::NesterovSgd => OptimizerState {
                velocity: vec![0.0; dim],
                ..Default::default()
            },
            OptimizerFamily::Adam => OptimizerState {
                first_moment: vec![0.0; dim],
                second_moment: vec![0.0; dim],
                ..Default::default()
            },
        }
    }

    pub fn is_zero(&self) -> bool {
        self.step == 0
            && self
                .velocity
                .iter()
                .chain(&self.first_moment)
                .chain(&self.second_moment)
                .all(|&v| v == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Initial,
    SgdSurvivor,
    Offspring,
    Reference,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Initial => "initial",
            Origin::SgdSurvivor => "sgd-survivor",
            Origin::Offspring => "offspring",
            Origin::Reference => "reference",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Origin::Initial => 0,
            Origin::SgdSurvivor => 1,
            Origin::Offspring => 2,
            Origin::Reference => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Origin::Initial,
            1 => Origin::SgdSurvivor,
            2 => Origin::Offspring,
            3 => Origin::Reference,
            _ => return None,
        })
    }
}

/// One candidate solution.
///
/// The cached fitness is cleared whenever the parameters are replaced, so a
/// value read through [`Individual::fitness`] always belongs to the current
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub id: u64,
    params: ParamVector,
    pub spec: OptimizerSpec,
    pub opt_state: OptimizerState,
    fitness: Option<Fitness>,
    pub origin: Origin,
    pub rng_seed: u64,
}

impl Individual {
    pub fn new(id: u64, params: ParamVector, spec: OptimizerSpec, origin: Origin, rng_seed: u64) -> Self {
        let opt_state = OptimizerState::zeroed(spec.family, params.dim());
        Individual {
            id,
            params,
            spec,
            opt_state,
            fitness: None,
            origin,
            rng_seed,
        }
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Replaces the parameters and invalidates the cached fitness.
    pub fn set_params(&mut self, params: ParamVector) {
        self.params = params;
        self.fitness = None;
    }

    pub fn fitness(&self) -> Result<Fitness> {
        self.fitness.ok_or(EsgdError::StaleFitness { id: self.id })
    }

    pub fn cached_fitness(&self) -> Option<Fitness> {
        self.fitness
    }

    pub fn set_fitness(&mut self, fitness: Fitness) {
        self.fitness = Some(fitness);
    }

    /// Assigns a new optimizer spec. Accumulators are zeroed when the
    /// family changes.
    pub fn assign_spec(&mut self, spec: OptimizerSpec) {
        if spec.family != self.spec.family {
            self.opt_state = OptimizerState::zeroed(spec.family, self.params.dim());
        }
        self.spec = spec;
    }

    pub(crate) fn from_parts(
        id: u64,
        params: ParamVector,
        spec: OptimizerSpec,
        opt_state: OptimizerState,
        fitness: Option<Fitness>,
        origin: Origin,
        rng_seed: u64,
    ) -> Self {
        Individual {
            id,
            params,
            spec,
            opt_state,
            fitness,
            origin,
            rng_seed,
        }
    }
}

/// Parent population plus the generation index and ES sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub members: Vec<Individual>,
    pub generation: u64,
    pub mu: usize,
    pub lambda: usize,
    pub m: usize,
}

impl Population {
    pub fn new(members: Vec<Individual>, mu: usize, lambda: usize, m: usize) -> Result<Self> {
        if mu == 0 || m == 0 || m > mu {
            return Err(EsgdError::InvalidArgument(format!(
                "need 1 <= m <= mu, got m={m}, mu={mu}"
            )));
        }
        if members.len() != mu {
            return Err(EsgdError::InvalidArgument(format!(
                "population has {} members, expected mu={mu}",
                members.len()
            )));
        }
        Ok(Population {
            members,
            generation: 0,
            mu,
            lambda,
            m,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Cached fitnesses in member order.
    pub fn fitnesses(&self) -> Result<Vec<Fitness>> {
        self.members.iter().map(Individual::fitness).collect()
    }

    pub fn best(&self) -> Option<&Individual> {
        self.members.first()
    }
}

/// Orders by fitness, then by ascending id.
pub fn compare_individuals(a: &Individual, b: &Individual) -> Ordering {
    let fa = a.cached_fitness().expect("fitness checked before comparison");
    let fb = b.cached_fitness().expect("fitness checked before comparison");
    fa.cmp(&fb).then(a.id.cmp(&b.id))
}

pub(crate) fn sort_ranked(members: &mut [Individual]) -> Result<()> {
    if let Some(stale) = members.iter().find(|ind| ind.cached_fitness().is_none()) {
        return Err(EsgdError::StaleFitness { id: stale.id });
    }
    members.sort_by(compare_individuals);
    Ok(())
}

/// Sorts members ascending by fitness (best first), ties by ascending id.
pub fn rank_population(mut pop: Population) -> Result<Population> {
    sort_ranked(&mut pop.members)?;
    Ok(pop)
}

/// Mean fitness of the `m` best members of a ranked population.
pub fn m_elitist_average_fitness(pop: &Population, m: usize) -> Result<Fitness> {
    let values = pop.fitnesses()?;
    elitist_average(&values, m)
}

/// Mean of the first `m` values of an ascending-sorted fitness list.
pub fn elitist_average(sorted: &[Fitness], m: usize) -> Result<Fitness> {
    if m == 0 || m > sorted.len() {
        return Err(EsgdError::InvalidArgument(format!(
            "elitist count m={m} out of range 1..={}",
            sorted.len()
        )));
    }
    let sum: f64 = sorted[..m].iter().map(|f| f.0).sum();
    Ok(Fitness(sum / m as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ind(id: u64, f: f64) -> Individual {
        let mut i = Individual::new(id, ParamVector::zeros(1), OptimizerSpec::plain(0.1), Origin::Initial, 0);
        i.set_fitness(Fitness(f));
        i
    }

    fn pop_of(fs: &[f64]) -> Population {
        let members = fs.iter().enumerate().map(|(i, &f)| ind(i as u64, f)).collect();
        Population::new(members, fs.len(), 0, 1).unwrap()
    }

    fn values(p: &Population) -> Vec<f64> {
        p.members.iter().map(|i| i.fitness().unwrap().0).collect()
    }

    #[test]
    fn ranks_ascending() {
        let p = rank_population(pop_of(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(values(&p), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn equal_fitness_keeps_id_order() {
        let mut p = pop_of(&[5.0; 5]);
        p.members.reverse();
        let p = rank_population(p).unwrap();
        let ids: Vec<u64> = p.members.iter().map(|i| i.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn stale_fitness_is_rejected() {
        let mut p = pop_of(&[1.0, 2.0]);
        p.members[1].set_params(ParamVector::zeros(1));
        let err = rank_population(p).unwrap_err();
        assert!(err.to_string().contains("stale fitness"));
    }

    #[test]
    fn elitist_average_examples() {
        let p = pop_of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m_elitist_average_fitness(&p, 2).unwrap().0, 1.5);
        assert_eq!(m_elitist_average_fitness(&p, 1).unwrap().0, 1.0);
        let p = pop_of(&[2.0, 4.0, 6.0]);
        assert_eq!(m_elitist_average_fitness(&p, 3).unwrap().0, 4.0);
        assert!(m_elitist_average_fitness(&p, 0).is_err());
        assert!(m_elitist_average_fitness(&p, 4).is_err());
    }

    #[test]
    fn matches_brute_force_sort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let fs: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let ranked = rank_population(pop_of(&fs)).unwrap();

        // selection sort over (fitness, id) pairs
        let mut pairs: Vec<(f64, u64)> = fs.iter().enumerate().map(|(i, &f)| (f, i as u64)).collect();
        for i in 0..pairs.len() {
            let mut min = i;
            for j in i + 1..pairs.len() {
                if pairs[j].0 < pairs[min].0 || (pairs[j].0 == pairs[min].0 && pairs[j].1 < pairs[min].1) {
                    min = j;
                }
            }
            pairs.swap(i, min);
        }
        let got: Vec<(f64, u64)> = ranked.members.iter().map(|i| (i.fitness().unwrap().0, i.id)).collect();
        assert_eq!(got, pairs);
    }

    #[test]
    fn assign_spec_resets_state_on_family_change() {
        let mut i = Individual::new(0, ParamVector::zeros(3), OptimizerSpec::momentum(0.1, 0.5), Origin::Initial, 0);
        i.opt_state.velocity = vec![1.0, 2.0, 3.0];
        i.assign_spec(OptimizerSpec::momentum(0.2, 0.7));
        assert_eq!(i.opt_state.velocity, vec![1.0, 2.0, 3.0]);
        i.assign_spec(OptimizerSpec::adam(0.01));
        assert!(i.opt_state.is_zero());
        assert_eq!(i.opt_state.first_moment.len(), 3);
    }

    proptest! {
        #[test]
        fn ranking_is_idempotent_permutation(fs in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let once = rank_population(pop_of(&fs)).unwrap();
            let twice = rank_population(once.clone()).unwrap();
            prop_assert_eq!(&once, &twice);
            let mut a = fs.clone();
            a.sort_by(f64::total_cmp);
            prop_assert_eq!(values(&once), a);
        }

        #[test]
        fn elitist_average_bounded_by_extremes(fs in prop::collection::vec(0f64..1e3, 1..40)) {
            let p = rank_population(pop_of(&fs)).unwrap();
            let n = fs.len();
            let best = m_elitist_average_fitness(&p, 1).unwrap();
            let all = m_elitist_average_fitness(&p, n).unwrap();
            for m in 1..=n {
                let j = m_elitist_average_fitness(&p, m).unwrap();
                prop_assert!(best <= j && j <= all);
            }
        }
    }
}
