//! Per-generation optimizer and hyper-parameter sampling with annealed
//! learning-rate ranges and mutation strength.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EsgdError, Result};
use crate::population::OptimizerSpec;

/// Optimizer groups a sampler chooses between. An `sgd` draw is further
/// refined into plain, momentum or Nesterov SGD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerFamily {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrScale {
    #[default]
    Linear,
    Log,
}

/// Inclusive range `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range { lo: v[0], hi: v[1] }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

/// Sampling ranges and probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Probability of each optimizer group; need not be normalized.
    pub mix_sgd: f64,
    pub mix_adam: f64,
    /// Initial learning-rate range `[a_0, b_0]` for SGD variants.
    pub lr_sgd: Range,
    /// Initial learning-rate range `[a_0, b_0]` for Adam.
    pub lr_adam: Range,
    /// Annealing factor applied per generation to both range bounds.
    pub gamma: f64,
    pub lr_scale: LrScale,
    pub p_use_momentum: f64,
    pub p_nesterov_given_momentum: f64,
    pub momentum_range: Range,
    /// Initial mutation strength; generation `k` uses `sigma_0 / k`.
    pub sigma_0: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        preset("bn50").expect("built-in preset")
    }
}

pub const PRESET_NAMES: [&str; 3] = ["bn50", "swb300", "cifar10-style"];

/// Built-in sampler settings.
///
/// `bn50` and `swb300` mix SGD and Adam evenly; `cifar10-style` is SGD only
/// with Nesterov momentum 0.9 and a learning rate of `0.1 × U[0.9, 1.1]`
/// that is not annealed.
pub fn preset(name: &str) -> Result<SamplerConfig> {
    let speech = |lr_sgd: Range, lr_adam: Range| SamplerConfig {
        mix_sgd: 0.5,
        mix_adam: 0.5,
        lr_sgd,
        lr_adam,
        gamma: 0.9,
        lr_scale: LrScale::Linear,
        p_use_momentum: 0.8,
        p_nesterov_given_momentum: 0.5,
        momentum_range: Range::new(0.1, 0.9),
        sigma_0: 0.01,
    };
    match name {
        "bn50" => Ok(speech(Range::new(1e-4, 2e-3), Range::new(1e-4, 1e-3))),
        "swb300" => Ok(speech(Range::new(1e-2, 3e-2), Range::new(5e-5, 1e-3))),
        "cifar10-style" => Ok(SamplerConfig {
            mix_sgd: 1.0,
            mix_adam: 0.0,
            lr_sgd: Range::new(0.1 * 0.9, 0.1 * 1.1),
            lr_adam: Range::new(1e-4, 1e-3),
            gamma: 1.0,
            lr_scale: LrScale::Linear,
            p_use_momentum: 1.0,
            p_nesterov_given_momentum: 1.0,
            momentum_range: Range::new(0.9, 0.9),
            sigma_0: 0.01,
        }),
        other => Err(EsgdError::Config(format!(
            "unknown sampler preset {other:?} (known: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

impl SamplerConfig {
    /// The settings as a `[sampler]` config section.
    pub fn to_toml_section(&self) -> String {
        let body = toml::to_string(self).expect("sampler settings always serialize");
        format!("[sampler]\n{body}")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EsgdError::Config(m));
        for (name, r) in [("lr_sgd", self.lr_sgd), ("lr_adam", self.lr_adam)] {
            if !(r.lo > 0.0 && r.lo <= r.hi && r.hi.is_finite()) {
                return err(format!("sampler.{name} must satisfy 0 < a_0 <= b_0, got [{}, {}]", r.lo, r.hi));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err(format!("sampler.gamma must lie in (0, 1], got {}", self.gamma));
        }
        for (name, p) in [
            ("mix_sgd", self.mix_sgd),
            ("mix_adam", self.mix_adam),
            ("p_use_momentum", self.p_use_momentum),
            ("p_nesterov_given_momentum", self.p_nesterov_given_momentum),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("sampler.{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.mix_sgd + self.mix_adam <= 0.0 {
            return err("sampler family mix is empty: mix_sgd + mix_adam must be positive".into());
        }
        let m = self.momentum_range;
        if !(m.lo >= 0.1 && m.lo <= m.hi && m.hi <= 0.9) {
            return err(format!("sampler.momentum_range must lie within [0.1, 0.9], got [{}, {}]", m.lo, m.hi));
        }
        if !(self.sigma_0 >= 0.0 && self.sigma_0.is_finite()) {
            return err(format!("sampler.sigma_0 must be non-negative, got {}", self.sigma_0));
        }
        Ok(())
    }

    fn initial_range(&self, family: SamplerFamily) -> Range {
        match family {
            SamplerFamily::Sgd => self.lr_sgd,
            SamplerFamily::Adam => self.lr_adam,
        }
    }
}

/// `(γ^k·a_0, γ^k·b_0)`.
pub fn annealed_lr_range(cfg: &SamplerConfig, family: SamplerFamily, k: u64) -> Range {
    let r = cfg.initial_range(family);
    let factor = anneal_factor(cfg.gamma, k);
    Range::new(factor * r.lo, factor * r.hi)
}

/// `γ^k` as a left-to-right product, so the value does not depend on how a
/// platform implements integer powers.
pub fn anneal_factor(gamma: f64, k: u64) -> f64 {
    if gamma == 1.0 {
        return 1.0;
    }
    let mut factor = 1.0;
    for _ in 0..k {
        factor *= gamma;
        if factor == 0.0 {
            break;
        }
    }
    factor
}

/// `σ_0 / k`, defined from generation 1.
pub fn mutation_strength(cfg: &SamplerConfig, k: u64) -> Result<f64> {
    if k == 0 {
        return Err(EsgdError::InvalidArgument(
            "mutation strength schedule starts at generation 1".into(),
        ));
    }
    Ok(cfg.sigma_0 / k as f64)
}

fn draw_in<R: Rng + ?Sized>(rng: &mut R, r: Range, scale: LrScale) -> f64 {
    if r.lo == r.hi {
        return r.lo;
    }
    let v = match scale {
        LrScale::Linear => rng.random_range(r.lo..=r.hi),
        LrScale::Log => rng.random_range(r.lo.ln()..=r.hi.ln()).exp(),
    };
    v.clamp(r.lo, r.hi)
}

/// Draws an optimizer group from the mix, then its learning rate from the
/// annealed range for generation `k`, then momentum and Nesterov flags for
/// SGD.
pub fn sample_optimizer<R: Rng + ?Sized>(cfg: &SamplerConfig, k: u64, rng: &mut R) -> Result<OptimizerSpec> {
    let total = cfg.mix_sgd + cfg.mix_adam;
    if !(total > 0.0) {
        return Err(EsgdError::Config("sampler family mix is empty".into()));
    }
    let family = if cfg.mix_adam == 0.0 {
        SamplerFamily::Sgd
    } else if cfg.mix_sgd == 0.0 {
        SamplerFamily::Adam
    } else if rng.random::<f64>() * total < cfg.mix_sgd {
        SamplerFamily::Sgd
    } else {
        SamplerFamily::Adam
    };
    let lr = draw_in(rng, annealed_lr_range(cfg, family, k), cfg.lr_scale);
    Ok(match family {
        SamplerFamily::Adam => OptimizerSpec::adam(lr),
        SamplerFamily::Sgd => {
            if rng.random::<f64>() < cfg.p_use_momentum {
                let momentum = draw_in(rng, cfg.momentum_range, LrScale::Linear);
                if rng.random::<f64>() < cfg.p_nesterov_given_momentum {
                    OptimizerSpec::nesterov(lr, momentum)
                } else {
                    OptimizerSpec::momentum(lr, momentum)
                }
            } else {
                OptimizerSpec::plain(lr)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::OptimizerFamily;
    use crate::rng;
    use proptest::prelude::*;

    fn with_lr(a0: f64, b0: f64, gamma: f64) -> SamplerConfig {
        SamplerConfig {
            lr_sgd: Range::new(a0, b0),
            gamma,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn annealing_examples() {
        let cfg = with_lr(1e-4, 2e-3, 0.9);
        assert_eq!(annealed_lr_range(&cfg, SamplerFamily::Sgd, 0).lo, 1e-4);
        assert!((annealed_lr_range(&cfg, SamplerFamily::Sgd, 1).lo - 9e-5).abs() < 1e-18);
        let cfg = preset("swb300").unwrap();
        let r = annealed_lr_range(&cfg, SamplerFamily::Sgd, 2);
        assert!((r.lo - 8.1e-3).abs() < 1e-15);
        assert!((r.hi - 2.43e-2).abs() < 1e-15);
    }

    #[test]
    fn mutation_strength_examples() {
        let cfg = preset("bn50").unwrap();
        assert_eq!(mutation_strength(&cfg, 1).unwrap(), 0.01);
        assert_eq!(mutation_strength(&cfg, 4).unwrap(), 0.0025);
        assert_eq!(mutation_strength(&cfg, 10).unwrap(), 0.001);
        assert!(mutation_strength(&cfg, 0).is_err());
    }

    #[test]
    fn forced_plain_sgd() {
        let cfg = SamplerConfig {
            mix_sgd: 1.0,
            mix_adam: 0.0,
            p_use_momentum: 0.0,
            ..SamplerConfig::default()
        };
        let mut r = rng::stream(0, &[]);
        for _ in 0..100 {
            let s = sample_optimizer(&cfg, 3, &mut r).unwrap();
            assert_eq!(s.family, OptimizerFamily::PlainSgd);
            assert_eq!(s.momentum, 0.0);
        }
    }

    #[test]
    fn momentum_frequency() {
        let cfg = SamplerConfig {
            mix_sgd: 1.0,
            mix_adam: 0.0,
            ..SamplerConfig::default()
        };
        let mut r = rng::stream(17, &[]);
        let n = 100_000;
        let with = (0..n)
            .filter(|_| sample_optimizer(&cfg, 0, &mut r).unwrap().family.uses_velocity())
            .count();
        let freq = with as f64 / n as f64;
        assert!((freq - 0.8).abs() <= 0.005, "{freq}");
    }

    #[test]
    fn adam_uses_fixed_betas() {
        let cfg = SamplerConfig {
            mix_sgd: 0.0,
            mix_adam: 1.0,
            ..SamplerConfig::default()
        };
        let s = sample_optimizer(&cfg, 0, &mut rng::stream(1, &[])).unwrap();
        assert_eq!((s.family, s.beta1, s.beta2), (OptimizerFamily::Adam, 0.9, 0.999));
    }

    #[test]
    fn empty_mix_is_config_error() {
        let cfg = SamplerConfig {
            mix_sgd: 0.0,
            mix_adam: 0.0,
            ..SamplerConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(sample_optimizer(&cfg, 0, &mut rng::stream(1, &[])).is_err());
    }

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(preset("ptb").is_err());
    }

    proptest! {
        #[test]
        fn samples_stay_in_range(seed in any::<u64>(), k in 0u64..40, log in any::<bool>(), adam in 0f64..1.0) {
            let cfg = SamplerConfig {
                mix_adam: adam,
                lr_scale: if log { LrScale::Log } else { LrScale::Linear },
                ..preset("bn50").unwrap()
            };
            let mut r = rng::stream(seed, &[]);
            for _ in 0..20 {
                let s = sample_optimizer(&cfg, k, &mut r).unwrap();
                let fam = if s.family == OptimizerFamily::Adam { SamplerFamily::Adam } else { SamplerFamily::Sgd };
                prop_assert!(annealed_lr_range(&cfg, fam, k).contains(s.learning_rate));
                prop_assert!(s.learning_rate > 0.0);
                prop_assert!(s.validate().is_ok());
                if s.family.uses_velocity() {
                    prop_assert!((0.1..=0.9).contains(&s.momentum));
                }
            }
        }

        #[test]
        fn ranges_shrink_with_generation(k in 0u64..60, gamma in 0.01f64..=1.0) {
            let cfg = with_lr(1e-3, 5e-2, gamma);
            let a = annealed_lr_range(&cfg, SamplerFamily::Sgd, k);
            let b = annealed_lr_range(&cfg, SamplerFamily::Sgd, k + 1);
            prop_assert!(b.lo <= a.lo && b.hi <= a.hi);
        }

        #[test]
        fn seeded_sampling_replays(seed in any::<u64>()) {
            let cfg = SamplerConfig::default();
            let a = sample_optimizer(&cfg, 2, &mut rng::stream(seed, &[])).unwrap();
            let b = sample_optimizer(&cfg, 2, &mut rng::stream(seed, &[])).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
