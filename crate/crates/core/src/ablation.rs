//! Paired comparison of the four training modes.

use std::fmt::Write as _;

use crate::config::{ExperimentConfig, Mode};
use crate::engine::{run_experiment, GenerationRecord};
use crate::error::{EsgdError, Result};
use crate::report::BAND_RANK;

/// Final-generation outcome of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub mode: Mode,
    pub seed: u64,
    pub best: f64,
    pub band: (f64, f64),
    pub records: Vec<GenerationRecord>,
}

/// Per-mode aggregate over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    pub runs: usize,
    /// Median over seeds of the final best fitness.
    pub median_best: f64,
    /// Medians over seeds of the final [1st, min(15, μ)-th] fitness.
    pub median_band: (f64, f64),
    /// Seeds on which ESGD's final best is at most this mode's.
    pub esgd_not_worse: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunOutcome>,
    pub rows: Vec<AblationRow>,
}

/// Runs every mode of [`Mode::ALL`] once per seed, sharing all other
/// settings with `base`.
pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64]) -> Result<Ablation> {
    if base.population.mu < 2 {
        return Err(EsgdError::Config(
            "ablation needs population.mu >= 2: with a single member the population modes \
             collapse to the single baseline and there is nothing to select among"
                .into(),
        ));
    }
    if seeds.is_empty() {
        return Err(EsgdError::Config("ablation needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    for &mode in &Mode::ALL {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.mode = mode;
            cfg.master_seed = seed;
            if mode != Mode::Esgd {
                cfg.evolution.inject_reference = false;
            }
            if mode != Mode::Esgd && cfg.schedule.sgd_epochs == 0 {
                cfg.schedule.sgd_epochs = 1;
            }
            let records = run_experiment(&cfg)?;
            let last = records.last().expect("initial record always present");
            let band_rank = BAND_RANK.min(last.population_fitness.len());
            runs.push(RunOutcome {
                mode,
                seed,
                best: last.best_fitness,
                band: (last.ranked_fitness(1), last.ranked_fitness(band_rank)),
                records,
            });
        }
    }
    let esgd_best: Vec<f64> = runs.iter().filter(|r| r.mode == Mode::Esgd).map(|r| r.best).collect();
    let rows = Mode::ALL
        .iter()
        .map(|&mode| {
            let of_mode: Vec<&RunOutcome> = runs.iter().filter(|r| r.mode == mode).collect();
            AblationRow {
                mode,
                runs: of_mode.len(),
                median_best: median(of_mode.iter().map(|r| r.best)),
                median_band: (
                    median(of_mode.iter().map(|r| r.band.0)),
                    median(of_mode.iter().map(|r| r.band.1)),
                ),
                esgd_not_worse: of_mode.iter().zip(&esgd_best).filter(|(r, &e)| e <= r.best).count(),
            }
        })
        .collect();
    Ok(Ablation {
        seeds: seeds.to_vec(),
        runs,
        rows,
    })
}

impl Ablation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,runs,median_best_fitness,band_low,band_high,esgd_not_worse\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{}",
                r.mode.as_str(),
                r.runs,
                r.median_best,
                r.median_band.0,
                r.median_band.1,
                r.esgd_not_worse
            );
        }
        out
    }

    /// Aligned text rendering of the comparison table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>5} {:>14} {:>31} {:>10}\n",
            "mode", "runs", "best", "[1st, 15th] band", "esgd<=row"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<20} {:>5} {:>14.6e} [{:>13.6e}, {:>13.6e}] {:>4}/{:<5}",
                r.mode.as_str(),
                r.runs,
                r.median_best,
                r.median_band.0,
                r.median_band.1,
                r.esgd_not_worse,
                r.runs
            );
        }
        out
    }
}

/// Median of a non-empty sample (mean of the two middle values when even).
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    assert!(!v.is_empty(), "median of an empty sample");
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
