use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::error::{EsgdError, Result};
use crate::population::{OptimizerSpec, Origin};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Init,
    Generation,
    FineTune,
}

/// Metrics emitted after initialization and after every generation.
///
/// `wall_time_s` is not part of the JSON form, which keeps metrics files
/// byte-for-byte reproducible; timings are written separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u64,
    pub phase: Phase,
    pub mode: Mode,
    pub m: usize,
    /// Mean fitness of the `m` best members.
    pub j_m_elitist: f64,
    pub best_fitness: f64,
    /// Mean fitness of the whole population.
    pub whole_pop_avg: f64,
    /// Every member's fitness, ascending.
    pub population_fitness: Vec<f64>,
    /// Share of the `m` elites that are offspring of this generation.
    pub offspring_elite_fraction: f64,
    pub best_id: u64,
    pub best_origin: Origin,
    pub best_individual_spec: OptimizerSpec,
    pub backoff_count: usize,
    pub failures: usize,
    /// Fitness evaluations spent in this generation.
    pub evaluations: u64,
    pub cumulative_evaluations: u64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl GenerationRecord {
    /// Fitness of the `rank`-th best member (1-based), clamped to μ.
    pub fn ranked_fitness(&self, rank: usize) -> f64 {
        let i = rank.clamp(1, self.population_fitness.len()) - 1;
        self.population_fitness[i]
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(mut out: W, records: &[GenerationRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    out.flush()
}

/// Parses JSONL metrics; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<GenerationRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| EsgdError::MalformedRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(&line).map_err(|e| EsgdError::MalformedRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.population_fitness.is_empty() {
            return Err(EsgdError::MalformedRecord {
                line: i + 1,
                message: "population_fitness is empty".into(),
            });
        }
        records.push(rec);
    }
    Ok(records)
}
