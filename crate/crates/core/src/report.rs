//! Plot-ready tables derived from metrics records.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use crate::engine::{read_jsonl, GenerationRecord};
use crate::error::{EsgdError, Result};

/// Upper rank of the summary band, clamped to μ.
pub const BAND_RANK: usize = 15;

/// One metrics series and the label it is reported under.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub records: Vec<GenerationRecord>,
}

/// A row of the final comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub mode: String,
    pub generations: u64,
    pub best: f64,
    /// Fitness of the best and of the min(15, μ)-th member.
    pub band: (f64, f64),
}

/// Report text files, keyed by file name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Report {
    pub fitness_bands: String,
    pub offspring_fraction: String,
    pub optimizer_trace: String,
    pub summary: String,
}

impl Report {
    pub const FILES: [&'static str; 4] = [
        "fitness_bands.csv",
        "offspring_fraction.csv",
        "optimizer_trace.csv",
        "summary.csv",
    ];

    pub fn files(&self) -> [(&'static str, &str); 4] {
        [
            (Self::FILES[0], &self.fitness_bands),
            (Self::FILES[1], &self.offspring_fraction),
            (Self::FILES[2], &self.optimizer_trace),
            (Self::FILES[3], &self.summary),
        ]
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| EsgdError::io(dir, e))?;
        for (name, text) in self.files() {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| EsgdError::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn load_series(path: &Path) -> Result<Series> {
    let f = fs::File::open(path).map_err(|e| EsgdError::io(path, e))?;
    let records = read_jsonl(BufReader::new(f))?;
    Ok(Series {
        label: path.display().to_string(),
        records,
    })
}

pub fn summarize(series: &Series) -> Option<SummaryRow> {
    let last = series.records.last()?;
    let band_rank = BAND_RANK.min(last.population_fitness.len());
    Some(SummaryRow {
        label: series.label.clone(),
        mode: last.mode.as_str().to_string(),
        generations: last.generation,
        best: last.best_fitness,
        band: (last.ranked_fitness(1), last.ranked_fitness(band_rank)),
    })
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("label,mode,generations,best_fitness,band_low,band_high\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?}",
            csv_field(&r.label),
            r.mode,
            r.generations,
            r.best,
            r.band.0,
            r.band.1
        );
    }
    out
}

/// Builds every table from the given series. Series with no records
/// contribute nothing, so an empty input yields header-only files.
pub fn build_report(series: &[Series]) -> Report {
    let mut bands = String::from("label,generation,best,m_th,mu_th,band_high,whole_pop_avg,j_m_elitist\n");
    let mut offspring = String::from("label,generation,offspring_elite_fraction\n");
    let mut trace = String::from("label,generation,best_id,best_origin,family,learning_rate,momentum\n");
    for s in series {
        let label = csv_field(&s.label);
        for r in &s.records {
            let mu = r.population_fitness.len();
            let _ = writeln!(
                bands,
                "{label},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.generation,
                r.ranked_fitness(1),
                r.ranked_fitness(r.m),
                r.ranked_fitness(mu),
                r.ranked_fitness(BAND_RANK.min(mu)),
                r.whole_pop_avg,
                r.j_m_elitist
            );
            let _ = writeln!(offspring, "{label},{},{:?}", r.generation, r.offspring_elite_fraction);
            let spec = &r.best_individual_spec;
            let _ = writeln!(
                trace,
                "{label},{},{},{},{},{:?},{:?}",
                r.generation,
                r.best_id,
                r.best_origin.as_str(),
                spec.family.as_str(),
                spec.learning_rate,
                spec.momentum
            );
        }
    }
    let rows: Vec<SummaryRow> = series.iter().filter_map(summarize).collect();
    Report {
        fitness_bands: bands,
        offspring_fraction: offspring,
        optimizer_trace: trace,
        summary: summary_csv(&rows),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use crate::engine::Phase;
    use crate::population::{OptimizerSpec, Origin};

    fn record(generation: u64, fitness: Vec<f64>) -> GenerationRecord {
        GenerationRecord {
            generation,
            phase: Phase::Generation,
            mode: Mode::Esgd,
            m: 2,
            j_m_elitist: (fitness[0] + fitness[1]) / 2.0,
            best_fitness: fitness[0],
            whole_pop_avg: fitness.iter().sum::<f64>() / fitness.len() as f64,
            population_fitness: fitness,
            offspring_elite_fraction: 0.5,
            best_id: 3,
            best_origin: Origin::Offspring,
            best_individual_spec: OptimizerSpec::plain(0.1),
            backoff_count: 0,
            failures: 0,
            evaluations: 1,
            cumulative_evaluations: 1,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn empty_input_gives_headers_only() {
        let report = build_report(&[Series {
            label: "x".into(),
            records: vec![],
        }]);
        for (_, text) in report.files() {
            assert_eq!(text.lines().count(), 1);
        }
    }

    #[test]
    fn single_generation_gives_one_row() {
        let s = Series {
            label: "a".into(),
            records: vec![record(1, vec![1.0, 2.0, 3.0])],
        };
        let report = build_report(&[s]);
        assert_eq!(report.fitness_bands.lines().count(), 2);
        assert_eq!(report.fitness_bands.lines().nth(1).unwrap(), "a,1,1.0,2.0,3.0,3.0,2.0,1.5");
        assert_eq!(report.offspring_fraction.lines().nth(1).unwrap(), "a,1,0.5");
        assert_eq!(report.summary.lines().nth(1).unwrap(), "a,esgd,1,1.0,1.0,3.0");
    }

    #[test]
    fn band_clamps_to_fifteenth() {
        let fitness: Vec<f64> = (1..=20).map(f64::from).collect();
        let row = summarize(&Series {
            label: "b".into(),
            records: vec![record(4, fitness)],
        })
        .unwrap();
        assert_eq!(row.band, (1.0, 15.0));
    }

    #[test]
    fn labels_with_commas_are_quoted() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
