//! Datasets: the synthetic two-arcs generator and CSV ingestion.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{EsgdError, Result};
use crate::rng;

/// Targets of a split: class labels or real-valued rows.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels { labels: Vec<usize>, classes: usize },
    Values { values: Vec<f64>, dim: usize },
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Labels { labels, .. } => labels.len(),
            Targets::Values { values, dim } => values.len() / dim.max(&1),
        }
    }

    fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                classes: *classes,
            },
            Targets::Values { values, dim } => Targets::Values {
                values: rows
                    .iter()
                    .flat_map(|&r| values[r * dim..(r + 1) * dim].iter().copied())
                    .collect(),
                dim: *dim,
            },
        }
    }

    /// Output width a model needs: class count or target dimension.
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Labels { classes, .. } => *classes,
            Targets::Values { dim, .. } => *dim,
        }
    }
}

/// Row-major inputs with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: Targets,
}

impl Split {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    fn select(&self, rows: &[usize]) -> Split {
        Split {
            inputs: rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect(),
            input_dim: self.input_dim,
            targets: self.targets.select(rows),
        }
    }
}

/// A train/holdout pair over the same input and target spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub holdout: Split,
}

impl Dataset {
    /// Shuffles `all` with `seed` and puts `round(n·train_fraction)` rows
    /// (at least one) into the training split.
    pub fn shuffle_split(all: Split, train_fraction: f64, seed: u64) -> Result<Dataset> {
        let n = all.len();
        if n == 0 {
            return Err(EsgdError::Config("dataset has no rows".into()));
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(EsgdError::Config(format!(
                "split fraction must lie in [0, 1], got {train_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tags::SHUFFLE]));
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n);
        Ok(Dataset {
            train: all.select(&order[..n_train]),
            holdout: all.select(&order[n_train..]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.train.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.train.targets.output_dim()
    }

    /// Reinterprets a single real-valued target column as class labels.
    pub fn into_classification(self) -> Result<Dataset> {
        fn convert(split: Split, classes: usize) -> Result<Split> {
            let labels = match &split.targets {
                Targets::Values { values, .. } => values.iter().map(|&v| v as usize).collect(),
                Targets::Labels { labels, .. } => labels.clone(),
            };
            Ok(Split {
                targets: Targets::Labels { labels, classes },
                ..split
            })
        }
        let mut max_label = 0usize;
        for split in [&self.train, &self.holdout] {
            match &split.targets {
                Targets::Values { values, dim } => {
                    if *dim != 1 {
                        return Err(EsgdError::Config(format!(
                            "classification needs exactly one target column, got {dim}"
                        )));
                    }
                    for &v in values {
                        if v < 0.0 || v.fract() != 0.0 {
                            return Err(EsgdError::Config(format!(
                                "class label must be a non-negative integer, got {v}"
                            )));
                        }
                        max_label = max_label.max(v as usize);
                    }
                }
                Targets::Labels { classes, .. } => max_label = max_label.max(classes.saturating_sub(1)),
            }
        }
        let classes = (max_label + 1).max(2);
        Ok(Dataset {
            train: convert(self.train, classes)?,
            holdout: convert(self.holdout, classes)?,
        })
    }
}

/// Two interleaved half-circle arcs in the plane, one per class, with
/// isotropic Gaussian noise of std `noise`. Classes are balanced and the
/// shuffled rows are split 80/20 into train and holdout.
pub fn synthetic_classification(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(EsgdError::Config(format!("synthetic dataset needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(EsgdError::Config(format!("noise must be non-negative, got {noise}")));
    }
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut rng = rng::stream(seed, &[rng::tags::INIT]);

    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let spacing = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            PI * i as f64 / (count - 1) as f64
        }
    };
    for i in 0..n_outer {
        let t = spacing(i, n_outer);
        inputs.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = spacing(i, n_inner);
        inputs.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        for x in inputs.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    let all = Split {
        inputs,
        input_dim: 2,
        targets: Targets::Labels { labels, classes: 2 },
    };
    Dataset::shuffle_split(all, 0.8, seed)
}

/// A numeric matrix read from CSV, with the header if one was detected.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvMatrix {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
}

/// Reads a comma-separated numeric file. The first row is taken as a header
/// when any of its cells fails to parse as a number.
pub fn read_csv_matrix(path: &Path) -> Result<CsvMatrix> {
    let source_name = path.display().to_string();
    let file = File::open(path).map_err(|e| EsgdError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| EsgdError::Parse {
            source_name: source_name.clone(),
            row: line,
            column: 0,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if let Some(w) = width {
            if record.len() != w {
                return Err(EsgdError::Parse {
                    source_name,
                    row: line,
                    column: record.len().min(w) + 1,
                    message: format!("expected {w} columns, found {}", record.len()),
                });
            }
        }
        let parsed: Vec<std::result::Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if idx == 0 && parsed.iter().any(|p| p.is_err()) {
            header = Some(record.iter().map(str::to_owned).collect());
            width = Some(record.len());
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (col, (cell, value)) in record.iter().zip(parsed).enumerate() {
            match value {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(EsgdError::Parse {
                        source_name,
                        row: line,
                        column: col + 1,
                        message: format!("non-numeric cell {cell:?}"),
                    })
                }
            }
        }
        width = Some(row.len());
        rows.push(row);
    }
    Ok(CsvMatrix { header, rows })
}

/// Writes rows so that [`read_csv_matrix`] reproduces them exactly.
pub fn write_csv_matrix(path: &Path, header: Option<&[String]>, rows: &[Vec<f64>]) -> Result<()> {
    let file = File::create(path).map_err(|e| EsgdError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| EsgdError::io(path, e);
    if let Some(h) = header {
        writeln!(out, "{}", h.join(",")).map_err(io)?;
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", cells.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Loads a CSV file; `target_columns` (0-based) become real-valued targets
/// and the remaining columns inputs.
pub fn csv_dataset(path: &Path, target_columns: &[usize], split_fraction: f64, seed: u64) -> Result<Dataset> {
    let matrix = read_csv_matrix(path)?;
    let width = matrix.rows.first().map(Vec::len).unwrap_or(0);
    if matrix.rows.is_empty() {
        return Err(EsgdError::Config(format!("{} has no data rows", path.display())));
    }
    if target_columns.is_empty() {
        return Err(EsgdError::Config("at least one target column is required".into()));
    }
    if let Some(&bad) = target_columns.iter().find(|&&c| c >= width) {
        return Err(EsgdError::Config(format!(
            "target column {bad} out of range for {width} columns"
        )));
    }
    let input_cols: Vec<usize> = (0..width).filter(|c| !target_columns.contains(c)).collect();
    if input_cols.is_empty() {
        return Err(EsgdError::Config("no input columns left after removing targets".into()));
    }
    let mut inputs = Vec::with_capacity(matrix.rows.len() * input_cols.len());
    let mut values = Vec::with_capacity(matrix.rows.len() * target_columns.len());
    for row in &matrix.rows {
        inputs.extend(input_cols.iter().map(|&c| row[c]));
        values.extend(target_columns.iter().map(|&c| row[c]));
    }
    let all = Split {
        inputs,
        input_dim: input_cols.len(),
        targets: Targets::Values {
            values,
            dim: target_columns.len(),
        },
    };
    Dataset::shuffle_split(all, split_fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_split_sizes() {
        let d = synthetic_classification(10, 0.1, 1).unwrap();
        assert_eq!(d.train.len(), 8);
        assert_eq!(d.holdout.len(), 2);
        assert!(synthetic_classification(1, 0.0, 1).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_classification(200, 0.1, 5).unwrap();
        let b = synthetic_classification(200, 0.1, 5).unwrap();
        assert_eq!(a, b);
        let count = |s: &Split| match &s.targets {
            Targets::Labels { labels, .. } => labels.iter().filter(|&&l| l == 1).count(),
            _ => unreachable!(),
        };
        assert_eq!(count(&a.train) + count(&a.holdout), 100);
        let c = synthetic_classification(200, 0.1, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn csv_header_detection_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x,y,label\n1,2,0\n3,4,1\n5,6,0\n7,8,1\n").unwrap();
        let m = read_csv_matrix(&path).unwrap();
        assert_eq!(m.header.as_ref().unwrap().len(), 3);
        assert_eq!(m.rows.len(), 4);
        let d = csv_dataset(&path, &[2], 0.5, 3).unwrap();
        assert_eq!((d.train.len(), d.holdout.len()), (2, 2));
        assert_eq!(d.input_dim(), 2);
        let d = d.into_classification().unwrap();
        assert_eq!(d.output_dim(), 2);

        std::fs::write(&path, "1,2,0\n3,4,1\n").unwrap();
        assert!(read_csv_matrix(&path).unwrap().header.is_none());
    }

    #[test]
    fn csv_reports_bad_cell_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n3,oops\n").unwrap();
        match read_csv_matrix(&path).unwrap_err() {
            EsgdError::Parse { row, column, .. } => assert_eq!((row, column), (3, 2)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        let rows = vec![
            vec![0.1, -1e-300, 12345.678901234567],
            vec![std::f64::consts::PI, 1e22, -0.0],
            vec![5e-324, 2.0 / 3.0, 1.0],
        ];
        let header = vec!["a".to_string(), "b".into(), "c".into()];
        write_csv_matrix(&path, Some(&header), &rows).unwrap();
        let back = read_csv_matrix(&path).unwrap();
        assert_eq!(back.header.unwrap(), header);
        for (r, b) in rows.iter().zip(&back.rows) {
            for (x, y) in r.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
