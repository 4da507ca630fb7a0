use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{EsgdError, Result};

use super::checkpoint::write_atomic;
use super::model::write_model_file;
use super::record::{write_jsonl, GenerationRecord};
use super::Engine;

/// Locations of everything a run writes into its output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub timing: PathBuf,
    pub model: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path) -> Self {
        RunFiles {
            dir: dir.to_path_buf(),
            checkpoint: dir.join("checkpoint.esgd"),
            metrics: dir.join("metrics.jsonl"),
            timing: dir.join("timing.jsonl"),
            model: dir.join("model.txt"),
        }
    }

    /// Rewrites every file from the engine's current state.
    pub fn write(&self, engine: &Engine) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| EsgdError::io(&self.dir, e))?;
        engine.checkpoint().save(&self.checkpoint)?;
        let mut metrics = Vec::new();
        write_jsonl(&mut metrics, engine.records()).map_err(|e| EsgdError::io(&self.metrics, e))?;
        write_atomic(&self.metrics, &metrics)?;
        let timing: String = engine
            .records()
            .iter()
            .map(|r| format!("{{\"generation\":{},\"wall_time_s\":{:?}}}\n", r.generation, r.wall_time_s))
            .collect();
        write_atomic(&self.timing, timing.as_bytes())?;
        write_model_file(&self.model, engine.best().params())
    }
}

/// Runs the engine to completion (or until `stop_after` generations have
/// been completed), refreshing the output directory after every generation.
/// `on_record` sees each new record, including the initial one when the
/// engine has not stepped yet.
pub fn run_to_dir(
    engine: &mut Engine,
    dir: &Path,
    stop_after: Option<u64>,
    mut on_record: impl FnMut(&GenerationRecord),
) -> Result<RunFiles> {
    let files = RunFiles::new(dir);
    if engine.generation() == 0 {
        if let Some(r) = engine.records().last() {
            on_record(r);
        }
    }
    files.write(engine)?;
    let limit = stop_after.unwrap_or(u64::MAX);
    while !engine.is_finished() && engine.generation() < limit {
        on_record(engine.step()?);
        files.write(engine)?;
    }
    Ok(files)
}
