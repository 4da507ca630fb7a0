use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use esgd_core::ablation::run_ablation;
use esgd_core::engine::{run_to_dir, write_jsonl, Checkpoint, Engine, GenerationRecord};
use esgd_core::report::{build_report, load_series};
use esgd_core::sampler::{preset, PRESET_NAMES};
use esgd_core::{EsgdError, ExperimentConfig};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "esgd", version, about = "Evolutionary stochastic gradient descent experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `population.mu=8` (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory for metrics, checkpoint and model.
        #[arg(long, default_value = "esgd-out")]
        out: PathBuf,
        /// Worker threads (0 = one per core).
        #[arg(long, env = "ESGD_WORKERS", default_value_t = 0)]
        workers: usize,
        /// Stop after this generation; the checkpoint allows resuming.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Continue a run from its checkpoint.
    Resume {
        checkpoint: PathBuf,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "ESGD_WORKERS", default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run all four modes with paired seeds and compare final fitness.
    Ablate {
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Number of seeds, counting up from the config's master_seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = "esgd-ablation")]
        out: PathBuf,
    },
    /// Turn metrics files into CSV series for plotting.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "esgd-report")]
        out: PathBuf,
    },
    /// List sampler presets or print one as a config section.
    Presets { name: Option<String> },
}

/// Errors tagged with the exit status they map to.
enum Failure {
    Config(EsgdError),
    Runtime(EsgdError),
}

impl From<EsgdError> for Failure {
    fn from(e: EsgdError) -> Self {
        if e.is_config_error() {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn config_stage<T>(r: Result<T, EsgdError>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            overrides,
            out,
            workers,
            stop_after,
        } => cmd_run(&config, &overrides, &out, workers, stop_after),
        Command::Resume {
            checkpoint,
            out,
            workers,
            stop_after,
        } => cmd_resume(&checkpoint, out, workers, stop_after),
        Command::Ablate {
            config,
            overrides,
            seeds,
            out,
        } => cmd_ablate(&config, &overrides, seeds, &out),
        Command::Report { metrics, out } => cmd_report(&metrics, &out),
        Command::Presets { name } => cmd_presets(name.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn print_record(r: &GenerationRecord) {
    println!(
        "gen {:>3} {:<10} best {:.6e}  J_m {:.6e}  avg {:.6e}  offspring {:>5.1}%  backoffs {:>3}  best={} lr={:.3e}",
        r.generation,
        format!("{:?}", r.phase).to_lowercase(),
        r.best_fitness,
        r.j_m_elitist,
        r.whole_pop_avg,
        100.0 * r.offspring_elite_fraction,
        r.backoff_count,
        r.best_individual_spec.family.as_str(),
        r.best_individual_spec.learning_rate
    );
}

fn drive(mut engine: Engine, out: &Path, stop_after: Option<u64>) -> Result<(), Failure> {
    let files = run_to_dir(&mut engine, out, stop_after, print_record)?;
    if engine.is_finished() {
        println!("finished: best fitness {:?}, metrics in {}", engine.best().fitness()?.0, files.metrics.display());
    } else {
        println!(
            "stopped after generation {}; resume with `esgd resume {}`",
            engine.generation(),
            files.checkpoint.display()
        );
    }
    Ok(())
}

fn cmd_run(config: &Path, overrides: &[String], out: &Path, workers: usize, stop_after: Option<u64>) -> Result<(), Failure> {
    let cfg = config_stage(ExperimentConfig::load(config, overrides))?;
    let problem = config_stage(cfg.problem.build())?;
    let engine = Engine::new(cfg, problem)?.with_workers(workers)?;
    drive(engine, out, stop_after)
}

fn cmd_resume(checkpoint: &Path, out: Option<PathBuf>, workers: usize, stop_after: Option<u64>) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(checkpoint).map_err(Failure::Runtime)?;
    let problem = config_stage(ckpt.config.problem.build())?;
    let engine = Engine::from_checkpoint(ckpt, problem)?.with_workers(workers)?;
    let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    drive(engine, &out, stop_after)
}

fn cmd_ablate(config: &Path, overrides: &[String], seeds: u64, out: &Path) -> Result<(), Failure> {
    let cfg = config_stage(ExperimentConfig::load(config, overrides))?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.master_seed.wrapping_add(i)).collect();
    let ablation = run_ablation(&cfg, &seed_list)?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(io_error(out, e)))?;
    for run in &ablation.runs {
        let path = out.join(format!("{}-seed{}.jsonl", run.mode.as_str(), run.seed));
        let mut bytes = Vec::new();
        write_jsonl(&mut bytes, &run.records).map_err(|e| Failure::Runtime(io_error(&path, e)))?;
        fs::write(&path, bytes).map_err(|e| Failure::Runtime(io_error(&path, e)))?;
    }
    let table = out.join("ablation.csv");
    fs::write(&table, ablation.to_csv()).map_err(|e| Failure::Runtime(io_error(&table, e)))?;
    print!("{}", ablation.to_table());
    println!("table written to {}", table.display());
    Ok(())
}

fn cmd_report(metrics: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let series = metrics
        .iter()
        .map(|p| load_series(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Runtime)?;
    let report = build_report(&series);
    report.write_to(out).map_err(Failure::Runtime)?;
    print!("{}", report.summary);
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_presets(name: Option<&str>) -> Result<(), Failure> {
    match name {
        None => {
            for n in PRESET_NAMES {
                println!("{n}");
            }
        }
        Some(n) => print!("{}", config_stage(preset(n))?.to_toml_section()),
    }
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> EsgdError {
    EsgdError::Io {
        path: path.to_path_buf(),
        source,
    }
}
