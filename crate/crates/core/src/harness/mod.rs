//! Experiment orchestration: configuration, seeded Monte Carlo sweeps and
//! result tables. This is the only part of the crate that runs work in
//! parallel; each (size, method, run) cell owns its random streams, so the
//! results do not depend on the number of worker threads.

mod config;
mod l63;
mod spiral;
mod streams;
mod table;

use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use config::{
    ElkdeConfig, ExperimentConfig, ExperimentKind, L63Method, ProjectionKind, SirConfig, SpiralMethod,
    DEFAULT_L63_SIZES, DEFAULT_SPIRAL_SIZES,
};
pub use l63::{
    filter_method, filter_trajectory, initial_ensemble, run_l63_cell, run_l63_experiment, tune_sir_tau, L63Outcome,
    RunScore,
};
pub use spiral::{
    build_spiral_estimate, gaussian_fit, run_spiral_experiment, write_density_grid, DensityGrid, SpiralOutcome,
};
pub use streams::{Purpose, StreamKey, MAX_RUNS, MAX_SIZE};
pub use table::{
    emit_table, metadata_path, parse_table, read_metadata, read_table, ParsedTable, ResultTable, RunFailure, Summary,
    TableMetadata, TableRow,
};

use crate::error::{Error, Result};

/// Environment variable consulted when no thread count is given explicitly.
pub const THREADS_ENV: &str = "ELKDE_THREADS";

/// Worker count request: a fixed number or one per available core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadCount {
    Auto,
    Fixed(usize),
}

impl FromStr for ThreadCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(ThreadCount::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(ThreadCount::Fixed(n)),
            _ => Err(Error::Config(format!("thread count must be a positive integer or 'auto', got '{s}'"))),
        }
    }
}

/// Resolves the worker count: explicit request, then `env_value`, then
/// the number of available cores.
pub fn resolve_threads(requested: Option<ThreadCount>, env_value: Option<&str>) -> Result<usize> {
    let choice = match (requested, env_value) {
        (Some(t), _) => t,
        (None, Some(v)) => v.parse()?,
        (None, None) => ThreadCount::Auto,
    };
    Ok(match choice {
        ThreadCount::Fixed(n) => n,
        ThreadCount::Auto => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    })
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

pub const SPIRAL_TABLE: &str = "spiral_mise.csv";
pub const L63_RMSE_TABLE: &str = "l63_rmse.csv";
pub const L63_SNEES_TABLE: &str = "l63_snees.csv";
pub const L63_SIR_REFERENCE_TABLE: &str = "l63_sir_reference.csv";

/// Writes the spiral table and any density grids under `dir`; returns the
/// written paths.
pub fn write_spiral_outputs(cfg: &ExperimentConfig, out: &SpiralOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = vec![dir.join(SPIRAL_TABLE)];
    emit_table(&out.mise, &written[0])?;
    for dump in &out.density_grids {
        let path = dir.join(format!("spiral_density_N{}.csv", dump.size));
        write_density_grid(&cfg.grid, dump, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn write_l63_outputs(out: &L63Outcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = vec![dir.join(L63_RMSE_TABLE), dir.join(L63_SNEES_TABLE)];
    emit_table(&out.rmse, &written[0])?;
    emit_table(&out.snees, &written[1])?;
    if let Some(reference) = &out.sir_reference {
        let path = dir.join(L63_SIR_REFERENCE_TABLE);
        emit_table(reference, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_precedence() {
        assert_eq!(resolve_threads(Some(ThreadCount::Fixed(3)), Some("5")).unwrap(), 3);
        assert_eq!(resolve_threads(None, Some("5")).unwrap(), 5);
        assert!(resolve_threads(None, None).unwrap() >= 1);
        assert!(resolve_threads(None, Some("zero")).is_err());
        assert_eq!("auto".parse::<ThreadCount>().unwrap(), ThreadCount::Auto);
        assert!("0".parse::<ThreadCount>().is_err());
    }

    #[test]
    fn pool_runs_closure() {
        assert_eq!(with_threads(2, rayon::current_num_threads).unwrap(), 2);
    }
}
