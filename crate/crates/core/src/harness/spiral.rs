use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind, SpiralMethod};
use super::streams::{Purpose, StreamKey};
use super::table::{ResultTable, Summary, TableMetadata, TableRow};
use crate::error::{Error, Result};
use crate::kde::{build_akde, build_ckde, build_elkde, GaussianMixture};
use crate::metrics::{ise_from_values, EvalGrid};
use crate::numstat::{sample_covariance, Ensemble, SpdMatrix};

/// True and estimated densities on the evaluation grid for one ensemble
/// size (run 0), for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub size: usize,
    pub methods: Vec<String>,
    pub truth: Vec<f64>,
    /// One vector per method, aligned with `truth`.
    pub estimates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SpiralOutcome {
    pub mise: ResultTable,
    pub density_grids: Vec<DensityGrid>,
}

/// Moment-matched single Gaussian.
pub fn gaussian_fit(x: &Ensemble) -> Result<GaussianMixture> {
    let n = x.dim();
    let cov = SpdMatrix::from_symmetrized(sample_covariance(x)?)?;
    GaussianMixture::new(vec![1.0], DMatrix::from_column_slice(n, 1, x.mean().as_slice()), vec![cov])
}

pub fn build_spiral_estimate(cfg: &ExperimentConfig, method: SpiralMethod, x: &Ensemble) -> Result<GaussianMixture> {
    let bw = cfg.bandwidth();
    match method {
        SpiralMethod::Ckde => build_ckde(x, bw),
        SpiralMethod::Akde => build_akde(x, bw, cfg.akde_options()),
        SpiralMethod::Elkde => build_elkde(x, bw, &cfg.elkde_options()?),
        SpiralMethod::Gaussian => gaussian_fit(x),
    }
}

struct CellResult {
    ise: Vec<f64>,
    grids: Option<Vec<Vec<f64>>>,
}

/// MISE of every configured estimator against the spiral density, per
/// ensemble size, over `mc_runs` independent sample sets. All methods at a
/// given (size, run) see the same samples.
pub fn run_spiral_experiment(cfg: &ExperimentConfig, emit_density_grid: bool) -> Result<SpiralOutcome> {
    let cfg = cfg.clone().resolve(ExperimentKind::Spiral)?;
    let started = Instant::now();
    let methods = cfg.spiral_methods()?;
    let grid: &EvalGrid = &cfg.grid;
    let truth = grid.mixture_density(&cfg.spiral.as_mixture()?)?;
    let cell_volume = grid.cell_volume();

    let tasks: Vec<(usize, usize)> =
        (0..cfg.ensemble_sizes.len()).flat_map(|s| (0..cfg.mc_runs).map(move |r| (s, r))).collect();
    let results: Vec<Result<CellResult>> = tasks
        .par_iter()
        .map(|&(s, run)| {
            let size = cfg.ensemble_sizes[s];
            let key = StreamKey::new(Purpose::SpiralSample, run, size, 0);
            let attempt = || -> Result<CellResult> {
                let x = cfg.spiral.sample(size, &mut key.rng(cfg.master_seed))?;
                let keep = emit_density_grid && run == 0;
                let mut ise = Vec::with_capacity(methods.len());
                let mut grids = keep.then(Vec::new);
                for &m in &methods {
                    let estimate = build_spiral_estimate(&cfg, m, &x)?;
                    let values = grid.mixture_density(&estimate)?;
                    ise.push(ise_from_values(&truth, &values, cell_volume)?);
                    if let Some(g) = grids.as_mut() {
                        g.push(values);
                    }
                }
                Ok(CellResult { ise, grids })
            };
            attempt().map_err(|e| Error::RunFailed {
                run,
                seed: cfg.master_seed,
                stream: key.id(),
                source: Box::new(e),
            })
        })
        .collect();

    let mut per_cell: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); methods.len()]; cfg.ensemble_sizes.len()];
    let mut density_grids = Vec::new();
    for (&(s, _), result) in tasks.iter().zip(results) {
        let cell = result?;
        for (k, v) in cell.ise.into_iter().enumerate() {
            per_cell[s][k].push(v);
        }
        if let Some(estimates) = cell.grids {
            density_grids.push(DensityGrid {
                size: cfg.ensemble_sizes[s],
                methods: methods.iter().map(|m| m.label().to_string()).collect(),
                truth: truth.clone(),
                estimates,
            });
        }
    }

    let rows = cfg
        .ensemble_sizes
        .iter()
        .zip(&per_cell)
        .map(|(&size, cols)| TableRow { size, cells: cols.iter().map(|v| Summary::from_values(v)).collect() })
        .collect();
    let metadata = TableMetadata {
        experiment: "spiral".into(),
        metric: "MISE".into(),
        master_seed: cfg.master_seed,
        config_digest: cfg.digest()?,
        mc_runs: cfg.mc_runs,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        ..Default::default()
    };
    let mise = ResultTable { methods: methods.iter().map(|m| m.label().to_string()).collect(), rows, metadata };
    Ok(SpiralOutcome { mise, density_grids })
}

/// Writes `x,y,true,<method>...` rows, one per grid cell.
pub fn write_density_grid(grid: &EvalGrid, dump: &DensityGrid, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "x,y,true")?;
    for m in &dump.methods {
        write!(out, ",{m}")?;
    }
    writeln!(out)?;
    for k in 0..grid.len() {
        let p = grid.point(k);
        write!(out, "{:.16e},{:.16e},{:.16e}", p[0], p[1], dump.truth[k])?;
        for est in &dump.estimates {
            write!(out, ",{:.16e}", est[k])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
