use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ExperimentKind, L63Method};
use super::streams::{Purpose, StreamKey};
use super::table::{ResultTable, RunFailure, Summary, TableMetadata, TableRow};
use crate::engmf::{filter_step, sir_step, FilterMethod, ObservationModel};
use crate::error::{Error, Result};
use crate::metrics::{rmse, snees, RunRecord, SneesReport};
use crate::numstat::{standard_normal_vector, Ensemble};
use crate::testbeds::{propagate_ensemble, simulate_truth, Lorenz63Config, Trajectory};

/// Builds the ensemble `x0 + N(0, I)`.
pub fn initial_ensemble<R: Rng + ?Sized>(x0: &[f64; 3], size: usize, rng: &mut R) -> Result<Ensemble> {
    let mut states = DMatrix::zeros(3, size);
    for j in 0..size {
        let z = standard_normal_vector(3, rng);
        for i in 0..3 {
            states[(i, j)] = x0[i] + z[i];
        }
    }
    Ensemble::new(states)
}

/// Runs one filter along `truth`, returning per-step posterior mean and
/// covariance for the steps after `spinup`.
#[allow(clippy::too_many_arguments)]
pub fn filter_trajectory<R: Rng + ?Sized>(
    l63: &Lorenz63Config,
    obs: &ObservationModel,
    method: &FilterMethod,
    truth: &Trajectory,
    spinup: usize,
    mut ensemble: Ensemble,
    rng: &mut R,
) -> Result<RunRecord> {
    let steps = truth.observations.len();
    let mut record = RunRecord::with_capacity(steps.saturating_sub(spinup));
    for k in 1..=steps {
        let prior = propagate_ensemble(&ensemble, l63.dt_assim, l63.substep)?;
        let y = DVector::from_element(1, truth.observations[k - 1]);
        let (next, mean, cov) = match method {
            FilterMethod::Sir { tau } => {
                let out = sir_step(&prior, obs, &y, *tau, rng)?;
                (out.ensemble, out.mean, out.covariance)
            }
            _ => {
                let out = filter_step(&prior, method, obs, &y, rng)?;
                let (mean, cov) = out.posterior.moments();
                (out.ensemble, mean, cov)
            }
        };
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("posterior mean is not finite at step {k}")));
        }
        if k > spinup {
            record.push(DVector::from_column_slice(&truth.states[k]), mean, cov);
        }
        ensemble = next;
    }
    Ok(record)
}

fn method_slot(m: L63Method) -> u8 {
    m as u8
}

/// Filter configuration for a method tag; `tau` is only used by SIR.
pub fn filter_method(cfg: &ExperimentConfig, method: L63Method, tau: f64) -> Result<FilterMethod> {
    let bandwidth = cfg.bandwidth();
    Ok(match method {
        L63Method::EnGmf => FilterMethod::EnGmf { bandwidth },
        L63Method::AEnGmf => FilterMethod::AEnGmf { bandwidth, akde: cfg.akde_options() },
        L63Method::ElEnGmf => FilterMethod::ElEnGmf { bandwidth, elkde: cfg.elkde_options()? },
        L63Method::Sir => FilterMethod::Sir { tau },
    })
}

/// RMSE and SNEES of one (size, method, run) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunScore {
    pub rmse: f64,
    pub snees: std::result::Result<SneesReport, (usize, f64)>,
}

/// One Monte Carlo run: truth from the run's stream, initial ensemble from
/// the (size, run) stream and filter noise from the (size, method, run)
/// stream.
pub fn run_l63_cell(cfg: &ExperimentConfig, method: L63Method, size: usize, run: usize, tau: f64) -> Result<RunScore> {
    let l63 = &cfg.l63;
    let obs = l63.observation_model()?;
    let truth = simulate_truth(l63, &mut StreamKey::truth(run).rng(cfg.master_seed))?;
    let mut init_rng = StreamKey::new(Purpose::InitialEnsemble, run, size, 0).rng(cfg.master_seed);
    let ensemble = initial_ensemble(&truth.states[0], size, &mut init_rng)?;
    let mut rng = StreamKey::new(Purpose::Filter, run, size, method_slot(method)).rng(cfg.master_seed);
    let filter = filter_method(cfg, method, tau)?;
    let record = filter_trajectory(l63, &obs, &filter, &truth, l63.spinup, ensemble, &mut rng)?;
    let runs = [record];
    let snees = match snees(&runs, cfg.snees_threshold) {
        Ok(r) => Ok(r),
        Err(Error::AllTermsDiscarded { total, threshold }) => Err((total, threshold)),
        Err(e) => return Err(e),
    };
    Ok(RunScore { rmse: rmse(&runs)?, snees })
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct TauCache {
    #[serde(default)]
    tau: BTreeMap<String, f64>,
}

fn tau_cache_key(cfg: &ExperimentConfig, size: usize) -> Result<String> {
    let l63 = toml::to_string(&cfg.l63).map_err(|e| Error::Config(e.to_string()))?;
    let sir = &cfg.sir;
    let text = format!(
        "{l63}|{size}|{}|{:?}|{}|{}|{}",
        cfg.master_seed, sir.tau_grid, sir.tune_steps, sir.tune_spinup, cfg.s_beta
    );
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

fn read_tau_cache(path: &Path) -> TauCache {
    std::fs::read_to_string(path).ok().and_then(|t| toml::from_str(&t).ok()).unwrap_or_default()
}

/// Picks the SIR rejuvenation scale from `sir.tau_grid` by RMSE on a
/// validation trajectory independent of the experiment runs. The winner is
/// cached in `sir.tau_cache` when that is set.
pub fn tune_sir_tau(cfg: &ExperimentConfig, size: usize) -> Result<f64> {
    let key = tau_cache_key(cfg, size)?;
    if let Some(path) = &cfg.sir.tau_cache {
        if let Some(tau) = read_tau_cache(path).tau.get(&key) {
            return Ok(*tau);
        }
    }
    let l63 = Lorenz63Config { steps: cfg.sir.tune_steps, spinup: cfg.sir.tune_spinup, ..cfg.l63.clone() };
    let obs = l63.observation_model()?;
    let truth = simulate_truth(&l63, &mut StreamKey::new(Purpose::SirTuning, 0, size, 0).rng(cfg.master_seed))?;
    let scores: Vec<f64> = cfg
        .sir
        .tau_grid
        .par_iter()
        .map(|&tau| {
            let mut init = StreamKey::new(Purpose::SirTuning, 0, size, 1).rng(cfg.master_seed);
            let mut rng = StreamKey::new(Purpose::SirTuning, 0, size, 2).rng(cfg.master_seed);
            initial_ensemble(&truth.states[0], size, &mut init)
                .and_then(|x| filter_trajectory(&l63, &obs, &FilterMethod::Sir { tau }, &truth, l63.spinup, x, &mut rng))
                .and_then(|r| rmse(&[r]))
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let (best, score) = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, s)| (cfg.sir.tau_grid[k], *s))
        .ok_or(Error::EmptyInput)?;
    if !score.is_finite() {
        return Err(Error::Divergence(format!("SIR diverged for every rejuvenation scale at N = {size}")));
    }
    if let Some(path) = &cfg.sir.tau_cache {
        let mut cache = read_tau_cache(path);
        cache.tau.insert(key, best);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, toml::to_string(&cache).map_err(|e| Error::Config(e.to_string()))?)?;
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct L63Outcome {
    pub rmse: ResultTable,
    pub snees: ResultTable,
    /// Large-ensemble SIR RMSE, when requested.
    pub sir_reference: Option<ResultTable>,
    pub failures: Vec<RunFailure>,
}

struct Sweep {
    rmse: Vec<Vec<Vec<f64>>>,
    snees: Vec<Vec<Vec<f64>>>,
    discarded: Vec<Vec<(usize, usize)>>,
    failures: Vec<RunFailure>,
}

fn sweep(cfg: &ExperimentConfig, sizes: &[usize], methods: &[L63Method], tau: &BTreeMap<usize, f64>) -> Result<Sweep> {
    let tasks: Vec<(usize, usize, usize)> = (0..sizes.len())
        .flat_map(|s| (0..methods.len()).flat_map(move |m| (0..cfg.mc_runs).map(move |r| (s, m, r))))
        .collect();
    let results: Vec<Result<RunScore>> = tasks
        .par_iter()
        .map(|&(s, m, run)| {
            let t = tau.get(&sizes[s]).copied().unwrap_or(0.0);
            run_l63_cell(cfg, methods[m], sizes[s], run, t)
        })
        .collect();

    let mut out = Sweep {
        rmse: vec![vec![Vec::new(); methods.len()]; sizes.len()],
        snees: vec![vec![Vec::new(); methods.len()]; sizes.len()],
        discarded: vec![vec![(0, 0); methods.len()]; sizes.len()],
        failures: Vec::new(),
    };
    for (&(s, m, run), result) in tasks.iter().zip(results) {
        let stream = StreamKey::new(Purpose::Filter, run, sizes[s], method_slot(methods[m])).id();
        let fail = |message: String| RunFailure { size: sizes[s], method: methods[m].label().into(), run, stream, message };
        match result {
            Ok(score) => {
                out.rmse[s][m].push(score.rmse);
                match score.snees {
                    Ok(report) => {
                        out.snees[s][m].push(report.value);
                        out.discarded[s][m].0 += report.discarded;
                        out.discarded[s][m].1 += report.kept + report.discarded;
                    }
                    Err((total, threshold)) => {
                        let f = fail(format!("snees: all {total} terms exceeded {threshold}"));
                        log::warn!("{} N={} run {}: {}", f.method, f.size, run, f.message);
                        out.failures.push(f);
                    }
                }
            }
            Err(e) => {
                let f = fail(e.to_string());
                log::warn!("{} N={} run {} excluded: {}", f.method, f.size, run, f.message);
                out.failures.push(f);
            }
        }
    }
    Ok(out)
}

fn summarize(sizes: &[usize], values: &[Vec<Vec<f64>>]) -> Vec<TableRow> {
    sizes
        .iter()
        .zip(values)
        .map(|(&size, cols)| TableRow { size, cells: cols.iter().map(|v| Summary::from_values(v)).collect() })
        .collect()
}

/// Lorenz '63 filtering sweep: RMSE and SNEES per ensemble size and method,
/// plus the optional large-ensemble SIR reference. Failed runs are excluded
/// from the aggregates and listed in the outcome and metadata.
pub fn run_l63_experiment(cfg: &ExperimentConfig) -> Result<L63Outcome> {
    let cfg = cfg.clone().resolve(ExperimentKind::L63)?;
    let started = Instant::now();
    let methods = cfg.l63_methods()?;
    let sizes = cfg.ensemble_sizes.clone();

    let mut tau = BTreeMap::new();
    if methods.contains(&L63Method::Sir) {
        for &n in &sizes {
            tau.insert(n, tune_sir_tau(&cfg, n)?);
        }
    }
    let result = sweep(&cfg, &sizes, &methods, &tau)?;
    let mut failures = result.failures;

    let labels: Vec<String> = methods.iter().map(|m| m.label().to_string()).collect();
    let base = TableMetadata {
        experiment: "l63".into(),
        master_seed: cfg.master_seed,
        config_digest: cfg.digest()?,
        mc_runs: cfg.mc_runs,
        sir_tau: tau.iter().map(|(n, t)| (n.to_string(), *t)).collect(),
        ..Default::default()
    };

    let sir_reference = if cfg.sir.reference {
        let n = cfg.sir.reference_size;
        let t = tune_sir_tau(&cfg, n)?;
        let reference = sweep(&cfg, &[n], &[L63Method::Sir], &BTreeMap::from([(n, t)]))?;
        failures.extend(reference.failures.iter().cloned());
        let mut meta = base.clone();
        meta.metric = "RMSE".into();
        meta.sir_tau = BTreeMap::from([(n.to_string(), t)]);
        meta.failures = reference.failures;
        meta.wall_time_seconds = started.elapsed().as_secs_f64();
        Some(ResultTable { methods: vec!["SIR".into()], rows: summarize(&[n], &reference.rmse), metadata: meta })
    } else {
        None
    };

    let wall = started.elapsed().as_secs_f64();
    let sweep_failures: Vec<RunFailure> =
        failures.iter().filter(|f| !(cfg.sir.reference && f.size == cfg.sir.reference_size && f.method == "SIR")).cloned().collect();
    let rmse_table = ResultTable {
        methods: labels.clone(),
        rows: summarize(&sizes, &result.rmse),
        metadata: TableMetadata {
            metric: "RMSE".into(),
            wall_time_seconds: wall,
            failures: sweep_failures.clone(),
            ..base.clone()
        },
    };
    let mut discard = BTreeMap::new();
    for (s, &n) in sizes.iter().enumerate() {
        for (m, label) in labels.iter().enumerate() {
            let (dropped, total) = result.discarded[s][m];
            if total > 0 {
                discard.insert(format!("{n}/{label}"), dropped as f64 / total as f64);
            }
        }
    }
    let snees_table = ResultTable {
        methods: labels,
        rows: summarize(&sizes, &result.snees),
        metadata: TableMetadata {
            metric: "SNEES".into(),
            wall_time_seconds: wall,
            failures: sweep_failures,
            snees_discard_fraction: discard,
            ..base
        },
    };
    Ok(L63Outcome { rmse: rmse_table, snees: snees_table, sir_reference, failures })
}
