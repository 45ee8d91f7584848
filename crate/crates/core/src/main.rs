use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elkde::harness::{
    resolve_threads, run_l63_experiment, run_spiral_experiment, with_threads, write_l63_outputs, write_spiral_outputs,
    ExperimentConfig, ExperimentKind, ThreadCount, THREADS_ENV,
};
use elkde::{Error, Result};

/// Density estimation and filtering benchmarks for ensemble-localized KDE.
#[derive(Debug, Parser)]
#[command(name = "elkde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// MISE of CKDE, AKDE, ELKDE and a Gaussian fit on the spiral density.
    Spiral {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write true and estimated densities on the grid (run 0 of each size).
        #[arg(long)]
        emit_density_grid: bool,
    },
    /// RMSE and SNEES of EnGMF, AEnGMF, ELEnGMF (and SIR) on Lorenz '63.
    L63 {
        #[command(flatten)]
        common: CommonArgs,
        /// Also run the large-ensemble SIR reference filter.
        #[arg(long)]
        sir_reference: bool,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads: a positive integer or "auto" (default: $ELKDE_THREADS, then auto).
    #[arg(long, value_parser = parse_threads)]
    threads: Option<ThreadCount>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated ensemble sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Monte Carlo runs per ensemble size.
    #[arg(long)]
    runs: Option<usize>,
}

fn parse_threads(s: &str) -> std::result::Result<ThreadCount, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl CommonArgs {
    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_path = out.clone();
        }
        if let Some(methods) = &self.methods {
            cfg.methods = methods.clone();
        }
        if let Some(sizes) = &self.sizes {
            cfg.ensemble_sizes = sizes.clone();
        }
        if let Some(runs) = self.runs {
            cfg.mc_runs = runs;
        }
        cfg.resolve(kind)
    }

    fn threads(&self) -> Result<usize> {
        let env = std::env::var(THREADS_ENV).ok();
        resolve_threads(self.threads, env.as_deref())
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Spiral { common, emit_density_grid } => {
            let cfg = common.config(ExperimentKind::Spiral)?;
            let threads = common.threads()?;
            let out = with_threads(threads, || run_spiral_experiment(&cfg, emit_density_grid))??;
            for path in write_spiral_outputs(&cfg, &out, &cfg.output_path)? {
                eprintln!("wrote {}", path.display());
            }
            print!("{}", out.mise.body());
            Ok(true)
        }
        Command::L63 { common, sir_reference } => {
            let mut cfg = common.config(ExperimentKind::L63)?;
            cfg.sir.reference |= sir_reference;
            if cfg.sir.tau_cache.is_none() {
                cfg.sir.tau_cache = Some(cfg.output_path.join("sir_tau_cache.toml"));
            }
            let threads = common.threads()?;
            let out = with_threads(threads, || run_l63_experiment(&cfg))??;
            for path in write_l63_outputs(&out, &cfg.output_path)? {
                eprintln!("wrote {}", path.display());
            }
            println!("# RMSE");
            print!("{}", out.rmse.body());
            println!("# SNEES");
            print!("{}", out.snees.body());
            if let Some(reference) = &out.sir_reference {
                println!("# SIR reference RMSE");
                print!("{}", reference.body());
            }
            for f in &out.failures {
                eprintln!(
                    "failed: {} N={} run {} (seed {}, stream {:#018x}): {}",
                    f.method, f.size, f.run, cfg.master_seed, f.stream, f.message
                );
            }
            Ok(out.failures.is_empty())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
