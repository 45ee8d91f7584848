use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::streams::{MAX_RUNS, MAX_SIZE};
use crate::error::{Error, Result};
use crate::kde::{AkdeOptions, BandwidthSpec, ElkdeOptions, Projection};
use crate::metrics::{EvalGrid, SNEES_DISCARD_THRESHOLD};
use crate::testbeds::{Lorenz63Config, SpiralDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Spiral,
    L63,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::Spiral => "spiral",
            ExperimentKind::L63 => "l63",
        })
    }
}

/// Density estimators compared in the spiral experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpiralMethod {
    Ckde,
    Akde,
    Elkde,
    /// Single Gaussian with the sample mean and covariance.
    Gaussian,
}

impl SpiralMethod {
    pub const ALL: [SpiralMethod; 4] = [SpiralMethod::Ckde, SpiralMethod::Akde, SpiralMethod::Elkde, SpiralMethod::Gaussian];

    pub fn label(&self) -> &'static str {
        match self {
            SpiralMethod::Ckde => "CKDE",
            SpiralMethod::Akde => "AKDE",
            SpiralMethod::Elkde => "ELKDE",
            SpiralMethod::Gaussian => "Gaussian",
        }
    }
}

/// Filters compared in the Lorenz '63 experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum L63Method {
    EnGmf,
    AEnGmf,
    ElEnGmf,
    Sir,
}

impl L63Method {
    pub const ALL: [L63Method; 4] = [L63Method::EnGmf, L63Method::AEnGmf, L63Method::ElEnGmf, L63Method::Sir];

    pub fn label(&self) -> &'static str {
        match self {
            L63Method::EnGmf => "EnGMF",
            L63Method::AEnGmf => "AEnGMF",
            L63Method::ElEnGmf => "ELEnGMF",
            L63Method::Sir => "SIR",
        }
    }
}

fn parse_label<T: Copy>(s: &str, all: &[T], label: impl Fn(&T) -> &'static str) -> Result<T> {
    all.iter().copied().find(|m| label(m).eq_ignore_ascii_case(s.trim())).ok_or_else(|| {
        let known: Vec<&str> = all.iter().map(&label).collect();
        Error::Config(format!("unknown method '{s}', expected one of {}", known.join(", ")))
    })
}

impl FromStr for SpiralMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_label(s, &Self::ALL, SpiralMethod::label)
    }
}

impl FromStr for L63Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_label(s, &Self::ALL, L63Method::label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Naive,
    Constituent,
}

/// `[elkde]` table. Unset projection fields fall back to the experiment's
/// default projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElkdeConfig {
    pub s_r: f64,
    pub alpha_nudge: f64,
    pub projection: Option<ProjectionKind>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub neighbor_index: Option<usize>,
}

impl Default for ElkdeConfig {
    fn default() -> Self {
        let d = ElkdeOptions::default();
        Self { s_r: d.s_r, alpha_nudge: d.alpha_nudge, projection: None, eps1: None, eps2: None, neighbor_index: None }
    }
}

/// `[sir]` table: the bootstrap particle filter baseline and its tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SirConfig {
    /// Run the large-ensemble reference filter alongside the sweep.
    pub reference: bool,
    pub reference_size: usize,
    /// Candidate rejuvenation scales.
    pub tau_grid: Vec<f64>,
    /// Length of the validation trajectory used to pick the scale.
    pub tune_steps: usize,
    pub tune_spinup: usize,
    /// File remembering tuned scales between invocations.
    pub tau_cache: Option<PathBuf>,
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            reference: false,
            reference_size: 25_000,
            tau_grid: vec![0.25, 0.5, 1.0],
            tune_steps: 1000,
            tune_spinup: 100,
            tau_cache: None,
        }
    }
}

/// Complete experiment description. Every key is optional in the TOML file;
/// empty `ensemble_sizes` and `methods` select the experiment's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub ensemble_sizes: Vec<usize>,
    pub methods: Vec<String>,
    pub mc_runs: usize,
    pub master_seed: u64,
    pub output_path: PathBuf,
    /// Multiplier on the Silverman bandwidth.
    pub s_beta: f64,
    /// AKDE sensitivity exponent; `1 / n` when unset.
    pub akde_alpha: Option<f64>,
    pub snees_threshold: f64,
    pub elkde: ElkdeConfig,
    pub spiral: SpiralDistribution,
    pub grid: EvalGrid,
    pub l63: Lorenz63Config,
    pub sir: SirConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            ensemble_sizes: Vec::new(),
            methods: Vec::new(),
            mc_runs: 12,
            master_seed: 0x5eed_2024,
            output_path: PathBuf::from("results"),
            s_beta: 1.0,
            akde_alpha: None,
            snees_threshold: SNEES_DISCARD_THRESHOLD,
            elkde: ElkdeConfig::default(),
            spiral: SpiralDistribution::default(),
            grid: EvalGrid::default(),
            l63: Lorenz63Config::default(),
            sir: SirConfig::default(),
        }
    }
}

pub const DEFAULT_SPIRAL_SIZES: [usize; 4] = [100, 300, 1200, 5000];
pub const DEFAULT_L63_SIZES: [usize; 5] = [25, 50, 100, 250, 500];

impl ExperimentConfig {
    pub fn for_experiment(kind: ExperimentKind) -> Self {
        Self { experiment: Some(kind), ..Default::default() }.resolved(kind)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fills experiment-dependent defaults. Fails if the file names a
    /// different experiment.
    pub fn resolve(mut self, kind: ExperimentKind) -> Result<Self> {
        if let Some(declared) = self.experiment {
            if declared != kind {
                return Err(Error::Config(format!("configuration is for '{declared}' but '{kind}' was requested")));
            }
        }
        self = self.resolved(kind);
        self.validate()?;
        Ok(self)
    }

    fn resolved(mut self, kind: ExperimentKind) -> Self {
        self.experiment = Some(kind);
        if self.ensemble_sizes.is_empty() {
            self.ensemble_sizes = match kind {
                ExperimentKind::Spiral => DEFAULT_SPIRAL_SIZES.to_vec(),
                ExperimentKind::L63 => DEFAULT_L63_SIZES.to_vec(),
            };
        }
        if self.methods.is_empty() {
            self.methods = match kind {
                ExperimentKind::Spiral => SpiralMethod::ALL.iter().map(|m| m.label().to_string()).collect(),
                ExperimentKind::L63 => L63Method::ALL[..3].iter().map(|m| m.label().to_string()).collect(),
            };
        }
        self
    }

    pub fn kind(&self) -> Result<ExperimentKind> {
        self.experiment.ok_or_else(|| Error::Config("experiment kind is not set".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind()?;
        if self.master_seed > i64::MAX as u64 {
            return Err(Error::Config(format!("master_seed must fit in 63 bits, got {}", self.master_seed)));
        }
        if self.mc_runs == 0 || self.mc_runs > MAX_RUNS {
            return Err(Error::Config(format!("mc_runs must be in 1..={MAX_RUNS}, got {}", self.mc_runs)));
        }
        if self.ensemble_sizes.is_empty() {
            return Err(Error::Config("no ensemble sizes".into()));
        }
        let min_size = match kind {
            ExperimentKind::Spiral if self.spiral_methods()?.contains(&SpiralMethod::Elkde) => 3,
            ExperimentKind::L63 if self.l63_methods()?.contains(&L63Method::ElEnGmf) => 3,
            _ => 2,
        };
        if let Some(&bad) = self.ensemble_sizes.iter().find(|&&n| n < min_size || n > MAX_SIZE) {
            return Err(Error::Config(format!("ensemble size {bad} is outside {min_size}..={MAX_SIZE}")));
        }
        BandwidthSpec::new(self.s_beta)?;
        if !(self.snees_threshold > 0.0) {
            return Err(Error::Config(format!("snees_threshold must be positive, got {}", self.snees_threshold)));
        }
        match kind {
            ExperimentKind::Spiral => {
                self.spiral.validate()?;
                self.grid.validate()?;
                if self.grid.dim() != 2 {
                    return Err(Error::Config("the spiral grid must be two-dimensional".into()));
                }
            }
            ExperimentKind::L63 => {
                self.l63.validate()?;
                if self.sir.tau_grid.is_empty() || self.sir.tau_grid.iter().any(|t| !(*t >= 0.0)) {
                    return Err(Error::Config("sir.tau_grid needs nonnegative entries".into()));
                }
                if self.sir.tune_spinup >= self.sir.tune_steps {
                    return Err(Error::Config("sir.tune_spinup must be shorter than sir.tune_steps".into()));
                }
                if self.sir.reference_size < 2 || self.sir.reference_size > MAX_SIZE {
                    return Err(Error::Config(format!("sir.reference_size {} is out of range", self.sir.reference_size)));
                }
            }
        }
        Ok(())
    }

    pub fn spiral_methods(&self) -> Result<Vec<SpiralMethod>> {
        unique(self.methods.iter().map(|m| m.parse()).collect::<Result<Vec<_>>>()?)
    }

    pub fn l63_methods(&self) -> Result<Vec<L63Method>> {
        unique(self.methods.iter().map(|m| m.parse()).collect::<Result<Vec<_>>>()?)
    }

    pub fn bandwidth(&self) -> BandwidthSpec {
        BandwidthSpec { s_beta: self.s_beta }
    }

    pub fn akde_options(&self) -> AkdeOptions {
        AkdeOptions { alpha_exp: self.akde_alpha }
    }

    /// ELKDE options, with the projection defaulting to Constituent for
    /// the spiral and Naive for Lorenz '63.
    pub fn elkde_options(&self) -> Result<ElkdeOptions> {
        let e = &self.elkde;
        let kind = e.projection.unwrap_or(match self.kind()? {
            ExperimentKind::Spiral => ProjectionKind::Constituent,
            ExperimentKind::L63 => ProjectionKind::Naive,
        });
        let eps1 = e.eps1.unwrap_or(1e-4);
        let projection = match kind {
            ProjectionKind::Naive => Projection::Naive { eps1 },
            ProjectionKind::Constituent => Projection::Constituent { eps1, eps2: e.eps2.unwrap_or(1e-2) },
        };
        Ok(ElkdeOptions { s_r: e.s_r, alpha_nudge: e.alpha_nudge, projection, neighbor_index: e.neighbor_index })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization, as lowercase hex.
    pub fn digest(&self) -> Result<String> {
        let bytes = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(bytes.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn unique<T: PartialEq>(items: Vec<T>) -> Result<Vec<T>> {
    for (i, a) in items.iter().enumerate() {
        if items[..i].contains(a) {
            return Err(Error::Config("a method is listed twice".into()));
        }
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_per_experiment() {
        let s = ExperimentConfig::for_experiment(ExperimentKind::Spiral);
        assert_eq!(s.ensemble_sizes, DEFAULT_SPIRAL_SIZES);
        assert_eq!(s.spiral_methods().unwrap(), SpiralMethod::ALL);
        assert_eq!(s.elkde_options().unwrap().projection, Projection::Constituent { eps1: 1e-4, eps2: 1e-2 });
        let l = ExperimentConfig::for_experiment(ExperimentKind::L63);
        assert_eq!(l.ensemble_sizes, DEFAULT_L63_SIZES);
        assert_eq!(l.l63_methods().unwrap(), [L63Method::EnGmf, L63Method::AEnGmf, L63Method::ElEnGmf]);
        assert_eq!(l.elkde_options().unwrap().projection, Projection::Naive { eps1: 1e-4 });
        assert!(s.validate().is_ok() && l.validate().is_ok());
    }

    #[test]
    fn parses_partial_toml() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            ensemble_sizes = [50, 100]
            methods = ["elengmf", "EnGMF"]
            mc_runs = 3
            master_seed = 7

            [l63]
            steps = 200
            spinup = 20

            [elkde]
            projection = "constituent"
            eps2 = 0.05
            "#,
        )
        .unwrap()
        .resolve(ExperimentKind::L63)
        .unwrap();
        assert_eq!(cfg.l63_methods().unwrap(), [L63Method::ElEnGmf, L63Method::EnGmf]);
        assert_eq!(cfg.l63.steps, 200);
        assert_eq!(cfg.l63.dt_assim, 0.5);
        assert_eq!(cfg.elkde_options().unwrap().projection, Projection::Constituent { eps1: 1e-4, eps2: 0.05 });
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        let wrong_kind = ExperimentConfig::from_toml_str("experiment = \"spiral\"").unwrap();
        assert!(wrong_kind.resolve(ExperimentKind::L63).is_err());
        let tiny = ExperimentConfig { ensemble_sizes: vec![2], ..Default::default() };
        assert!(tiny.resolve(ExperimentKind::Spiral).is_err());
        let unknown = ExperimentConfig { methods: vec!["KDE".into()], ..Default::default() };
        assert!(unknown.resolve(ExperimentKind::Spiral).is_err());
        let zero = ExperimentConfig { mc_runs: 0, ..Default::default() };
        assert!(zero.resolve(ExperimentKind::Spiral).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::for_experiment(ExperimentKind::Spiral);
        let mut b = a.clone();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.master_seed += 1;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 64);
    }

    #[test]
    fn toml_round_trip() {
        let a = ExperimentConfig::for_experiment(ExperimentKind::L63);
        let b = ExperimentConfig::from_toml_str(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
