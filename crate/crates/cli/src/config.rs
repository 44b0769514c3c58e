//! The run configuration file and its command-line overrides.
//!
//! One JSON document drives every subcommand; unknown keys are rejected so
//! a typo cannot silently fall back to a default. Every field has a
//! default, so `{}` is a valid configuration and flags alone suffice for
//! quick runs. `docs/config.schema.json` mirrors this structure.

use qrx_core::completeness::calibrate_delta;
use qrx_core::device::MzmConfig;
use qrx_core::fixtures::parse_score_table;
use qrx_core::model::honest_score_distribution;
use qrx_core::sim::DeviationModel;
use qrx_core::ProtocolParams;
use qrx_sdp::SolverOptions;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Interior-point settings exposed to configs. Everything else about the
/// solver is fixed by the relaxation instances this pipeline builds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub gap_tol: f64,
    pub feas_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_iter: 300, gap_tol: 1e-7, feas_tol: 1e-7 }
    }
}

impl SolverConfig {
    pub fn to_options(self) -> SolverOptions {
        SolverOptions {
            max_iter: self.max_iter,
            gap_tol: self.gap_tol,
            feas_tol: self.feas_tol,
            ..SolverOptions::default()
        }
    }
}

/// Parameter grids for `sweep`. An empty list means "the configured value
/// only"; the sweep runs the Cartesian product of the four axes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub eta: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub gamma: Vec<f64>,
    pub n_rounds: Vec<f64>,
}

impl SweepGrid {
    /// Grid points in row-major order (eta outermost, n innermost), as
    /// parameter sets derived from `base`.
    pub fn points(&self, base: &ProtocolParams) -> Vec<ProtocolParams> {
        let axis = |list: &[f64], fallback: f64| -> Vec<f64> {
            if list.is_empty() { vec![fallback] } else { list.to_vec() }
        };
        let etas = axis(&self.eta, base.eta);
        let amps = axis(&self.amplitude, base.amplitude);
        let gammas = axis(&self.gamma, base.gamma);
        let ns = axis(&self.n_rounds, base.n_rounds);
        let mut points =
            Vec::with_capacity(etas.len() * amps.len() * gammas.len() * ns.len());
        for &eta in &etas {
            for &amplitude in &amps {
                for &gamma in &gammas {
                    for &n_rounds in &ns {
                        points.push(ProtocolParams {
                            eta,
                            amplitude,
                            gamma,
                            n_rounds,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        points
    }
}

/// The configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub params: ProtocolParams,
    /// Root seed for everything random: simulation substreams and the
    /// extractor seed derive from it by fixed stream offsets.
    pub seed: u64,
    pub deviation: DeviationModel,
    pub mzm: MzmConfig,
    pub solver: SolverConfig,
    pub sweep: SweepGrid,
    /// Path to a reference score table (the `fixtures/` format). When
    /// absent, the expected frequencies come from the source model and the
    /// tolerances from calibrating to `params.eps_completeness`.
    pub score_table: Option<PathBuf>,
    /// Certificate cache directory; `.qrx-cache` when absent.
    pub cache_dir: Option<PathBuf>,
    /// Disables the certificate cache when false.
    pub cache: bool,
    /// Rounds per simulation block. Results are a function of the block
    /// structure, not of scheduling, so this only trades memory against
    /// dispatch overhead.
    pub block_rounds: u64,
    /// Push-push ratios traced by `device`.
    pub device_ratios: Vec<f64>,
    /// Output phase span the device working point must cover, radians.
    pub target_phase_span: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: ProtocolParams::default(),
            seed: 0,
            deviation: DeviationModel::Honest,
            mzm: MzmConfig::default(),
            solver: SolverConfig::default(),
            sweep: SweepGrid::default(),
            score_table: None,
            cache_dir: None,
            cache: true,
            block_rounds: 25_000_000,
            device_ratios: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            target_phase_span: FRAC_PI_2,
        }
    }
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.params.validate()?;
        self.deviation.validate()?;
        self.mzm.validate()?;
        if self.block_rounds == 0 {
            return Err(CliError::Config("block_rounds must be positive".into()));
        }
        if !(self.target_phase_span >= 0.0 && self.target_phase_span.is_finite()) {
            return Err(CliError::Config(format!(
                "target_phase_span {} must be finite and nonnegative",
                self.target_phase_span
            )));
        }
        for &r in &self.device_ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CliError::Config(format!("device ratio {r} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| PathBuf::from(".qrx-cache"))
    }

    /// Reference statistics for the configured parameters: expected
    /// per-category frequencies and abort tolerances, either from the
    /// configured score table or from the model plus calibration.
    pub fn reference_scores(&self) -> Result<(Vec<f64>, Vec<f64>), CliError> {
        let layout = self.params.layout();
        match &self.score_table {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let table = parse_score_table(&text, &layout)?;
                Ok((table.omega(), table.delta()))
            }
            None => {
                let omega = honest_score_distribution(&self.params);
                let delta = calibrate_delta(
                    self.params.n_rounds,
                    self.params.gamma,
                    &omega,
                    self.params.eps_completeness,
                    self.params.delta_allocation,
                )?;
                Ok((omega, delta))
            }
        }
    }
}

/// Flag-level overrides applied on top of the configuration file.
#[derive(Debug, Clone, Copy, Default, clap::Args)]
pub struct Overrides {
    /// Root seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Detection efficiency override.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Signal amplitude override.
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Test probability override.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Round count override.
    #[arg(long = "n-rounds")]
    pub n_rounds: Option<f64>,
    /// Relaxation level override (1 or 2).
    #[arg(long)]
    pub level: Option<usize>,
    /// Disable the certificate cache.
    #[arg(long)]
    pub no_cache: bool,
}

impl Overrides {
    pub fn apply(self, config: &mut RunConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(eta) = self.eta {
            config.params.eta = eta;
        }
        if let Some(amplitude) = self.amplitude {
            config.params.amplitude = amplitude;
        }
        if let Some(gamma) = self.gamma {
            config.params.gamma = gamma;
        }
        if let Some(n_rounds) = self.n_rounds {
            config.params.n_rounds = n_rounds;
        }
        if let Some(level) = self.level {
            config.params.relaxation_level = level;
        }
        if self.no_cache {
            config.cache = false;
        }
    }
}

/// Loads the configuration (defaults when no file is given), applies flag
/// overrides, and validates the result.
pub fn resolve(path: Option<&Path>, overrides: Overrides) -> Result<RunConfig, CliError> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::defaults(),
    };
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

/// Worker count: the flag wins, then the `QRX_WORKERS` environment
/// variable, then one worker per available core. The environment variable
/// is the only setting read from the environment.
pub fn resolve_workers(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        if n == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        return Ok(n);
    }
    match std::env::var("QRX_WORKERS") {
        Ok(value) => {
            let n: usize = value
                .parse()
                .map_err(|_| CliError::Config(format!("QRX_WORKERS = {value:?} is not a count")))?;
            if n == 0 {
                return Err(CliError::Config("QRX_WORKERS must be positive".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
