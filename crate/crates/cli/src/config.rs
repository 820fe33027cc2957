//! Effective run configuration: flag > config JSON > default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smokecausal_core::burden::AgeRateConfig;
use smokecausal_core::crossval::DEFAULT_TAU_GRID;
use smokecausal_core::gibbs::ChainConfig;
use smokecausal_core::inference::DuplicatePolicy;
use smokecausal_core::synth::{RegionLayout, SimulationConfig, TrueParams, DEFAULT_ORIGIN};
use smokecausal_core::{Error, Result};

use crate::Flags;

/// Synthetic study layout written by `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub regions: Vec<RegionLayout>,
    pub origin: (f64, f64),
    pub params: TrueParams,
    pub simulation: SimulationConfig,
    /// Grid cell size (km).
    pub cell_km: f64,
    pub cells_per_county: usize,
    /// Population shares per age group, identical for every county.
    pub age_shares: Vec<f64>,
    /// Baseline incidence per age group written to `baseline_rates.csv`.
    pub baseline_rates: Vec<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            regions: vec![
                RegionLayout::new("east", (600.0, 0.0), 200.0, 25),
                RegionLayout::new("west", (0.0, 0.0), 200.0, 25),
            ],
            origin: DEFAULT_ORIGIN,
            params: TrueParams::default(),
            simulation: SimulationConfig::default(),
            cell_km: 12.0,
            cells_per_county: 4,
            age_shares: vec![0.03, 0.22, 0.50, 0.25],
            baseline_rates: vec![0.012, 0.002, 0.004, 0.015],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSection {
    pub folds: usize,
    pub tau_grid: Vec<f64>,
    pub chain: ChainConfig,
}

impl Default for CvSection {
    fn default() -> Self {
        Self {
            folds: 5,
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            chain: ChainConfig::short(),
        }
    }
}

/// Contents of `--config`; every field optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tau: f64,
    pub jobs: Option<usize>,
    pub merge_regions: Vec<String>,
    pub chain: ChainConfig,
    pub cv: CvSection,
    pub age_rates: AgeRateConfig,
    pub duplicate_policy: DuplicatePolicy,
    /// Trace selection: `param` or `param@site_id`.
    pub trace: Vec<String>,
    pub acf_max_lag: usize,
    pub gof_bins: usize,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tau: 1.0,
            jobs: None,
            merge_regions: Vec::new(),
            chain: ChainConfig::default(),
            cv: CvSection::default(),
            age_rates: AgeRateConfig::default(),
            duplicate_policy: DuplicatePolicy::Average,
            trace: ["sigma_sq", "gamma", "rho", "mu_beta1"].map(String::from).to_vec(),
            acf_max_lag: 10,
            gof_bins: 15,
            simulate: SimulateConfig::default(),
        }
    }
}

/// Resolved paths and configuration for one invocation.
#[derive(Clone, Debug, Serialize)]
pub struct Effective {
    pub command: String,
    pub sites: Option<PathBuf>,
    pub panel: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub counties: Option<PathBuf>,
    pub rates: Option<PathBuf>,
    pub out: PathBuf,
    pub config_file: Option<PathBuf>,
    pub config: RunConfig,
}

impl Effective {
    pub fn resolve(command: &str, flags: &Flags) -> Result<Self> {
        let mut cfg: RunConfig = match &flags.config {
            Some(p) => {
                require(p, "--config")?;
                let text = std::fs::read_to_string(p).map_err(|e| Error::Load {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Load {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        cfg.chain.seed = cfg.seed;
        cfg.cv.chain.seed = cfg.seed;
        if let Some(t) = flags.tau {
            cfg.tau = t;
        }
        if let Some(j) = flags.jobs {
            cfg.jobs = Some(j);
        }
        if let Some(m) = &flags.merge_regions {
            cfg.merge_regions = m.clone();
        }
        if let Some(g) = &flags.tau_grid {
            cfg.cv.tau_grid = g.clone();
        }
        if let Some(k) = flags.folds {
            cfg.cv.folds = k;
        }
        for chain in [&mut cfg.chain, &mut cfg.cv.chain] {
            if let Some(n) = flags.iters {
                chain.n_iter = n;
            }
            if let Some(b) = flags.burnin {
                chain.burn_in = b;
            }
            if let Some(t) = flags.thin {
                chain.thin = t;
            }
        }
        if let Some(t) = &flags.trace {
            cfg.trace = t.clone();
        }
        if !cfg.tau.is_finite() {
            return Err(Error::Parameter(format!("tau must be finite, got {}", cfg.tau)));
        }
        cfg.chain.validate()?;
        let out = flags
            .out
            .clone()
            .ok_or_else(|| Error::Validation("--out is required".into()))?;
        Ok(Self {
            command: command.to_string(),
            sites: flags.sites.clone(),
            panel: flags.panel.clone(),
            grid: flags.grid.clone(),
            counties: flags.counties.clone(),
            rates: flags.rates.clone(),
            out,
            config_file: flags.config.clone(),
            config: cfg,
        })
    }
}

/// An input path that must exist; a missing one is a validation error.
pub fn require(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{flag}: input file {} does not exist", path.display())))
    }
}

/// The value of a required path flag, checked for existence.
pub fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let p = value
        .as_deref()
        .ok_or_else(|| Error::Validation(format!("{flag} is required for this command")))?;
    require(p, flag)?;
    Ok(p)
}
