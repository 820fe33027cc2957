//! Gibbs sampler for the hierarchical downscaling model.

mod chain;
pub mod conditionals;
pub mod lmc;
mod ranges;
mod state;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use chain::{
    resume_chain, run_chain, write_latent_summary, write_samples, Checkpoint, Draw, LatentSummary, PosteriorSamples,
    SCALAR_PARAMS, SITE_PARAMS,
};
pub use conditionals::{
    impute_missing, update_bias_fields, update_hyperparameters, update_latents, update_variances_and_rho, Model,
};
pub use lmc::{recover_sigma_gamma, to_lmc, SigmaGamma};
pub use ranges::{estimate_ranges, RangeEstimate};
pub use state::ModelState;

/// Hyperprior constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Inverse-gamma shape for every variance.
    pub ig_shape: f64,
    /// Inverse-gamma rate for every variance.
    pub ig_rate: f64,
    /// Prior variance of the four bias-field means.
    pub mu_var: f64,
    /// Prior variance of rho.
    pub rho_var: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            ig_shape: 0.1,
            ig_rate: 0.1,
            mu_var: 100.0 * 100.0,
            rho_var: 100.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ig_shape, self.ig_rate, self.mu_var, self.rho_var];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Parameter(format!("prior constants must be positive: {self:?}")))
        }
    }
}

/// Chain schedule and fixed quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Error-process range (km); estimated from variograms when absent.
    pub phi1: Option<f64>,
    /// Bias-field range (km); estimated from variograms when absent.
    pub phi2: Option<f64>,
    pub priors: PriorConfig,
    /// Where to write the state if the chain fails.
    pub checkpoint: Option<PathBuf>,
    /// Stream every kept (site, day) latent draw to this CSV.
    pub latent_draws: Option<PathBuf>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 30_000,
            burn_in: 5_000,
            thin: 100,
            seed: 0,
            phi1: None,
            phi2: None,
            priors: PriorConfig::default(),
            checkpoint: None,
            latent_draws: None,
        }
    }
}

impl ChainConfig {
    /// Shortened schedule used for cross-validation fits.
    pub fn short() -> Self {
        Self {
            n_iter: 6_000,
            burn_in: 1_000,
            thin: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Parameter("thin must be at least 1".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Parameter(format!(
                "burn-in ({}) must be smaller than the number of iterations ({})",
                self.burn_in, self.n_iter
            )));
        }
        for (name, phi) in [("phi1", self.phi1), ("phi2", self.phi2)] {
            if let Some(p) = phi {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::Parameter(format!("{name} must be positive, got {p}")));
                }
            }
        }
        self.priors.validate()
    }

    /// `floor((n_iter - burn_in) / thin)`.
    pub fn n_kept(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    /// Iterations are numbered from 1; iteration `i` is kept when it lies
    /// past the burn-in and `i - burn_in` is a multiple of `thin`.
    pub fn is_kept(&self, iter: usize) -> bool {
        iter > self.burn_in && (iter - self.burn_in) % self.thin == 0
    }
}
