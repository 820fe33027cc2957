//! Synthetic datasets drawn from the hierarchical model with known truth.
//!
//! Every draw comes from a counter-based stream keyed by (seed, variable,
//! site/day), so results do not depend on evaluation order.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{smoke_indicator, PanelDataset};
use crate::error::{Error, Result};
use crate::io::{fmt_g9, GridCell};
use crate::linalg::{cholesky_jitter, standard_normal_vec};
use crate::rng::{stream, Variable};
use crate::spatial::{distance_matrix, exp_correlation, CovarianceParams, SiteSet};

pub use crate::ols::{ols_mean_recovery, OlsFit};

/// Ground-truth parameters of the generative model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrueParams {
    pub mu_alpha0: f64,
    pub mu_beta0: f64,
    pub mu_alpha1: f64,
    pub mu_beta1: f64,
    pub sigma_alpha0_sq: f64,
    pub sigma_beta0_sq: f64,
    pub sigma_alpha1_sq: f64,
    pub sigma_beta1_sq: f64,
    /// Range of the bias fields (km).
    pub phi2: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub gamma: f64,
    /// Range of the error process (km).
    pub phi1: f64,
    /// Measurement-error variance.
    pub sigma_sq: f64,
    /// Smoke threshold used to build C.
    pub tau: f64,
}

impl Default for TrueParams {
    fn default() -> Self {
        Self {
            mu_alpha0: 2.0,
            mu_beta0: 0.9,
            mu_alpha1: 0.5,
            mu_beta1: 0.8,
            sigma_alpha0_sq: 0.5,
            sigma_beta0_sq: 0.04,
            sigma_alpha1_sq: 0.25,
            sigma_beta1_sq: 0.04,
            phi2: 60.0,
            sigma1_sq: 2.0,
            sigma2_sq: 1.5,
            gamma: 0.3,
            phi1: 40.0,
            sigma_sq: 0.5,
            tau: 1.0,
        }
    }
}

impl TrueParams {
    /// Variances may be zero (a deterministic component); ranges must be positive.
    pub fn validate(&self) -> Result<()> {
        let vars = [
            self.sigma_alpha0_sq,
            self.sigma_beta0_sq,
            self.sigma_alpha1_sq,
            self.sigma_beta1_sq,
            self.sigma1_sq,
            self.sigma2_sq,
            self.sigma_sq,
        ];
        let means = [self.mu_alpha0, self.mu_beta0, self.mu_alpha1, self.mu_beta1, self.tau];
        if vars.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || means.iter().any(|v| !v.is_finite())
            || !(self.gamma.abs() <= 1.0)
            || !(self.phi1 > 0.0 && self.phi1.is_finite())
            || !(self.phi2 > 0.0 && self.phi2.is_finite())
        {
            return Err(Error::Parameter(format!("invalid true parameters {self:?}")));
        }
        Ok(())
    }

    pub fn covariance(&self) -> CovarianceParams {
        CovarianceParams {
            sigma1_sq: self.sigma1_sq,
            sigma2_sq: self.sigma2_sq,
            gamma: self.gamma,
            phi1: self.phi1,
            sigma_sq: self.sigma_sq,
        }
    }

    /// Linear-model-of-coregionalization form `(s1^2, s2^2, rho)`.
    pub fn lmc(&self) -> (f64, f64, f64) {
        let s12 = self.gamma * (self.sigma1_sq * self.sigma2_sq).sqrt();
        let rho = s12 / self.sigma1_sq;
        (self.sigma1_sq, self.sigma2_sq - s12 * s12 / self.sigma1_sq, rho)
    }
}

/// Per-site bias fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasFields {
    pub alpha0: DVector<f64>,
    pub beta0: DVector<f64>,
    pub alpha1: DVector<f64>,
    pub beta1: DVector<f64>,
}

impl BiasFields {
    pub fn constant(n: usize, alpha0: f64, beta0: f64, alpha1: f64, beta1: f64) -> Self {
        Self {
            alpha0: DVector::from_element(n, alpha0),
            beta0: DVector::from_element(n, beta0),
            alpha1: DVector::from_element(n, alpha1),
            beta1: DVector::from_element(n, beta1),
        }
    }

    pub fn as_array(&self) -> [&DVector<f64>; 4] {
        [&self.alpha0, &self.beta0, &self.alpha1, &self.beta1]
    }
}

/// Four independent GP draws with exponential correlation of range `phi2`.
pub fn simulate_bias_fields(sites: &SiteSet, params: &TrueParams, seed: u64) -> Result<BiasFields> {
    params.validate()?;
    let n = sites.len();
    let corr = exp_correlation(&distance_matrix(sites), params.phi2)?;
    let chol = cholesky_jitter(corr, "bias-field correlation C(phi2)")?;
    let draw = |var: Variable, mean: f64, variance: f64| -> DVector<f64> {
        let mut rng = stream(seed, var, 0, 0);
        let z = standard_normal_vec(n, &mut rng);
        let mut out = chol.l() * z * variance.sqrt();
        out.add_scalar_mut(mean);
        out
    };
    Ok(BiasFields {
        alpha0: draw(Variable::BiasAlpha0, params.mu_alpha0, params.sigma_alpha0_sq),
        beta0: draw(Variable::BiasBeta0, params.mu_beta0, params.sigma_beta0_sq),
        alpha1: draw(Variable::BiasAlpha1, params.mu_alpha1, params.sigma_alpha1_sq),
        beta1: draw(Variable::BiasBeta1, params.mu_beta1, params.sigma_beta1_sq),
    })
}

/// Draw the bivariate error process `(e0, e1)` for `n_days` independent days,
/// with cross-covariance `Sigma ⊗ C(phi1)`. Returned as site × day matrices.
pub fn simulate_error_process(
    sites: &SiteSet,
    n_days: usize,
    params: &CovarianceParams,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(params.phi1 > 0.0) || params.sigma1_sq < 0.0 || params.sigma2_sq < 0.0 || params.gamma.abs() > 1.0 {
        return Err(Error::Parameter(format!("invalid error-process parameters {params:?}")));
    }
    let n = sites.len();
    let corr = exp_correlation(&distance_matrix(sites), params.phi1)?;
    let l = cholesky_jitter(corr, "error-process correlation C(phi1)")?.l();
    let (s1, s2, g) = (params.sigma1_sq.sqrt(), params.sigma2_sq.sqrt(), params.gamma);
    let g_perp = (1.0 - g * g).max(0.0).sqrt();
    let mut e0 = DMatrix::zeros(n, n_days);
    let mut e1 = DMatrix::zeros(n, n_days);
    for t in 0..n_days {
        let mut rng = stream(seed, Variable::ErrorProcess, t as u64, 0);
        let w1 = &l * standard_normal_vec(n, &mut rng);
        let w2 = &l * standard_normal_vec(n, &mut rng);
        e0.set_column(t, &(&w1 * s1));
        e1.set_column(t, &((&w1 * g + &w2 * g_perp) * s2));
    }
    Ok((e0, e1))
}

/// Generator for the numerical-model covariates that stand in for the
/// fire and no-fire model runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateConfig {
    /// Log-scale mean of the no-fire field.
    pub theta_log_mean: f64,
    /// Stationary log-scale standard deviation.
    pub theta_log_sd: f64,
    /// Day-to-day AR(1) coefficient of the log field.
    pub theta_ar: f64,
    /// Expected number of fire episodes per day.
    pub episode_rate: f64,
    /// Mean peak contribution of an episode (μg/m³).
    pub episode_peak_mean: f64,
    /// Spatial e-folding distance of an episode plume (km).
    pub episode_scale_km: f64,
    /// Temporal e-folding time of an episode (days).
    pub episode_decay_days: f64,
    /// Contributions below this are set to exactly zero.
    pub cutoff: f64,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        Self {
            theta_log_mean: 2f64.ln(),
            theta_log_sd: 0.4,
            theta_ar: 0.7,
            episode_rate: 0.15,
            episode_peak_mean: 12.0,
            episode_scale_km: 80.0,
            episode_decay_days: 2.0,
            cutoff: 0.05,
        }
    }
}

/// Generate `(theta_hat, delta_hat)`: a lognormal AR(1) background per site
/// and a sum of Poisson-seeded fire episodes that decay exponentially in
/// space and time.
pub fn simulate_covariates(
    sites: &SiteSet,
    n_days: usize,
    cfg: &CovariateConfig,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(cfg.theta_ar.abs() < 1.0) || cfg.theta_log_sd < 0.0 || cfg.episode_rate < 0.0 {
        return Err(Error::Parameter(format!("invalid covariate configuration {cfg:?}")));
    }
    let n = sites.len();
    let mut theta_hat = DMatrix::zeros(n, n_days);
    let innov = cfg.theta_log_sd * (1.0 - cfg.theta_ar * cfg.theta_ar).sqrt();
    for i in 0..n {
        let mut rng = stream(seed, Variable::ModelBackground, i as u64, 0);
        let mut z = cfg.theta_log_sd * crate::linalg::standard_normal(&mut rng);
        for t in 0..n_days {
            if t > 0 {
                z = cfg.theta_ar * z + innov * crate::linalg::standard_normal(&mut rng);
            }
            theta_hat[(i, t)] = (cfg.theta_log_mean + z).exp();
        }
    }

    let mut delta_hat = DMatrix::zeros(n, n_days);
    let xy = sites.coords_km();
    let (xmin, xmax) = xy.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (ymin, ymax) = xy.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let margin = cfg.episode_scale_km;
    let lambda = cfg.episode_rate * n_days as f64;
    let n_episodes = if lambda > 0.0 {
        let mut rng = stream(seed, Variable::FireEpisodes, u64::MAX, 0);
        Poisson::new(lambda)
            .map_err(|e| Error::Parameter(format!("episode rate: {e}")))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let peak_dist = Exp::new(1.0 / cfg.episode_peak_mean.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(format!("episode peak: {e}")))?;
    for k in 0..n_episodes {
        let mut rng = stream(seed, Variable::FireEpisodes, k as u64, 0);
        let cx = rng.random_range((xmin - margin)..=(xmax + margin));
        let cy = rng.random_range((ymin - margin)..=(ymax + margin));
        let start = rng.random_range(0..n_days);
        let peak = peak_dist.sample(&mut rng);
        for (i, &(x, y)) in xy.iter().enumerate() {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let spatial = peak * (-d / cfg.episode_scale_km).exp();
            for t in start..n_days {
                let v = spatial * (-((t - start) as f64) / cfg.episode_decay_days).exp();
                if v < cfg.cutoff {
                    break;
                }
                delta_hat[(i, t)] += v;
            }
        }
    }
    Ok((theta_hat, delta_hat))
}

/// Everything drawn for a synthetic panel, including the latent fields.
#[derive(Clone, Debug)]
pub struct SimulatedPanel {
    pub data: PanelDataset,
    pub biases: BiasFields,
    pub theta: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub e0: DMatrix<f64>,
    pub e1: DMatrix<f64>,
    pub eps: DMatrix<f64>,
    /// Observations before masking (complete).
    pub y_full: DMatrix<f64>,
    pub params: TrueParams,
}

impl SimulatedPanel {
    /// True causal effect `T^{-1} Σ_t C_t(s) δ_t(s)` per site.
    pub fn true_effect(&self) -> DVector<f64> {
        let t = self.data.n_days() as f64;
        DVector::from_iterator(
            self.data.n_sites(),
            (0..self.data.n_sites()).map(|i| {
                (0..self.data.n_days())
                    .map(|d| f64::from(self.data.c[(i, d)]) * self.delta[(i, d)])
                    .sum::<f64>()
                    / t
            }),
        )
    }
}

/// Simulation settings beyond the model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_days: usize,
    pub covariates: CovariateConfig,
    /// Probability that an observation is missing, independently per cell.
    pub missing_fraction: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_days: 200,
            covariates: CovariateConfig::default(),
            missing_fraction: 0.05,
        }
    }
}

/// Simulate a full panel: covariates, smoke indicator, bias fields, the
/// bivariate error process, latents and observations.
pub fn simulate_panel(sites: &SiteSet, params: &TrueParams, cfg: &SimulationConfig, seed: u64) -> Result<SimulatedPanel> {
    if cfg.n_days == 0 {
        return Err(Error::Parameter("simulation needs at least one day".into()));
    }
    let (theta_hat, delta_hat) = simulate_covariates(sites, cfg.n_days, &cfg.covariates, seed)?;
    let c = smoke_indicator(&delta_hat, params.tau);
    simulate_from_covariates(sites, theta_hat, delta_hat, c, params, cfg.missing_fraction, seed)
}

/// Simulate latents and observations for given covariates and indicator.
pub fn simulate_from_covariates(
    sites: &SiteSet,
    theta_hat: DMatrix<f64>,
    delta_hat: DMatrix<f64>,
    c: DMatrix<u8>,
    params: &TrueParams,
    missing_fraction: f64,
    seed: u64,
) -> Result<SimulatedPanel> {
    params.validate()?;
    if !(0.0..1.0).contains(&missing_fraction) {
        return Err(Error::Parameter(format!("missing fraction must be in [0, 1), got {missing_fraction}")));
    }
    let (n, days) = theta_hat.shape();
    let biases = simulate_bias_fields(sites, params, seed)?;
    let (e0, e1) = simulate_error_process(sites, days, &params.covariance(), seed)?;
    let sd = params.sigma_sq.sqrt();
    let mut eps = DMatrix::zeros(n, days);
    for t in 0..days {
        let mut rng = stream(seed, Variable::Nugget, t as u64, 0);
        eps.set_column(t, &(standard_normal_vec(n, &mut rng) * sd));
    }
    let theta = DMatrix::from_fn(n, days, |i, t| {
        biases.alpha0[i] + biases.beta0[i] * theta_hat[(i, t)] + e0[(i, t)]
    });
    let delta = DMatrix::from_fn(n, days, |i, t| {
        biases.alpha1[i] + biases.beta1[i] * delta_hat[(i, t)] + e1[(i, t)]
    });
    let y_full = DMatrix::from_fn(n, days, |i, t| {
        theta[(i, t)] + f64::from(c[(i, t)]) * delta[(i, t)] + eps[(i, t)]
    });
    let mut y = y_full.clone();
    if missing_fraction > 0.0 {
        for i in 0..n {
            let mut rng = stream(seed, Variable::Missing, i as u64, 0);
            for t in 0..days {
                if rng.random::<f64>() < missing_fraction {
                    y[(i, t)] = f64::NAN;
                }
            }
        }
    }
    let mut data = PanelDataset::with_indicator(sites.clone(), y, theta_hat, delta_hat, c)?;
    data.tau = params.tau;
    Ok(SimulatedPanel {
        data,
        biases,
        theta,
        delta,
        e0,
        e1,
        eps,
        y_full,
        params: *params,
    })
}

/// A rectangular region of synthetic monitoring sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub name: String,
    /// Center of the region in km relative to the layout origin.
    pub center_km: (f64, f64),
    /// Side length of the square region (km).
    pub extent_km: f64,
    pub n_sites: usize,
}

impl RegionLayout {
    pub fn new(name: &str, center_km: (f64, f64), extent_km: f64, n_sites: usize) -> Self {
        Self {
            name: name.to_string(),
            center_km,
            extent_km,
            n_sites,
        }
    }
}

/// Default geographic anchor of synthetic layouts (lon, lat).
pub const DEFAULT_ORIGIN: (f64, f64) = (-120.0, 38.0);

/// Uniformly scattered sites per region, ids `<region>-NNN`.
pub fn layout_sites(regions: &[RegionLayout], origin: (f64, f64), seed: u64) -> Result<SiteSet> {
    let mut ids = Vec::new();
    let mut xy = Vec::new();
    let mut labels = Vec::new();
    for (r, layout) in regions.iter().enumerate() {
        let mut rng = stream(seed, Variable::Sites, r as u64, 0);
        let half = 0.5 * layout.extent_km;
        for k in 0..layout.n_sites {
            ids.push(format!("{}-{:03}", layout.name, k + 1));
            xy.push((
                layout.center_km.0 + rng.random_range(-half..half),
                layout.center_km.1 + rng.random_range(-half..half),
            ));
            labels.push(Some(layout.name.clone()));
        }
    }
    SiteSet::from_planar(ids, &xy, labels, origin)
}

/// Regular prediction grid (cell centroids every `cell_km`) covering each
/// region, grouped into square counties of `cells_per_county` × `cells_per_county` cells.
pub fn layout_grid(
    regions: &[RegionLayout],
    origin: (f64, f64),
    cell_km: f64,
    cells_per_county: usize,
) -> Result<Vec<GridCell>> {
    if !(cell_km > 0.0) || cells_per_county == 0 {
        return Err(Error::Parameter("grid cell size and county size must be positive".into()));
    }
    let mut cells = Vec::new();
    for (r, layout) in regions.iter().enumerate() {
        let per_side = ((layout.extent_km / cell_km).floor() as usize).max(1);
        let x0 = layout.center_km.0 - 0.5 * per_side as f64 * cell_km;
        let y0 = layout.center_km.1 - 0.5 * per_side as f64 * cell_km;
        let counties_per_side = per_side.div_ceil(cells_per_county);
        for gy in 0..per_side {
            for gx in 0..per_side {
                let x = x0 + (gx as f64 + 0.5) * cell_km;
                let y = y0 + (gy as f64 + 0.5) * cell_km;
                let (lon, lat) = crate::spatial::unproject(origin, x, y);
                let county = (gy / cells_per_county) * counties_per_side + gx / cells_per_county;
                cells.push(GridCell {
                    cell_id: format!("{}-{:03}-{:03}", layout.name, gx, gy),
                    lon,
                    lat,
                    region: Some(layout.name.clone()),
                    county_fips: format!("{:02}{:03}", r + 1, county + 1),
                });
            }
        }
    }
    Ok(cells)
}

/// Serializable ground truth: parameters plus per-site bias fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub params: TrueParams,
    pub seed: u64,
    pub sites: BTreeMap<String, [f64; 4]>,
}

fn round9(x: f64) -> f64 {
    fmt_g9(x).parse().unwrap_or(x)
}

impl Truth {
    pub fn from_simulation(sim: &SimulatedPanel, seed: u64) -> Self {
        let p = sim.params;
        let params = TrueParams {
            mu_alpha0: round9(p.mu_alpha0),
            mu_beta0: round9(p.mu_beta0),
            mu_alpha1: round9(p.mu_alpha1),
            mu_beta1: round9(p.mu_beta1),
            sigma_alpha0_sq: round9(p.sigma_alpha0_sq),
            sigma_beta0_sq: round9(p.sigma_beta0_sq),
            sigma_alpha1_sq: round9(p.sigma_alpha1_sq),
            sigma_beta1_sq: round9(p.sigma_beta1_sq),
            phi2: round9(p.phi2),
            sigma1_sq: round9(p.sigma1_sq),
            sigma2_sq: round9(p.sigma2_sq),
            gamma: round9(p.gamma),
            phi1: round9(p.phi1),
            sigma_sq: round9(p.sigma_sq),
            tau: round9(p.tau),
        };
        let sites = sim
            .data
            .sites
            .ids()
            .enumerate()
            .map(|(i, id)| {
                let b = &sim.biases;
                (
                    id.to_string(),
                    [
                        round9(b.alpha0[i]),
                        round9(b.beta0[i]),
                        round9(b.alpha1[i]),
                        round9(b.beta1[i]),
                    ],
                )
            })
            .collect();
        Self { params, seed, sites }
    }
}
