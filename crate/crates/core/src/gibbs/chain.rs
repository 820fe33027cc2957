use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::conditionals::{sweep, Model};
use super::lmc::recover_sigma_gamma;
use super::ranges::estimate_ranges;
use super::state::ModelState;
use super::ChainConfig;
use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::io::{create, fmt_g9, write_json, write_rows};
use crate::rng::{stream, Variable};

/// Names of the scalar parameters recorded for each kept draw, in output order.
pub const SCALAR_PARAMS: [&str; 16] = [
    "sigma_sq",
    "s1_sq",
    "s2_sq",
    "rho",
    "sigma1_sq",
    "sigma2_sq",
    "sigma12",
    "gamma",
    "mu_alpha0",
    "mu_beta0",
    "mu_alpha1",
    "mu_beta1",
    "sig_alpha0_sq",
    "sig_beta0_sq",
    "sig_alpha1_sq",
    "sig_beta1_sq",
];

/// Per-site quantities recorded for each kept draw.
pub const SITE_PARAMS: [&str; 6] = ["alpha0", "beta0", "alpha1", "beta1", "delta_effect", "theta_bar"];

/// Summary of one kept iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iter: usize,
    /// Values in [`SCALAR_PARAMS`] order.
    pub scalars: [f64; 16],
    pub alpha0: DVector<f64>,
    pub beta0: DVector<f64>,
    pub alpha1: DVector<f64>,
    pub beta1: DVector<f64>,
    /// `T^{-1} Σ_t C_t(s) delta_t(s)`.
    pub delta_effect: DVector<f64>,
    /// `T^{-1} Σ_t theta_t(s)`.
    pub theta_bar: DVector<f64>,
}

impl Draw {
    fn from_state(iter: usize, model: &Model, st: &ModelState) -> Result<Self> {
        let sg = recover_sigma_gamma(st.s1_sq, st.s2_sq, st.rho)?;
        let scalars = [
            st.sigma_sq,
            st.s1_sq,
            st.s2_sq,
            st.rho,
            sg.sigma1_sq,
            sg.sigma2_sq,
            sg.sigma12,
            sg.gamma,
            st.mu[0],
            st.mu[1],
            st.mu[2],
            st.mu[3],
            st.sig_sq[0],
            st.sig_sq[1],
            st.sig_sq[2],
            st.sig_sq[3],
        ];
        Ok(Self {
            iter,
            scalars,
            alpha0: st.alpha0.clone(),
            beta0: st.beta0.clone(),
            alpha1: st.alpha1.clone(),
            beta1: st.beta1.clone(),
            delta_effect: model.effect(st),
            theta_bar: st.theta.column_mean(),
        })
    }

    pub fn site_field(&self, name: &str) -> Option<&DVector<f64>> {
        match name {
            "alpha0" => Some(&self.alpha0),
            "beta0" => Some(&self.beta0),
            "alpha1" => Some(&self.alpha1),
            "beta1" => Some(&self.beta1),
            "delta_effect" => Some(&self.delta_effect),
            "theta_bar" => Some(&self.theta_bar),
            _ => None,
        }
    }
}

/// Running mean and variance of the latent fields over kept draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub count: usize,
    pub theta_mean: DMatrix<f64>,
    theta_m2: DMatrix<f64>,
    pub delta_mean: DMatrix<f64>,
    delta_m2: DMatrix<f64>,
}

impl LatentSummary {
    fn new(n: usize, m: usize) -> Self {
        Self {
            count: 0,
            theta_mean: DMatrix::zeros(n, m),
            theta_m2: DMatrix::zeros(n, m),
            delta_mean: DMatrix::zeros(n, m),
            delta_m2: DMatrix::zeros(n, m),
        }
    }

    fn push(&mut self, theta: &DMatrix<f64>, delta: &DMatrix<f64>) {
        self.count += 1;
        let k = self.count as f64;
        for (mean, m2, x) in [
            (&mut self.theta_mean, &mut self.theta_m2, theta),
            (&mut self.delta_mean, &mut self.delta_m2, delta),
        ] {
            for idx in 0..x.len() {
                let d = x[idx] - mean[idx];
                mean[idx] += d / k;
                m2[idx] += d * (x[idx] - mean[idx]);
            }
        }
    }

    fn sd(&self, m2: &DMatrix<f64>) -> DMatrix<f64> {
        if self.count < 2 {
            return DMatrix::zeros(m2.nrows(), m2.ncols());
        }
        m2.map(|v| (v / (self.count - 1) as f64).sqrt())
    }

    pub fn theta_sd(&self) -> DMatrix<f64> {
        self.sd(&self.theta_m2)
    }

    pub fn delta_sd(&self) -> DMatrix<f64> {
        self.sd(&self.delta_m2)
    }
}

/// Output of a chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub site_ids: Vec<String>,
    pub n_days: usize,
    pub phi1: f64,
    pub phi2: f64,
    pub config: ChainConfig,
    pub draws: Vec<Draw>,
    pub latents: LatentSummary,
    pub final_state: ModelState,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn scalar_index(name: &str) -> Option<usize> {
        SCALAR_PARAMS.iter().position(|&p| p == name)
    }

    /// Trace of a scalar parameter.
    pub fn scalar(&self, name: &str) -> Vec<f64> {
        let k = Self::scalar_index(name).unwrap_or_else(|| panic!("unknown scalar parameter {name}"));
        self.draws.iter().map(|d| d.scalars[k]).collect()
    }

    /// Trace of a per-site quantity at one site.
    pub fn site_trace(&self, name: &str, site: usize) -> Vec<f64> {
        self.draws
            .iter()
            .map(|d| d.site_field(name).unwrap_or_else(|| panic!("unknown site parameter {name}"))[site])
            .collect()
    }

    pub fn scalar_mean(&self, name: &str) -> f64 {
        let v = self.scalar(name);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Posterior mean and sd of a per-site quantity.
    pub fn site_summary(&self, name: &str) -> (DVector<f64>, DVector<f64>) {
        let n = self.site_ids.len();
        let k = self.draws.len() as f64;
        let mut mean = DVector::zeros(n);
        for d in &self.draws {
            mean += d.site_field(name).unwrap_or_else(|| panic!("unknown site parameter {name}"));
        }
        mean /= k;
        let mut var = DVector::zeros(n);
        for d in &self.draws {
            let diff = d.site_field(name).expect("checked above") - &mean;
            var += diff.component_mul(&diff);
        }
        let sd = if self.draws.len() > 1 {
            (var / (k - 1.0)).map(f64::sqrt)
        } else {
            DVector::zeros(n)
        };
        (mean, sd)
    }
}

/// Saved state for resuming or inspecting a failed chain. Streams are
/// keyed by iteration, so `(seed, iteration, state)` fixes the continuation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    /// Last completed iteration.
    pub iteration: usize,
    pub phi1: f64,
    pub phi2: f64,
    pub state: ModelState,
}

/// Run the sampler with sweeps in the fixed order latents, bias fields,
/// variances and rho, hyperparameters, imputation.
pub fn run_chain(data: &PanelDataset, config: &ChainConfig) -> Result<PosteriorSamples> {
    if data.observed_smoke_days() == 0 {
        warn!("no observed site-day has C = 1: the smoke bias fields are informed by the prior only");
    }
    let (phi1, phi2) = resolve_ranges(data, config);
    let model = Model::new(data, phi1, phi2, config.priors)?;
    let state = ModelState::initial(&model);
    drive(data, &model, config, state, 0)
}

/// Continue a chain from a checkpoint. Only draws after the checkpoint are
/// returned; they are identical to those of the uninterrupted chain.
pub fn resume_chain(data: &PanelDataset, config: &ChainConfig, checkpoint: Checkpoint) -> Result<PosteriorSamples> {
    if checkpoint.seed != config.seed {
        return Err(Error::Parameter(format!(
            "checkpoint seed {} does not match configured seed {}",
            checkpoint.seed, config.seed
        )));
    }
    let model = Model::new(data, checkpoint.phi1, checkpoint.phi2, config.priors)?;
    drive(data, &model, config, checkpoint.state, checkpoint.iteration)
}

fn resolve_ranges(data: &PanelDataset, config: &ChainConfig) -> (f64, f64) {
    match (config.phi1, config.phi2) {
        (Some(a), Some(b)) => (a, b),
        (a, b) => {
            let est = estimate_ranges(data);
            info!("estimated ranges phi1 = {:.3} km, phi2 = {:.3} km", est.phi1, est.phi2);
            (a.unwrap_or(est.phi1), b.unwrap_or(est.phi2))
        }
    }
}

fn drive(
    data: &PanelDataset,
    model: &Model,
    config: &ChainConfig,
    mut state: ModelState,
    start: usize,
) -> Result<PosteriorSamples> {
    config.validate()?;
    if state.theta.shape() != (model.n, model.m) {
        return Err(Error::Validation("state dimensions do not match the dataset".into()));
    }
    let site_ids: Vec<String> = data.sites.ids().map(str::to_string).collect();
    let mut latent_out = match &config.latent_draws {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "iter,site_id,day,theta,delta").map_err(|e| Error::io(p.display().to_string(), e))?;
            Some((p.clone(), w))
        }
        None => None,
    };
    let mut draws = Vec::with_capacity(config.n_kept());
    let mut latents = LatentSummary::new(model.n, model.m);
    let report_every = (config.n_iter / 10).max(1);
    for iter in (start + 1)..=config.n_iter {
        let before = config.checkpoint.as_ref().map(|_| state.clone());
        let mut rng = stream(config.seed, Variable::Chain, iter as u64, 0);
        if let Err(e) = sweep(model, &mut state, &mut rng) {
            let checkpoint = match (&config.checkpoint, before) {
                (Some(path), Some(good)) => {
                    let cp = Checkpoint {
                        version: 1,
                        seed: config.seed,
                        iteration: iter - 1,
                        phi1: model.phi1,
                        phi2: model.phi2,
                        state: good,
                    };
                    write_json(path, &cp)?;
                    Some(path.clone())
                }
                _ => None,
            };
            return Err(Error::Chain {
                iteration: iter,
                source: Box::new(e),
                checkpoint,
            });
        }
        if config.is_kept(iter) {
            draws.push(Draw::from_state(iter, model, &state).map_err(|e| Error::Chain {
                iteration: iter,
                source: Box::new(e),
                checkpoint: None,
            })?);
            latents.push(&state.theta, &state.delta);
            if let Some((path, w)) = latent_out.as_mut() {
                write_latent_rows(w, iter, &site_ids, &state).map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
        if iter % report_every == 0 {
            info!("iteration {iter}/{}", config.n_iter);
        } else {
            debug!("iteration {iter}");
        }
    }
    if let Some((path, mut w)) = latent_out {
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(PosteriorSamples {
        site_ids,
        n_days: model.m,
        phi1: model.phi1,
        phi2: model.phi2,
        config: config.clone(),
        draws,
        latents,
        final_state: state,
    })
}

fn write_latent_rows(w: &mut BufWriter<File>, iter: usize, ids: &[String], st: &ModelState) -> std::io::Result<()> {
    for (i, id) in ids.iter().enumerate() {
        for t in 0..st.theta.ncols() {
            writeln!(w, "{iter},{id},{},{},{}", t + 1, fmt_g9(st.theta[(i, t)]), fmt_g9(st.delta[(i, t)]))?;
        }
    }
    Ok(())
}

/// `samples.csv`: `iter,param,site_id,value`; scalar rows have an empty site id.
pub fn write_samples(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    let mut rows = Vec::new();
    for d in &samples.draws {
        for (k, name) in SCALAR_PARAMS.iter().enumerate() {
            rows.push(format!("{},{},,{}", d.iter, name, fmt_g9(d.scalars[k])));
        }
        for name in SITE_PARAMS {
            let field = d.site_field(name).expect("listed field");
            for (i, id) in samples.site_ids.iter().enumerate() {
                rows.push(format!("{},{},{},{}", d.iter, name, id, fmt_g9(field[i])));
            }
        }
    }
    write_rows(path, "iter,param,site_id,value", rows)
}

/// `site_id,day,theta_mean,theta_sd,delta_mean,delta_sd`.
pub fn write_latent_summary(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    let l = &samples.latents;
    let (tsd, dsd) = (l.theta_sd(), l.delta_sd());
    let mut rows = Vec::new();
    for (i, id) in samples.site_ids.iter().enumerate() {
        for t in 0..samples.n_days {
            rows.push(format!(
                "{},{},{},{},{},{}",
                id,
                t + 1,
                fmt_g9(l.theta_mean[(i, t)]),
                fmt_g9(tsd[(i, t)]),
                fmt_g9(l.delta_mean[(i, t)]),
                fmt_g9(dsd[(i, t)])
            ));
        }
    }
    write_rows(path, "site_id,day,theta_mean,theta_sd,delta_mean,delta_sd", rows)
}
