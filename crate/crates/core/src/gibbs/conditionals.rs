//! Full-conditional updates.
//!
//! Notation: `R = C(phi1)`, `K = C(phi2)`, `B0 = alpha0 + beta0 * theta_hat`,
//! `B1 = alpha1 + beta1 * delta_hat`, `U = theta - B0` and `W = delta - B1`
//! (site × day matrices). Under the coregionalization form the day-`t`
//! prior is `u_t ~ N(0, s1^2 R)` and `w_t - rho u_t ~ N(0, s2^2 R)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use super::state::ModelState;
use super::PriorConfig;
use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, inv_gamma, sample_from_precision, standard_normal, SpdFactor};
use crate::rng::child;
use crate::spatial::{distance_matrix, exp_correlation};

/// Everything about a dataset that stays fixed for a whole chain.
#[derive(Clone, Debug)]
pub struct Model {
    pub n: usize,
    pub m: usize,
    pub theta_hat: DMatrix<f64>,
    pub delta_hat: DMatrix<f64>,
    /// Smoke indicator as 0.0 / 1.0.
    pub c: DMatrix<f64>,
    pub missing: DMatrix<bool>,
    /// Observations; NaN where missing.
    pub y_obs: DMatrix<f64>,
    pub phi1: f64,
    pub phi2: f64,
    /// `C(phi1)`.
    pub r: SpdFactor,
    /// `C(phi2)`.
    pub k: SpdFactor,
    pub k_inv_one: DVector<f64>,
    pub one_k_inv_one: f64,
    /// `Σ_t theta_hat_t theta_hat_t^T`.
    pub s_theta: DMatrix<f64>,
    /// `Σ_t delta_hat_t delta_hat_t^T`.
    pub s_delta: DMatrix<f64>,
    /// Smoke-impacted site indices per day.
    pub smoke_sites: Vec<Vec<usize>>,
    pub priors: PriorConfig,
}

impl Model {
    pub fn new(data: &PanelDataset, phi1: f64, phi2: f64, priors: PriorConfig) -> Result<Self> {
        let (n, m) = data.y.shape();
        if m == 0 {
            return Err(Error::InsufficientData("the sampler needs at least one day".into()));
        }
        priors.validate()?;
        let dist = distance_matrix(&data.sites);
        let r = SpdFactor::new(exp_correlation(&dist, phi1)?, "error-process correlation C(phi1)")?;
        let k = SpdFactor::new(exp_correlation(&dist, phi2)?, "bias-field correlation C(phi2)")?;
        let k_inv_one = k.inverse.column_sum();
        let one_k_inv_one = k_inv_one.sum();
        let s_theta = &data.theta_hat * data.theta_hat.transpose();
        let s_delta = &data.delta_hat * data.delta_hat.transpose();
        let smoke_sites = (0..m)
            .map(|t| (0..n).filter(|&i| data.c[(i, t)] == 1).collect())
            .collect();
        Ok(Self {
            n,
            m,
            theta_hat: data.theta_hat.clone(),
            delta_hat: data.delta_hat.clone(),
            c: data.c.map(f64::from),
            missing: data.missing.clone(),
            y_obs: data.y.clone(),
            phi1,
            phi2,
            r,
            k,
            k_inv_one,
            one_k_inv_one,
            s_theta,
            s_delta,
            smoke_sites,
            priors,
        })
    }

    pub fn b0(&self, st: &ModelState) -> DMatrix<f64> {
        mean_field(&st.alpha0, &st.beta0, &self.theta_hat)
    }

    pub fn b1(&self, st: &ModelState) -> DMatrix<f64> {
        mean_field(&st.alpha1, &st.beta1, &self.delta_hat)
    }

    pub fn u(&self, st: &ModelState) -> DMatrix<f64> {
        &st.theta - self.b0(st)
    }

    pub fn w(&self, st: &ModelState) -> DMatrix<f64> {
        &st.delta - self.b1(st)
    }

    /// Per-site causal effect `T^{-1} Σ_t C_t(s) delta_t(s)` of a state.
    pub fn effect(&self, st: &ModelState) -> DVector<f64> {
        self.c.component_mul(&st.delta).column_sum() / self.m as f64
    }
}

/// `a + b ∘ x` with `a`, `b` broadcast over days.
fn mean_field(a: &DVector<f64>, b: &DVector<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, t| a[i] + b[i] * x[(i, t)])
}

/// `Σ_t x_t^T A y_t` for site × day matrices.
fn trace_form(a: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    x.dot(&(a * y))
}

fn normal_matrix<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, m);
    z.iter_mut().for_each(|v| *v = standard_normal(rng));
    z
}

fn gaussian_from_precision<R: Rng + ?Sized>(
    precision: DMatrix<f64>,
    linear: &DVector<f64>,
    context: &str,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = cholesky_jitter(precision, context)?;
    Ok(sample_from_precision(&chol, linear, rng))
}

/// theta_t | rest for every day. The precision
/// `I / sigma^2 + (1 / s1^2 + rho^2 / s2^2) R^{-1}` shares the eigenvectors of
/// `R`, so all days are drawn with two matrix products.
pub fn update_theta<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) {
    let (s1, s2, rho, sig) = (st.s1_sq, st.s2_sq, st.rho, st.sigma_sq);
    let b0 = model.b0(st);
    let b1 = model.b1(st);
    let prior_part = &b0 / s1 + (&st.delta - &b1 + &b0 * rho) * (rho / s2);
    let data_part = (&st.y - model.c.component_mul(&st.delta)) / sig;
    let linear = data_part + &model.r.inverse * prior_part;
    let a = 1.0 / sig;
    let b = 1.0 / s1 + rho * rho / s2;
    let q = &model.r.eigvecs;
    let mut coef = q.transpose() * linear;
    let z = normal_matrix(model.n, model.m, rng);
    for i in 0..model.n {
        let d = a + b / model.r.eigvals[i];
        let (inv, inv_sqrt) = (1.0 / d, 1.0 / d.sqrt());
        for t in 0..model.m {
            coef[(i, t)] = coef[(i, t)] * inv + z[(i, t)] * inv_sqrt;
        }
    }
    st.theta = q * coef;
}

/// delta_t | rest for every day. The data only touch smoke-impacted sites,
/// so each day is drawn by conditioning a prior draw on those sites
/// (Matheron's update). Days run in parallel on child streams.
pub fn update_delta<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) -> Result<()> {
    let s2 = st.s2_sq;
    let sd2 = s2.sqrt();
    let prior_mean = model.b1(st) + model.u(st) * st.rho;
    let resid = &st.y - &st.theta;
    let base: u64 = rng.random();
    let sigma_sq = st.sigma_sq;
    let cols: Vec<DVector<f64>> = (0..model.m)
        .into_par_iter()
        .map(|t| {
            let mut r = child(base, t as u64);
            let xi = crate::linalg::standard_normal_vec(model.n, &mut r);
            let mut draw = prior_mean.column(t) + &model.r.sqrt * xi * sd2;
            let smoke = &model.smoke_sites[t];
            if smoke.is_empty() {
                return Ok(draw);
            }
            let k = smoke.len();
            let g = DMatrix::from_fn(k, k, |a, b| {
                s2 * model.r.matrix[(smoke[a], smoke[b])] + if a == b { sigma_sq } else { 0.0 }
            });
            let gap = DVector::from_fn(k, |a, _| {
                let i = smoke[a];
                resid[(i, t)] - draw[i] - sigma_sq.sqrt() * standard_normal(&mut r)
            });
            let sol = cholesky_jitter(g, "smoke-site observation covariance")?.solve(&gap);
            for i in 0..model.n {
                let mut acc = 0.0;
                for (a, &j) in smoke.iter().enumerate() {
                    acc += model.r.matrix[(i, j)] * sol[a];
                }
                draw[i] += s2 * acc;
            }
            Ok(draw)
        })
        .collect::<Result<_>>()?;
    for (t, col) in cols.into_iter().enumerate() {
        st.delta.set_column(t, &col);
    }
    Ok(())
}

/// theta then delta.
pub fn update_latents<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) -> Result<()> {
    update_theta(model, st, rng);
    update_delta(model, st, rng)
}

pub fn update_alpha0<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) -> Result<()> {
    let c1 = 1.0 / st.s1_sq + st.rho * st.rho / st.s2_sq;
    let c2 = st.rho / st.s2_sq;
    let a = &st.theta - mean_field(&DVector::zeros(model.n), &st.beta0, &model.theta_hat);
    let w = model.w(st);
    let rinv = &model.r.inverse;
    let prec = rinv * (model.m as f64 * c1) + &model.k.inverse / st.sig_sq[0];
    let linear = rinv * (a.column_sum() * c1 - w.column_sum() * c2) + &model.k_inv_one * (st.mu[0] / st.sig_sq[0]);
    st.alpha0 = gaussian_from_precision(prec, &linear, "alpha0 precision", rng)?;
    Ok(())
}

pub fn update_beta0<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) -> Result<()> {
    let c1 = 1.0 / st.s1_sq + st.rho * st.rho / st.s2_sq;
    let c2 = st.rho / st.s2_sq;
    let b = DMatrix::from_fn(model.n, model.m, |i, t| st.theta[(i, t)] - st.alpha0[i]);
    let x = b * c1 - model.w(st) * c2;
    let rx = &model.r.inverse * x;
    let prec = model.r.inverse.component_mul(&model.s_theta) * c1 + &model.k.inverse / st.sig_sq[1];
    let linear = model.theta_hat.component_mul(&rx).column_sum() + &model.k_inv_one * (st.mu[1] / st.sig_sq[1]);
    st.beta0 = gaussian_from_precision(prec, &linear, "beta0 precision", rng)?;
    Ok(())
}

pub fn update_alpha1<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) -> Result<()> {
    let e = &st.delta - mean_field(&DVector::zeros(model.n), &st.beta1, &model.delta_hat) - model.u(st) * st.rho;
    let prec = &model.r.inverse * (model.m as f64 / st.s2_sq) + &model.k.inverse / st.sig_sq[2];
    let linear = &model.r.inverse * e.column_sum() / st.s2_sq + &model.k_inv_one * (st.mu[2] / st.sig_sq[2]);
    st.alpha1 = gaussian_from_precision(prec, &linear, "alpha1 precision", rng)?;
    Ok(())
}

pub fn update_beta1<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) -> Result<()> {
    let u = model.u(st);
    let e = DMatrix::from_fn(model.n, model.m, |i, t| st.delta[(i, t)] - st.alpha1[i] - st.rho * u[(i, t)]);
    let re = &model.r.inverse * e;
    let prec = model.r.inverse.component_mul(&model.s_delta) / st.s2_sq + &model.k.inverse / st.sig_sq[3];
    let linear =
        model.delta_hat.component_mul(&re).column_sum() / st.s2_sq + &model.k_inv_one * (st.mu[3] / st.sig_sq[3]);
    st.beta1 = gaussian_from_precision(prec, &linear, "beta1 precision", rng)?;
    Ok(())
}

/// alpha0, beta0, alpha1, beta1 in turn.
pub fn update_bias_fields<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) -> Result<()> {
    update_alpha0(model, st, rng)?;
    update_beta0(model, st, rng)?;
    update_alpha1(model, st, rng)?;
    update_beta1(model, st, rng)
}

/// Shape and rate of the inverse-gamma full conditional of `sigma^2`.
pub fn sigma_sq_conditional(model: &Model, st: &ModelState) -> (f64, f64) {
    let resid = &st.y - &st.theta - model.c.component_mul(&st.delta);
    let p = &model.priors;
    (
        0.5 * (model.n * model.m) as f64 + p.ig_shape,
        p.ig_rate + 0.5 * resid.norm_squared(),
    )
}

/// Shape and rate of the full conditional of `s1^2`.
pub fn s1_sq_conditional(model: &Model, st: &ModelState) -> (f64, f64) {
    let u = model.u(st);
    let p = &model.priors;
    (
        0.5 * (model.n * model.m) as f64 + p.ig_shape,
        p.ig_rate + 0.5 * trace_form(&model.r.inverse, &u, &u),
    )
}

/// Shape and rate of the full conditional of `s2^2`.
pub fn s2_sq_conditional(model: &Model, st: &ModelState) -> (f64, f64) {
    let v = model.w(st) - model.u(st) * st.rho;
    let p = &model.priors;
    (
        0.5 * (model.n * model.m) as f64 + p.ig_shape,
        p.ig_rate + 0.5 * trace_form(&model.r.inverse, &v, &v),
    )
}

/// Mean and variance of the normal full conditional of `rho`:
/// precision `Σ u'R^{-1}u / s2^2 + 1 / v_rho`, mean `(Σ u'R^{-1}w / s2^2) / precision`.
pub fn rho_conditional(model: &Model, st: &ModelState) -> (f64, f64) {
    let u = model.u(st);
    let w = model.w(st);
    let ru = &model.r.inverse * &u;
    let prec = u.dot(&ru) / st.s2_sq + 1.0 / model.priors.rho_var;
    let lin = w.dot(&ru) / st.s2_sq;
    (lin / prec, 1.0 / prec)
}

pub fn update_sigma_sq<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) {
    let (a, b) = sigma_sq_conditional(model, st);
    st.sigma_sq = inv_gamma(a, b, rng);
}

pub fn update_s1_sq<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) {
    let (a, b) = s1_sq_conditional(model, st);
    st.s1_sq = inv_gamma(a, b, rng);
}

pub fn update_rho<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) {
    let (mean, var) = rho_conditional(model, st);
    st.rho = mean + var.sqrt() * standard_normal(rng);
}

pub fn update_s2_sq<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) {
    let (a, b) = s2_sq_conditional(model, st);
    st.s2_sq = inv_gamma(a, b, rng);
}

/// sigma^2, s1^2, rho, s2^2 in turn.
pub fn update_variances_and_rho<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) {
    update_sigma_sq(model, st, rng);
    update_s1_sq(model, st, rng);
    update_rho(model, st, rng);
    update_s2_sq(model, st, rng);
}

/// Mean and variance of the normal full conditional of the `j`-th bias mean
/// (order alpha0, beta0, alpha1, beta1).
pub fn mu_conditional(model: &Model, st: &ModelState, j: usize) -> (f64, f64) {
    let field = st.field(j);
    let prec = model.one_k_inv_one / st.sig_sq[j] + 1.0 / model.priors.mu_var;
    let lin = model.k_inv_one.dot(field) / st.sig_sq[j];
    (lin / prec, 1.0 / prec)
}

/// Shape and rate of the full conditional of the `j`-th bias variance.
pub fn sig_sq_conditional(model: &Model, st: &ModelState, j: usize) -> (f64, f64) {
    let centered = st.field(j).add_scalar(-st.mu[j]);
    let p = &model.priors;
    (
        0.5 * model.n as f64 + p.ig_shape,
        p.ig_rate + 0.5 * centered.dot(&(&model.k.inverse * &centered)),
    )
}

pub fn update_mu<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, j: usize, rng: &mut R) {
    let (mean, var) = mu_conditional(model, st, j);
    st.mu[j] = mean + var.sqrt() * standard_normal(rng);
}

pub fn update_sig_sq<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, j: usize, rng: &mut R) {
    let (a, b) = sig_sq_conditional(model, st, j);
    st.sig_sq[j] = inv_gamma(a, b, rng);
}

/// For each bias field: its mean, then its variance.
pub fn update_hyperparameters<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) {
    for j in 0..4 {
        update_mu(model, st, j, rng);
        update_sig_sq(model, st, j, rng);
    }
}

/// Redraw every masked observation from `N(theta + C delta, sigma^2)`.
pub fn impute_missing<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) {
    let sd = st.sigma_sq.sqrt();
    for t in 0..model.m {
        for i in 0..model.n {
            if model.missing[(i, t)] {
                st.y[(i, t)] = st.theta[(i, t)] + model.c[(i, t)] * st.delta[(i, t)] + sd * standard_normal(rng);
            }
        }
    }
}

/// One full sweep: latents, bias fields, variances and rho,
/// hyperparameters, imputation.
pub fn sweep<R: Rng + ?Sized>(model: &Model, st: &mut ModelState, rng: &mut R) -> Result<()> {
    update_latents(model, st, rng)?;
    update_bias_fields(model, st, rng)?;
    update_variances_and_rho(model, st, rng);
    update_hyperparameters(model, st, rng);
    impute_missing(model, st, rng);
    st.check_finite()
}
