//! Per-site ordinary least squares of the mean model
//! `Y = a0 + b0 theta_hat + a1 C + b1 C delta_hat + error`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{collinearity_screen, design_rank, PanelDataset, ScreenStatus};
use crate::error::{Error, Result};

/// Per-site OLS coefficients in the order (alpha0, beta0, alpha1, beta1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coef: [f64; 4],
    /// Analytic standard errors `sqrt(diag(s^2 (X^T X)^{-1}))`.
    pub se: [f64; 4],
    pub residual_variance: f64,
    /// Residual for each day; NaN on missing days.
    pub residuals: Vec<f64>,
}

impl OlsFit {
    pub fn alpha0(&self) -> f64 {
        self.coef[0]
    }
    pub fn beta0(&self) -> f64 {
        self.coef[1]
    }
    pub fn alpha1(&self) -> f64 {
        self.coef[2]
    }
    pub fn beta1(&self) -> f64 {
        self.coef[3]
    }
}

/// OLS of the site's observations on `(1, theta_hat, C, C delta_hat)`.
pub fn ols_mean_recovery(data: &PanelDataset, site: usize) -> Result<OlsFit> {
    let screen = collinearity_screen(data, site);
    match screen.status {
        ScreenStatus::Ok => {}
        ScreenStatus::Degenerate => {
            return Err(Error::Rank(format!(
                "site {}: design (1, theta_hat, C, C delta_hat) has rank {} < 4",
                data.sites.get(site).id,
                screen.rank
            )))
        }
        ScreenStatus::InsufficientData => {
            return Err(Error::Rank(format!(
                "site {}: only {} non-missing days",
                data.sites.get(site).id,
                screen.n_obs
            )))
        }
    }
    let (x, y, days) = data.site_design(site);
    let (coef, xtx_inv) = solve_ols(&x, &y)
        .ok_or_else(|| Error::Rank(format!("site {}: singular normal equations", data.sites.get(site).id)))?;
    let fitted = &x * &coef;
    let resid = &y - fitted;
    let dof = (days.len() as f64 - 4.0).max(1.0);
    let s2 = resid.norm_squared() / dof;
    let mut residuals = vec![f64::NAN; data.n_days()];
    for (k, &t) in days.iter().enumerate() {
        residuals[t] = resid[k];
    }
    Ok(OlsFit {
        coef: [coef[0], coef[1], coef[2], coef[3]],
        se: std::array::from_fn(|k| (s2 * xtx_inv[(k, k)]).max(0.0).sqrt()),
        residual_variance: s2,
        residuals,
    })
}

/// OLS on the largest identifiable prefix-greedy subset of
/// `(1, theta_hat, C, C delta_hat)`: the smoke columns are kept only when
/// they add rank. Returns the `theta_hat` coefficient and the residuals
/// (NaN on missing days), or `None` when even `(1, theta_hat)` is singular.
pub fn reduced_ols(data: &PanelDataset, site: usize) -> Option<(f64, Vec<f64>)> {
    let (x, y, days) = data.site_design(site);
    let mut cols = vec![0, 1];
    if design_rank(&x.select_columns(&cols)).0 < 2 {
        return None;
    }
    for k in [2, 3] {
        cols.push(k);
        if design_rank(&x.select_columns(&cols)).0 < cols.len() {
            cols.pop();
        }
    }
    if days.len() <= cols.len() {
        return None;
    }
    let xs = x.select_columns(&cols);
    let (coef, _) = solve_ols(&xs, &y)?;
    let resid = &y - &xs * &coef;
    let mut residuals = vec![f64::NAN; data.n_days()];
    for (k, &t) in days.iter().enumerate() {
        residuals[t] = resid[k];
    }
    Some((coef[1], residuals))
}

/// Least squares via QR; also returns `(X^T X)^{-1}`.
pub fn solve_ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let qr = x.clone().qr();
    let r = qr.r();
    if r.diagonal().iter().any(|d| d.abs() < 1e-12 * r.diagonal().amax()) {
        return None;
    }
    let qty = qr.q().transpose() * y;
    let coef = r.solve_upper_triangular(&qty)?;
    let r_inv = r.clone().try_inverse()?;
    Some((coef, &r_inv * r_inv.transpose()))
}
