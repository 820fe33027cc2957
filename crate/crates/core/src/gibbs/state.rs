use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::conditionals::Model;
use crate::error::{Error, Result};
use crate::ols::solve_ols;

/// One draw of every unknown in the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// Latent background, site × day.
    pub theta: DMatrix<f64>,
    /// Latent fire contribution, site × day.
    pub delta: DMatrix<f64>,
    pub alpha0: DVector<f64>,
    pub beta0: DVector<f64>,
    pub alpha1: DVector<f64>,
    pub beta1: DVector<f64>,
    pub rho: f64,
    pub s1_sq: f64,
    pub s2_sq: f64,
    pub sigma_sq: f64,
    /// Bias-field means, order alpha0, beta0, alpha1, beta1.
    pub mu: [f64; 4],
    /// Bias-field variances, same order.
    pub sig_sq: [f64; 4],
    /// Observations with masked cells replaced by their current imputation.
    pub y: DMatrix<f64>,
}

impl ModelState {
    pub fn field(&self, j: usize) -> &DVector<f64> {
        match j {
            0 => &self.alpha0,
            1 => &self.beta0,
            2 => &self.alpha1,
            3 => &self.beta1,
            _ => panic!("bias field index {j} out of range"),
        }
    }

    /// Starting point: a pooled least-squares fit of the mean model over all
    /// sites, latents at their prior means and moderate variances.
    pub fn initial(model: &Model) -> Self {
        let (n, m) = (model.n, model.m);
        let mut rows = Vec::new();
        let mut obs = Vec::new();
        for i in 0..n {
            for t in 0..m {
                if !model.missing[(i, t)] {
                    let c = model.c[(i, t)];
                    rows.extend_from_slice(&[1.0, model.theta_hat[(i, t)], c, c * model.delta_hat[(i, t)]]);
                    obs.push(model.y_obs[(i, t)]);
                }
            }
        }
        let mut coef = [0.0; 4];
        let mut resid_var = 1.0;
        if obs.len() > 4 {
            let x = DMatrix::from_row_slice(obs.len(), 4, &rows);
            let y = DVector::from_vec(obs);
            // Drop the smoke columns when nothing is flagged.
            let cols: Vec<usize> = (0..4).filter(|&k| x.column(k).norm() > 0.0).collect();
            let xs = x.select_columns(&cols);
            if let Some((b, _)) = solve_ols(&xs, &y) {
                for (k, &col) in cols.iter().enumerate() {
                    coef[col] = b[k];
                }
                let r = &y - &xs * &b;
                resid_var = r.norm_squared() / (y.len() - cols.len()).max(1) as f64;
            } else {
                coef[0] = y.mean();
            }
        } else if !obs.is_empty() {
            coef[0] = obs.iter().sum::<f64>() / obs.len() as f64;
        }
        let v = (resid_var / 3.0).max(1e-4);
        let alpha0 = DVector::from_element(n, coef[0]);
        let beta0 = DVector::from_element(n, coef[1]);
        let alpha1 = DVector::from_element(n, coef[2]);
        let beta1 = DVector::from_element(n, coef[3]);
        let theta = DMatrix::from_fn(n, m, |i, t| alpha0[i] + beta0[i] * model.theta_hat[(i, t)]);
        let delta = DMatrix::from_fn(n, m, |i, t| alpha1[i] + beta1[i] * model.delta_hat[(i, t)]);
        let y = DMatrix::from_fn(n, m, |i, t| {
            if model.missing[(i, t)] {
                theta[(i, t)] + model.c[(i, t)] * delta[(i, t)]
            } else {
                model.y_obs[(i, t)]
            }
        });
        Self {
            theta,
            delta,
            alpha0,
            beta0,
            alpha1,
            beta1,
            rho: 0.0,
            s1_sq: v,
            s2_sq: v,
            sigma_sq: v,
            mu: coef,
            sig_sq: [0.1; 4],
            y,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        let scalars = [self.rho, self.s1_sq, self.s2_sq, self.sigma_sq];
        let ok = scalars.iter().all(|v| v.is_finite())
            && self.s1_sq > 0.0
            && self.s2_sq > 0.0
            && self.sigma_sq > 0.0
            && self.mu.iter().all(|v| v.is_finite())
            && self.sig_sq.iter().all(|v| v.is_finite() && *v > 0.0)
            && self.theta.iter().all(|v| v.is_finite())
            && self.delta.iter().all(|v| v.is_finite())
            && (0..4).all(|j| self.field(j).iter().all(|v| v.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::not_pd("sampler state became non-finite or non-positive"))
        }
    }
}
